import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from satrdl.data import (
    CorpusError,
    KinematicTrial,
    KinematicsParseError,
    SynthSpec,
    TrialTooShortError,
    build_loso_folds,
    load_trials,
    n_validation,
    parse_columns,
    read_kinematics,
    split_groups,
    synth_generate,
    train_val_split,
    window,
    window_array,
    window_count,
    window_trials,
    write_corpus,
    znormalize,
    znormalize_array,
)

from conftest import INVARIANT_EXAMPLES

invariant = pytest.mark.invariant
prop = settings(max_examples=INVARIANT_EXAMPLES, deadline=None)


def trial(tid="Suturing_B001", subject="B", skill="novice", task="suturing", rep=1, length=150, channels=2):
    return KinematicTrial(tid, subject, skill, task, rep, np.zeros((length, channels)) + np.arange(length)[:, None])


# --- reading --------------------------------------------------------------------


def test_read_kinematics_plain(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("1 2 3\n4 5 6\n")
    np.testing.assert_array_equal(read_kinematics(p), [[1, 2, 3], [4, 5, 6]])


def test_read_kinematics_ragged_row_names_line(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("\n".join(["1 2 3 4"] * 6 + ["1 2 3"]) + "\n")
    with pytest.raises(KinematicsParseError, match=r"a\.txt:7") as info:
        read_kinematics(p)
    assert info.value.line == 7


def test_read_kinematics_non_numeric(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("1 2\n3 x\n")
    with pytest.raises(KinematicsParseError) as info:
        read_kinematics(p)
    assert info.value.line == 2


def test_read_kinematics_empty(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("")
    with pytest.raises(CorpusError):
        read_kinematics(p)


def test_parse_columns():
    assert parse_columns("0-2,6") == [0, 1, 2, 6]
    assert parse_columns(None) is None
    assert parse_columns("all") is None
    assert parse_columns([4, 1]) == [4, 1]


def test_corpus_round_trip(tmp_path):
    trials = synth_generate(SynthSpec(min_length=130, max_length=140, repetitions=2, seed=1))
    manifest = write_corpus(trials, tmp_path)
    loaded = load_trials(tmp_path, manifest)
    assert [t.trial_id for t in loaded] == [t.trial_id for t in trials]
    for a, b in zip(loaded, trials):
        assert (a.skill, a.task, a.repetition, a.subject_id) == (b.skill, b.task, b.repetition, b.subject_id)
        np.testing.assert_allclose(a.samples, b.samples, rtol=1e-9)


def test_load_trials_column_subset(tmp_path):
    trials = synth_generate(SynthSpec(min_length=130, max_length=130, repetitions=1, seed=1))
    manifest = write_corpus(trials, tmp_path)
    loaded = load_trials(tmp_path, manifest, columns="0,2-3")
    assert loaded[0].channels == 3
    np.testing.assert_allclose(loaded[0].samples, trials[0].samples[:, [0, 2, 3]], rtol=1e-9)


def test_load_trials_unlisted_file(tmp_path):
    trials = synth_generate(SynthSpec(min_length=130, max_length=130, repetitions=1, seed=1))
    manifest = write_corpus(trials, tmp_path)
    (tmp_path / "stray.txt").write_text("1 2 3 4 5 6\n")
    with pytest.raises(CorpusError, match="stray.txt"):
        load_trials(tmp_path, manifest)


def test_load_trials_width_mismatch(tmp_path):
    trials = synth_generate(SynthSpec(min_length=130, max_length=130, repetitions=1, seed=1))
    manifest = write_corpus(trials, tmp_path)
    (tmp_path / f"{trials[1].trial_id}.txt").write_text("1 2 3\n")
    with pytest.raises(CorpusError, match="columns"):
        load_trials(tmp_path, manifest)


def test_manifest_missing_column(tmp_path):
    (tmp_path / "m.csv").write_text("file,subject,skill\n")
    with pytest.raises(CorpusError, match="repetition"):
        load_trials(tmp_path, tmp_path / "m.csv")


def test_trial_rejects_unknown_label():
    with pytest.raises(CorpusError):
        KinematicTrial("x", "B", "master", "suturing", 1, np.zeros((5, 2)))


def test_trial_rejects_nan():
    with pytest.raises(CorpusError):
        KinematicTrial("x", "B", "novice", "suturing", 1, np.full((5, 2), np.nan))


# --- windows ---------------------------------------------------------------------


@pytest.mark.parametrize("length,count", [(300, 7), (120, 1), (149, 1), (150, 2)])
def test_window_counts(length, count):
    assert len(window(trial(length=length))) == count
    assert window_count(length) == count


def test_window_too_short():
    with pytest.raises(TrialTooShortError, match="119"):
        window(trial(length=119))


def test_window_contents_and_labels():
    frames = window(trial(length=180, skill="expert", task="knot-tying", tid="Knot_Tying_D001"))
    assert [f.window_index for f in frames] == [0, 1, 2]
    np.testing.assert_array_equal(frames[1].frame[:, 0], np.arange(30, 150))
    assert frames[2].labels == (2, 2)
    assert frames[0].frame.shape == (120, 2)


def test_window_trials_orders_by_id():
    ws = window_trials([trial(tid="b"), trial(tid="a")])
    assert [w.trial_id for w in ws] == ["a", "a", "b", "b"]


@invariant
@prop
@given(length=st.integers(1, 2000), size=st.integers(1, 200), step=st.integers(1, 60))
def test_window_count_formula(length, size, step):
    expected = 0 if length < size else (length - size) // step + 1
    assert window_count(length, size, step) == expected
    if expected:
        frames = window_array(np.zeros((length, 1)), size, step)
        assert frames.shape == (expected, size, 1)
        # every window lies inside the trial
        assert (expected - 1) * step + size <= length


# --- normalization ------------------------------------------------------------------


def test_znormalize_example():
    out = znormalize_array(np.array([[1.0], [2.0], [3.0]]))
    np.testing.assert_allclose(out[:, 0], [-1.2247, 0, 1.2247], atol=1e-4)


def test_znormalize_constant_channel():
    x = np.column_stack([np.full(5, 5.0), np.arange(5.0)])
    out = znormalize_array(x)
    assert np.all(out[:, 0] == 0)
    assert np.all(np.isfinite(out))


def test_znormalize_trial_keeps_metadata():
    t = trial()
    z = znormalize(t)
    assert (z.trial_id, z.skill, z.repetition) == (t.trial_id, t.skill, t.repetition)
    assert z.samples is not t.samples


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@invariant
@prop
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=2, max_side=40), elements=finite))
def test_znormalize_unit_variance_and_idempotent(x):
    z = znormalize_array(x)
    assert np.all(np.isfinite(z))
    live = x.std(axis=0) >= 1e-8
    # channels too close to constant for float64 to resolve are left out
    live &= np.ptp(x, axis=0) > 1e-6 * np.maximum(1.0, np.abs(x).max(axis=0))
    np.testing.assert_allclose(z[:, live].mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(z[:, live].std(axis=0), 1, atol=1e-6)
    np.testing.assert_allclose(znormalize_array(z)[:, live], z[:, live], atol=1e-6)


# --- folds ----------------------------------------------------------------------------


def test_loso_plan_shape(short_corpus):
    plan = build_loso_folds(short_corpus)
    assert len(plan) == 5
    for fold in plan:
        assert len(fold.test_ids) == 24
        assert len(fold.train_ids) == 96
        assert all(t.endswith(f"{fold.index:03d}") for t in fold.test_ids)


def test_loso_missing_repetition_shrinks_fold(short_corpus):
    dropped = [t for t in short_corpus if t.trial_id != "Suturing_B003"]
    plan = build_loso_folds(dropped)
    assert len(plan.folds[2].test_ids) == 23
    assert all(len(f.test_ids) == 24 for i, f in enumerate(plan) if i != 2)


def test_loso_rejects_bad_repetition():
    with pytest.raises(CorpusError):
        build_loso_folds([trial(rep=6)])


def _random_corpus(reps):
    return [
        trial(tid=f"T{i:03d}", subject=f"S{i % 4}", rep=r, length=1)
        for i, r in enumerate(reps)
    ]


@invariant
@prop
@given(st.lists(st.integers(1, 5), min_size=1, max_size=60))
def test_loso_partition_and_no_leakage(reps):
    trials = _random_corpus(reps)
    plan = build_loso_folds(trials)
    everything = {t.trial_id for t in trials}
    tested = []
    for fold in plan:
        assert not set(fold.test_ids) & set(fold.train_ids)
        assert set(fold.test_ids) | set(fold.train_ids) == everything
        tested += fold.test_ids
    # every trial is tested exactly once
    assert sorted(tested) == sorted(everything)


# --- train / validation split ------------------------------------------------------------


def test_n_validation_examples():
    assert n_validation(10) == 2
    assert n_validation(2) == 1
    assert n_validation(1) == 0
    assert n_validation(4) == 1


def test_split_ten_trials_of_one_stratum():
    groups = np.repeat([f"t{i}" for i in range(10)], 3)
    tr, va = split_groups(groups, [(0, 0)] * 30, 0.8, seed=0)
    assert len(set(groups[tr])) == 8
    assert len(set(groups[va])) == 2


def test_split_single_trial_stratum_warns():
    with pytest.warns(UserWarning, match="single group"):
        tr, va = split_groups(["a", "a", "b", "c"], [(0, 0), (0, 0), (1, 1), (1, 1)], 0.8)
    assert {0, 1} <= set(tr.tolist())
    assert len(va) == 1


def test_split_rejects_group_spanning_strata():
    with pytest.raises(ValueError):
        split_groups(["a", "a"], [(0, 0), (1, 0)])


def test_train_val_split_on_windows(short_corpus):
    ws = window_trials(short_corpus[:20])
    tr, va = train_val_split(ws, 0.8, seed=1)
    assert not {w.trial_id for w in tr} & {w.trial_id for w in va}
    assert len(tr) + len(va) == len(ws)


@invariant
@prop
@given(
    sizes=st.lists(st.integers(1, 12), min_size=1, max_size=6),
    per_group=st.integers(1, 4),
    seed=st.integers(0, 2**32 - 1),
)
def test_split_groups_never_leaks(sizes, per_group, seed):
    groups, strata = [], []
    for s, n in enumerate(sizes):
        for g in range(n):
            groups += [f"{s}-{g}"] * per_group
            strata += [(s, 0)] * per_group
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tr, va = split_groups(groups, strata, 0.8, seed)
    groups = np.asarray(groups)
    assert not set(groups[tr]) & set(groups[va])
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(len(groups)))
    for s, n in enumerate(sizes):
        n_val = len({g for g in groups[va] if g.startswith(f"{s}-")})
        assert n_val == n_validation(n)


# --- synthetic corpora --------------------------------------------------------------------


def test_synth_corpus_layout(short_corpus):
    assert len(short_corpus) == 120
    assert {t.subject_id for t in short_corpus} == set("BCDEFGHI")
    assert {t.repetition for t in short_corpus} == {1, 2, 3, 4, 5}
    assert all(150 <= t.length <= 270 and t.channels == 6 for t in short_corpus)


def test_synth_is_deterministic():
    spec = SynthSpec(min_length=130, max_length=200, repetitions=2, seed=5)
    a, b = synth_generate(spec), synth_generate(spec)
    assert all(x.samples.tobytes() == y.samples.tobytes() for x, y in zip(a, b))
    c = synth_generate(spec, seed=6)
    assert a[0].samples.tobytes() != c[0].samples.tobytes()


def test_synth_novices_are_rougher(short_corpus):
    def roughness(t):
        z = znormalize_array(t.samples)
        return float(np.mean(np.diff(z, n=2, axis=0) ** 2))

    by_skill = {}
    for t in short_corpus:
        by_skill.setdefault(t.skill, []).append(roughness(t))
    assert np.mean(by_skill["novice"]) > np.mean(by_skill["intermediate"]) > np.mean(by_skill["expert"])


def test_synth_spec_text_round_trip():
    spec = SynthSpec(channels=3, min_length=200, seed=9)
    again = SynthSpec.from_text(spec.to_text())
    assert again == spec


def test_synth_spec_rejects_unknown_key():
    with pytest.raises(ValueError, match="line 2"):
        SynthSpec.from_text("seed = 1\nbogus = 3\n")
