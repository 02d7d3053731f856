"""Trial ingestion, synthetic corpora, normalisation, windowing and folds.

Manifest format
---------------
A CSV file with a header row and one record per trial::

    file,subject,skill,task,repetition
    Suturing_B001.txt,B,novice,suturing,1

``file`` is resolved relative to the data root. Kinematics files are plain
text, one sample per line, whitespace separated floats, no header.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import SKILL_CLASSES, TASK_CLASSES

WINDOW = 120
STEP = 30
N_FOLDS = 5
MANIFEST_FIELDS = ("file", "subject", "skill", "task", "repetition")


class CorpusError(ValueError):
    """Inconsistent or malformed corpus."""


class KinematicsParseError(CorpusError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class TrialTooShortError(ValueError):
    pass


@dataclass
class KinematicTrial:
    trial_id: str
    subject_id: str
    skill: str
    task: str
    repetition: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise CorpusError(f"trial {self.trial_id}: samples must be a non-empty (L, C) matrix")
        if self.skill not in SKILL_CLASSES:
            raise CorpusError(f"trial {self.trial_id}: unknown skill label {self.skill!r}")
        if self.task not in TASK_CLASSES:
            raise CorpusError(f"trial {self.trial_id}: unknown task label {self.task!r}")
        if not np.all(np.isfinite(self.samples)):
            raise CorpusError(f"trial {self.trial_id}: non-finite sample values")

    @property
    def length(self) -> int:
        return self.samples.shape[0]

    @property
    def channels(self) -> int:
        return self.samples.shape[1]

    @property
    def labels(self) -> tuple[int, int]:
        return SKILL_CLASSES.index(self.skill), TASK_CLASSES.index(self.task)


@dataclass
class WindowedExample:
    trial_id: str
    window_index: int
    frame: np.ndarray
    skill: str
    task: str

    @property
    def labels(self) -> tuple[int, int]:
        return SKILL_CLASSES.index(self.skill), TASK_CLASSES.index(self.task)


# ---------------------------------------------------------------------------
# reading


def parse_columns(spec) -> list[int] | None:
    """Parse a column selection such as ``"0-2,6,9-11"`` (inclusive ranges)."""
    if spec is None or spec == "" or spec == "all":
        return None
    if not isinstance(spec, str):
        return [int(c) for c in spec]
    cols: list[int] = []
    for part in spec.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-")
            cols.extend(range(int(lo), int(hi) + 1))
        else:
            cols.append(int(part))
    return cols


def read_kinematics(path) -> np.ndarray:
    """Read one kinematics file into an ``(L, C)`` array."""
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            arr = np.loadtxt(path, dtype=np.float64, ndmin=2)
        if arr.size:
            return arr
    except ValueError:
        pass  # re-read line by line for a precise diagnostic
    rows: list[list[float]] = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise KinematicsParseError(path, lineno, f"expected {width} columns, found {len(tokens)}")
            try:
                rows.append([float(tok) for tok in tokens])
            except ValueError as exc:
                raise KinematicsParseError(path, lineno, f"non-numeric token ({exc})") from None
    if not rows:
        raise CorpusError(f"{path}: no samples")
    return np.array(rows, dtype=np.float64)


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise CorpusError(f"{path}: manifest lacks columns {sorted(missing)}")
        records = []
        for i, row in enumerate(reader, start=2):
            try:
                row["repetition"] = int(row["repetition"])
            except ValueError:
                raise CorpusError(f"{path}:{i}: repetition must be an integer") from None
            records.append(row)
    return records


def load_trials(root, manifest, columns=None) -> list[KinematicTrial]:
    """Load every trial listed in ``manifest`` (a path or list of records).

    ``columns`` optionally selects a subset of kinematic variables. Files in
    ``root`` that the manifest does not describe are an error.
    """
    root = Path(root)
    records = read_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    by_file = {r["file"]: r for r in records}
    cols = parse_columns(columns)

    on_disk = sorted(p.name for p in root.glob("*.txt"))
    unlisted = [name for name in on_disk if name not in by_file]
    if unlisted:
        raise CorpusError(f"no manifest entry for {unlisted[0]} (and {len(unlisted) - 1} more)")

    trials = []
    width = None
    for rec in sorted(records, key=lambda r: Path(r["file"]).stem):
        path = root / rec["file"]
        samples = read_kinematics(path)
        if width is None:
            width = samples.shape[1]
        elif samples.shape[1] != width:
            raise CorpusError(f"{path}: {samples.shape[1]} columns, corpus has {width}")
        if cols is not None:
            if max(cols) >= width:
                raise CorpusError(f"column {max(cols)} out of range for {width}-column files")
            samples = samples[:, cols]
        trials.append(
            KinematicTrial(
                trial_id=Path(rec["file"]).stem,
                subject_id=str(rec["subject"]),
                skill=rec["skill"],
                task=rec["task"],
                repetition=int(rec["repetition"]),
                samples=samples,
            )
        )
    return trials


def write_corpus(trials: Sequence[KinematicTrial], out_dir) -> Path:
    """Write kinematics files plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for tr in trials:
        np.savetxt(out / f"{tr.trial_id}.txt", tr.samples, fmt="%.10e")
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for tr in trials:
            w.writerow([f"{tr.trial_id}.txt", tr.subject_id, tr.skill, tr.task, tr.repetition])
    return manifest


# ---------------------------------------------------------------------------
# synthetic corpora

# subject letters and skill levels follow the public dataset's layout
DEFAULT_SUBJECTS = {
    "B": "novice",
    "C": "intermediate",
    "D": "expert",
    "E": "expert",
    "F": "intermediate",
    "G": "novice",
    "H": "novice",
    "I": "novice",
}
TASK_PREFIX = {"suturing": "Suturing", "needle-passing": "Needle_Passing", "knot-tying": "Knot_Tying"}


@dataclass
class SynthSpec:
    """Signal parameters for :func:`synth_generate`.

    Each task owns a base frequency band (Hz) from which per-channel carrier
    frequencies are drawn; each skill level owns a white jitter amplitude and
    a low-frequency tremor amplitude relative to unit carrier amplitude.
    """

    channels: int = 6
    repetitions: int = 5
    min_length: int = 600
    max_length: int = 3000
    sample_rate: float = 30.0
    subjects: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_SUBJECTS))
    task_bands: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {
            "suturing": (0.3, 0.6),
            "needle-passing": (1.2, 1.8),
            "knot-tying": (2.6, 3.6),
        }
    )
    skill_jitter: dict[str, float] = field(
        default_factory=lambda: {"novice": 0.3, "intermediate": 0.15, "expert": 0.02}
    )
    skill_tremor: dict[str, float] = field(
        default_factory=lambda: {"novice": 0.3, "intermediate": 0.15, "expert": 0.0}
    )
    seed: int = 0

    def validate(self) -> None:
        if not self.subjects or not self.task_bands:
            raise ValueError("synthetic spec needs at least one subject and one task")
        if self.channels < 1 or self.repetitions < 1:
            raise ValueError("channels and repetitions must be >= 1")
        if not 1 <= self.min_length <= self.max_length:
            raise ValueError(f"bad length range [{self.min_length}, {self.max_length}]")
        for skill in set(self.subjects.values()):
            if skill not in self.skill_jitter or skill not in self.skill_tremor:
                raise ValueError(f"no jitter/tremor parameters for skill {skill!r}")
        for task in self.task_bands:
            if task not in TASK_CLASSES:
                raise ValueError(f"unknown task {task!r}")

    # key-value file format: `key = value`, dotted keys for per-class maps
    def to_text(self) -> str:
        lines = [
            f"channels = {self.channels}",
            f"repetitions = {self.repetitions}",
            f"min_length = {self.min_length}",
            f"max_length = {self.max_length}",
            f"sample_rate = {self.sample_rate!r}",
            f"seed = {self.seed}",
        ]
        lines += [f"subject.{k} = {v}" for k, v in self.subjects.items()]
        lines += [f"task_band.{k} = {lo!r}, {hi!r}" for k, (lo, hi) in self.task_bands.items()]
        lines += [f"skill_jitter.{k} = {v!r}" for k, v in self.skill_jitter.items()]
        lines += [f"skill_tremor.{k} = {v!r}" for k, v in self.skill_tremor.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SynthSpec":
        kw: dict = {}
        maps: dict[str, dict] = defaultdict(dict)
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if "." in key:
                group, name = key.split(".", 1)
                if group == "subject":
                    maps["subjects"][name] = value
                elif group == "task_band":
                    lo, hi = (float(v) for v in value.split(","))
                    maps["task_bands"][name] = (lo, hi)
                elif group in ("skill_jitter", "skill_tremor"):
                    maps[group][name] = float(value)
                else:
                    raise ValueError(f"line {lineno}: unknown key {key!r}")
            elif key in ("channels", "repetitions", "min_length", "max_length", "seed"):
                kw[key] = int(value)
            elif key == "sample_rate":
                kw[key] = float(value)
            else:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
        spec = cls(**kw)
        for name, mapping in maps.items():
            # partial maps replace the defaults entirely
            setattr(spec, name, dict(mapping))
        spec.validate()
        return spec

    @classmethod
    def from_file(cls, path) -> "SynthSpec":
        return cls.from_text(Path(path).read_text())


def synth_generate(spec: SynthSpec | None = None, seed=None) -> list[KinematicTrial]:
    """Generate one trial per (subject, task, repetition).

    Carriers are sums of two sinusoids per channel at task-specific
    frequencies (perturbed per subject); skill adds white jitter and a slow
    tremor. Output is a deterministic function of the spec and seed.
    """
    spec = spec or SynthSpec()
    spec.validate()
    seed = spec.seed if seed is None else seed
    root = np.random.SeedSequence(seed)
    subjects = sorted(spec.subjects)
    tasks = [t for t in TASK_CLASSES if t in spec.task_bands]

    # per-(subject, task) carrier frequencies, fixed across repetitions
    carrier_rng = np.random.default_rng(root.spawn(1)[0])
    carriers = {}
    for task in tasks:
        lo, hi = spec.task_bands[task]
        base = carrier_rng.uniform(lo, hi, size=(spec.channels, 2))
        for subj in subjects:
            carriers[subj, task] = base * carrier_rng.uniform(0.95, 1.05, size=base.shape)

    trial_seeds = root.spawn(len(subjects) * len(tasks) * spec.repetitions)
    trials = []
    i = 0
    for subj in subjects:
        skill = spec.subjects[subj]
        for task in tasks:
            for rep in range(1, spec.repetitions + 1):
                rng = np.random.default_rng(trial_seeds[i])
                i += 1
                length = int(rng.integers(spec.min_length, spec.max_length + 1))
                t = np.arange(length)[:, None] / spec.sample_rate
                freqs = carriers[subj, task]
                phase = rng.uniform(0, 2 * np.pi, size=freqs.shape)
                amp = rng.uniform(0.7, 1.3, size=freqs.shape)
                x = (amp[:, 0] * np.sin(2 * np.pi * freqs[:, 0] * t + phase[:, 0])
                     + amp[:, 1] * np.sin(2 * np.pi * freqs[:, 1] * t + phase[:, 1]))
                tremor_f = rng.uniform(6.0, 9.0, size=spec.channels)
                x += spec.skill_tremor[skill] * np.sin(
                    2 * np.pi * tremor_f * t + rng.uniform(0, 2 * np.pi, size=spec.channels)
                )
                x += spec.skill_jitter[skill] * rng.standard_normal(x.shape)
                x += rng.normal(0.0, 2.0, size=spec.channels)  # per-trial offset
                trials.append(
                    KinematicTrial(
                        trial_id=f"{TASK_PREFIX[task]}_{subj}{rep:03d}",
                        subject_id=subj,
                        skill=skill,
                        task=task,
                        repetition=rep,
                        samples=x,
                    )
                )
    return sorted(trials, key=lambda tr: tr.trial_id)


# ---------------------------------------------------------------------------
# preprocessing


def znormalize_array(samples: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Per-channel z-score with population std; near-constant channels become 0."""
    x = np.asarray(samples, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    flat = std < tol
    out = (x - mean) / np.where(flat, 1.0, std)
    out[:, flat] = 0.0
    return out


def znormalize(trial: KinematicTrial) -> KinematicTrial:
    return KinematicTrial(
        trial.trial_id, trial.subject_id, trial.skill, trial.task, trial.repetition,
        znormalize_array(trial.samples),
    )


def window_count(length: int, size: int = WINDOW, step: int = STEP) -> int:
    return 0 if length < size else (length - size) // step + 1


def window_array(samples: np.ndarray, size: int = WINDOW, step: int = STEP) -> np.ndarray:
    """Stack sliding windows of ``samples`` into ``(n, size, C)``."""
    n = window_count(samples.shape[0], size, step)
    if n == 0:
        raise TrialTooShortError(f"{samples.shape[0]} samples is shorter than one {size}-sample window")
    view = np.lib.stride_tricks.sliding_window_view(samples, size, axis=0)[::step]
    return np.ascontiguousarray(view.transpose(0, 2, 1))


def window(trial: KinematicTrial, size: int = WINDOW, step: int = STEP) -> list[WindowedExample]:
    if trial.length < size:
        raise TrialTooShortError(
            f"trial {trial.trial_id} has {trial.length} samples, needs at least {size}"
        )
    frames = window_array(trial.samples, size, step)
    return [
        WindowedExample(trial.trial_id, i, frame, trial.skill, trial.task)
        for i, frame in enumerate(frames)
    ]


def window_trials(trials: Iterable[KinematicTrial], size: int = WINDOW, step: int = STEP) -> list[WindowedExample]:
    out: list[WindowedExample] = []
    for tr in sorted(trials, key=lambda t: t.trial_id):
        out.extend(window(tr, size, step))
    return out


def stack_windows(windows: Sequence[WindowedExample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(X, y, groups)`` arrays for the estimator API."""
    X = np.stack([w.frame for w in windows])
    y = np.array([w.labels for w in windows], dtype=np.int64)
    groups = np.array([w.trial_id for w in windows])
    return X, y, groups


# ---------------------------------------------------------------------------
# folds and splits


@dataclass
class Fold:
    index: int
    test_ids: list[str]
    train_ids: list[str]


@dataclass
class FoldPlan:
    folds: list[Fold]

    def __iter__(self):
        return iter(self.folds)

    def __len__(self) -> int:
        return len(self.folds)


def build_loso_folds(trials: Sequence[KinematicTrial], n_folds: int = N_FOLDS) -> FoldPlan:
    """Leave-one-supertrial-out: fold *i* tests on every repetition-*i* trial."""
    for tr in trials:
        if not 1 <= tr.repetition <= n_folds:
            raise CorpusError(f"trial {tr.trial_id}: repetition {tr.repetition} outside 1..{n_folds}")
    ids = sorted(tr.trial_id for tr in trials)
    if len(set(ids)) != len(ids):
        raise CorpusError("duplicate trial ids")
    rep = {tr.trial_id: tr.repetition for tr in trials}
    return FoldPlan([
        Fold(i, [t for t in ids if rep[t] == i], [t for t in ids if rep[t] != i])
        for i in range(1, n_folds + 1)
    ])


def n_validation(n: int, fraction: float = 0.2) -> int:
    """Validation trial count for a stratum of ``n`` trials."""
    if n < 2:
        return 0
    return min(n - 1, max(1, math.floor(n * fraction + 0.5)))


def split_groups(groups, strata, train_fraction: float = 0.8, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified, grouped split of sample indices.

    ``groups`` and ``strata`` are per-sample keys. All samples of a group land
    on the same side; each stratum sends about ``1 - train_fraction`` of its
    groups to validation (at least one when it has two or more).
    """
    groups = np.asarray(groups)
    strata = [tuple(np.asarray(s).tolist()) if np.ndim(s) else s for s in strata]
    group_stratum: dict = {}
    for g, s in zip(groups.tolist(), strata):
        if group_stratum.setdefault(g, s) != s:
            raise ValueError(f"group {g!r} spans more than one stratum")
    by_stratum: dict = defaultdict(list)
    for g in sorted(group_stratum):
        by_stratum[group_stratum[g]].append(g)

    rng = np.random.default_rng(seed)
    val_groups = set()
    for s in sorted(by_stratum, key=repr):
        members = by_stratum[s]
        k = n_validation(len(members), 1.0 - train_fraction)
        if k == 0:
            warnings.warn(f"stratum {s!r} has a single group; it stays in training", stacklevel=2)
            continue
        picked = rng.permutation(len(members))[:k]
        val_groups.update(members[i] for i in picked)
    is_val = np.array([g in val_groups for g in groups.tolist()], dtype=bool)
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


def train_val_split(
    windows: Sequence[WindowedExample], fraction: float = 0.8, seed=0
) -> tuple[list[WindowedExample], list[WindowedExample]]:
    """Trial-grouped split stratified by (skill, task)."""
    tr_idx, va_idx = split_groups(
        [w.trial_id for w in windows], [(w.skill, w.task) for w in windows], fraction, seed
    )
    return [windows[i] for i in tr_idx], [windows[i] for i in va_idx]
