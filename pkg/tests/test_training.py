import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from satrdl.model import ModelConfig
from satrdl.training import (
    EpochRecord,
    OptimizerState,
    TrainLog,
    TrainSchedule,
    _batches,
    adam_step,
    plateau_update,
    train,
)

from oracles import adam_scalar

TINY = ModelConfig(channels=2, window=8, conv_filters=(2, 2), gru_units=(3, 2))


def tiny_data(n=12, seed=0):
    rng = np.random.default_rng(seed)
    y = np.stack([np.arange(n) % 3, (np.arange(n) // 3) % 3], axis=1)
    X = rng.normal(size=(n, 8, 2)) + y[:, :1, None] * 0.5
    return X, y


# --- Adam ------------------------------------------------------------------------


def test_first_adam_step_moves_by_lr():
    params = {"w": np.array([1.0, -2.0])}
    adam_step(params, {"w": np.array([0.3, -7.0])}, OptimizerState(lr=0.005))
    np.testing.assert_allclose(params["w"], [1.0 - 0.005, -2.0 + 0.005], rtol=1e-6)


def test_zero_gradient_leaves_params_unchanged():
    params = {"w": np.array([1.5])}
    state = OptimizerState(lr=0.005)
    adam_step(params, {"w": np.zeros(1)}, state)
    assert params["w"][0] == 1.5
    assert state.t == 1


def test_adam_matches_scalar_oracle():
    path = adam_scalar(lambda w: 2 * w, 1.0, steps=3)
    params = {"w": np.array([1.0])}
    state = OptimizerState(lr=0.005)
    for k in range(1, 4):
        adam_step(params, {"w": 2 * params["w"]}, state)
        assert params["w"][0] == pytest.approx(path[k], rel=1e-12)
    assert state.t == 3


def test_adam_state_shapes_mirror_params():
    params = {"a": np.zeros((2, 3)), "b": np.zeros(4)}
    state = OptimizerState(lr=0.01)
    adam_step(params, {"a": np.ones((2, 3)), "b": np.ones(4)}, state)
    assert state.m["a"].shape == (2, 3) and state.v["b"].shape == (4,)


def test_adam_requires_every_gradient():
    with pytest.raises(KeyError):
        adam_step({"a": np.zeros(1)}, {}, OptimizerState(lr=0.01))


# --- plateau schedule -------------------------------------------------------------------


def test_plateau_reduces_after_patience():
    assert plateau_update([1.0, 0.9, 0.95, 0.95, 0.95], 0.005) == pytest.approx(0.001)


def test_plateau_holds_while_improving():
    assert plateau_update([1.0, 0.9, 0.8], 0.005) == 0.005


def test_plateau_holds_inside_patience():
    assert plateau_update([1.0, 0.9, 0.95, 0.95], 0.005) == 0.005


def test_plateau_threshold():
    # an improvement smaller than the threshold does not count
    assert plateau_update([1.0, 1.0 - 1e-7, 1.0 - 2e-7, 1.0 - 3e-7], 0.005) == pytest.approx(0.001)


def test_plateau_respects_floor():
    assert plateau_update([1.0, 1.0, 1.0, 1.0], 2e-6) == 1e-6


def test_plateau_rejects_empty_history():
    with pytest.raises(ValueError):
        plateau_update([], 0.005)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0.0, 5.0), min_size=1, max_size=40))
def test_lr_never_increases_or_undershoots(losses):
    lr = 0.005
    for k in range(1, len(losses) + 1):
        new = plateau_update(losses[:k], lr)
        assert new <= lr
        assert new >= 1e-6
        lr = new


# --- schedule and batching ---------------------------------------------------------------


def test_schedule_defaults():
    s = TrainSchedule()
    assert (s.epochs, s.batch_size, s.learning_rate) == (80, 64, 0.005)
    assert (s.beta1, s.beta2, s.adam_eps) == (0.9, 0.999, 1e-8)
    assert (s.plateau_factor, s.plateau_patience, s.lr_floor) == (5.0, 3, 1e-6)


@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(plateau_factor=1.0), dict(plateau_patience=0), dict(learning_rate=0)])
def test_schedule_validation(kwargs):
    with pytest.raises(ValueError):
        TrainSchedule(**kwargs)


def test_batches_per_epoch_sets_batch_size():
    assert TrainSchedule(batches_per_epoch=600).effective_batch_size(38400) == 64
    assert TrainSchedule(batches_per_epoch=10).effective_batch_size(95) == 10
    assert TrainSchedule().effective_batch_size(1000) == 64


def test_trailing_singleton_batch_is_merged():
    sizes = [len(b) for b in _batches(np.arange(9), 4)]
    assert sizes == [4, 5]
    assert sorted(np.concatenate(_batches(np.arange(9), 4)).tolist()) == list(range(9))


# --- training loop ---------------------------------------------------------------------


def test_train_log_shape_and_determinism():
    X, y = tiny_data()
    sched = TrainSchedule(epochs=4, batch_size=4, seed=3)
    p1, log1 = train(TINY, sched, X, y, X[:4], y[:4])
    p2, log2 = train(TINY, sched, X, y, X[:4], y[:4])
    assert len(log1.records) == 4
    assert [r.batches for r in log1.records] == [3] * 4
    assert log1.to_jsonl() == log2.to_jsonl()
    assert p1 == p2


def test_train_returns_best_snapshot():
    X, y = tiny_data()
    seen = []
    params, log = train(
        TINY, TrainSchedule(epochs=5, batch_size=4, seed=1), X, y, X[:6], y[:6], callback=seen.append
    )
    accs = [r.combined_accuracy for r in log.records]
    assert log.best_epoch == int(np.argmax(accs)) + 1
    assert seen == log.records
    from satrdl.training import evaluate

    _, acc = evaluate(params, TINY, X[:6], y[:6])
    assert np.mean(list(acc.values())) == pytest.approx(max(accs))


def test_train_lr_in_log_never_increases():
    X, y = tiny_data()
    _, log = train(TINY, TrainSchedule(epochs=8, batch_size=4, learning_rate=0.05), X, y, X[:3], y[:3])
    lrs = [r.lr for r in log.records]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_train_rejects_tiny_inputs():
    X, y = tiny_data(3)
    with pytest.raises(ValueError):
        train(TINY, TrainSchedule(epochs=1), X[:1], y[:1], X, y)


def test_train_log_jsonl_round_trip():
    log = TrainLog([EpochRecord(1, 2.0, 1.9, {"skill": 0.5, "task": 0.25}, 0.005, 3)], best_epoch=1)
    text = log.to_jsonl()
    assert json.loads(text.splitlines()[-1]) == {"best_epoch": 1}
    assert TrainLog.from_jsonl(text) == log
