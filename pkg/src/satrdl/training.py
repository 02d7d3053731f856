"""Adam optimisation of the joint loss with plateau learning-rate decay."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndcore as nd
from .model import ModelConfig, SatrParams, forward, init_params, joint_loss
from .ndcore import LayerMode

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSchedule:
    """Optimiser and epoch-loop settings.

    ``batch_size`` and ``batches_per_epoch`` cover the two readings of a
    "600 mini-batches" budget: when ``batches_per_epoch`` is set it wins and
    the batch size becomes ``ceil(n_train / batches_per_epoch)``.
    """

    epochs: int = 80
    batch_size: int = 64
    batches_per_epoch: int | None = None
    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 5.0
    plateau_patience: int = 3
    plateau_threshold: float = 1e-6
    lr_floor: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ValueError("batches_per_epoch must be >= 1")
        if min(self.learning_rate, self.adam_eps, self.lr_floor) <= 0:
            raise ValueError("rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.plateau_factor <= 1 or self.plateau_patience < 1:
            raise ValueError("plateau factor must exceed 1 and patience be >= 1")

    def effective_batch_size(self, n_train: int) -> int:
        if self.batches_per_epoch is None:
            return self.batch_size
        return max(2, math.ceil(n_train / self.batches_per_epoch))


@dataclass
class OptimizerState:
    lr: float
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update, applied in place to ``params``."""
    missing = params.keys() - grads.keys()
    if missing:
        raise KeyError(f"no gradient for parameters {sorted(missing)}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def plateau_update(
    history,
    lr: float,
    patience: int = 3,
    factor: float = 5.0,
    floor: float = 1e-6,
    threshold: float = 1e-6,
) -> float:
    """Learning rate after the latest epoch of validation-loss ``history``.

    The rate is divided by ``factor`` each time ``patience`` consecutive
    epochs pass without beating the best loss by more than ``threshold``;
    the wait counter restarts after every reduction.
    """
    if not history:
        raise ValueError("empty validation-loss history")
    best = history[0]
    since_best = 0
    for loss in history[1:]:
        if loss < best - threshold:
            best = loss
            since_best = 0
        else:
            since_best += 1
    if since_best and since_best % patience == 0:
        return max(lr / factor, floor)
    return lr


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: dict[str, float]
    lr: float
    batches: int

    @property
    def combined_accuracy(self) -> float:
        return float(np.mean(list(self.val_accuracy.values())))


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def to_jsonl(self) -> str:
        lines = [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        lines.append(json.dumps({"best_epoch": self.best_epoch}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainLog":
        log_ = cls()
        for line in text.splitlines():
            rec = json.loads(line)
            if "best_epoch" in rec:
                log_.best_epoch = rec["best_epoch"]
            else:
                log_.records.append(EpochRecord(**rec))
        return log_


def evaluate(params: SatrParams, config: ModelConfig, X, y, batch_size: int = 256):
    """Inference-mode joint loss and per-head accuracy over ``(X, y)``."""
    n = len(X)
    loss_sum = 0.0
    hits = np.zeros(len(config.heads))
    for start in range(0, n, batch_size):
        xb, yb = X[start : start + batch_size], y[start : start + batch_size]
        fp = forward(params, config, xb, LayerMode.INFERENCE)
        loss_sum += float(joint_loss(fp.probs, yb).data) * len(xb)
        for j, name in enumerate(config.head_names):
            hits[j] += np.sum(np.argmax(fp.probs[name].data, axis=1) == yb[:, j])
    acc = {name: float(hits[j] / n) for j, name in enumerate(config.head_names)}
    return loss_sum / n, acc


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [order[i : i + size] for i in range(0, len(order), size)]
    # batch norm needs >= 2 samples: fold a trailing singleton into its neighbour
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def train(
    config: ModelConfig,
    schedule: TrainSchedule,
    X_train,
    y_train,
    X_val,
    y_val,
    params: SatrParams | None = None,
    callback=None,
) -> tuple[SatrParams, TrainLog]:
    """Fit ``config`` on windows ``X_train`` (N, T, C) with labels (N, heads).

    Returns the snapshot with the best mean validation accuracy (earliest
    epoch on ties) together with the per-epoch log. ``callback`` is called
    with each :class:`EpochRecord`.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    y_val = np.asarray(y_val, dtype=np.int64)
    n = len(X_train)
    if n < 2 or len(X_val) < 1:
        raise ValueError(f"need >= 2 training and >= 1 validation windows, got {n} and {len(X_val)}")

    seeds = np.random.SeedSequence(schedule.seed).spawn(3)
    if params is None:
        params = init_params(config, seeds[0])
    else:
        params = params.copy()
    shuffle_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])

    state = OptimizerState(lr=schedule.learning_rate)
    batch_size = schedule.effective_batch_size(n)
    log_ = TrainLog()
    val_losses: list[float] = []
    best = params.copy()
    best_acc = -1.0

    for epoch in range(1, schedule.epochs + 1):
        order = shuffle_rng.permutation(n)
        batches = _batches(order, batch_size)
        loss_sum = 0.0
        for b, idx in enumerate(batches, start=1):
            fp = forward(params, config, X_train[idx], LayerMode.TRAINING, dropout_rng)
            loss = joint_loss(fp.probs, y_train[idx], fp.tape)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = nd.backward(fp.tape, loss)
            adam_step(params.weights, grads, state, schedule.beta1, schedule.beta2, schedule.adam_eps)
            params.buffers.update(fp.running_stats)
            loss_sum += value * len(idx)

        val_loss, val_acc = evaluate(params, config, X_val, y_val)
        rec = EpochRecord(epoch, loss_sum / n, val_loss, val_acc, state.lr, len(batches))
        log_.records.append(rec)
        if rec.combined_accuracy > best_acc:
            best_acc = rec.combined_accuracy
            best = params.copy()
            log_.best_epoch = epoch
        log.debug("epoch %d loss %.4f val %.4f acc %s lr %g", epoch, rec.train_loss, val_loss, val_acc, state.lr)
        if callback is not None:
            callback(rec)

        val_losses.append(val_loss)
        state.lr = plateau_update(
            val_losses,
            state.lr,
            schedule.plateau_patience,
            schedule.plateau_factor,
            schedule.lr_floor,
            schedule.plateau_threshold,
        )
    return best, log_
