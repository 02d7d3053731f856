"""Parallel convolutional / recurrent network with two softmax heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .ndcore import GradientTape, LayerMode, ShapeError, Tensor

SKILL_CLASSES = ("novice", "intermediate", "expert")
TASK_CLASSES = ("suturing", "needle-passing", "knot-tying")
DEFAULT_CLASSES = {"skill": SKILL_CLASSES, "task": TASK_CLASSES}

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Network topology. Defaults reproduce the published architecture."""

    channels: int
    window: int = 120
    conv_filters: tuple[int, ...] = (32, 64)
    kernel_size: int = 2
    conv_dropout: float = 0.2
    gru_units: tuple[int, ...] = (128, 64)
    gru_dropout: float = 0.2
    merge_dropout: float = 0.5
    heads: tuple[tuple[str, int], ...] = (("skill", 3), ("task", 3))
    bn_eps: float = nd.BN_EPS
    bn_momentum: float = nd.BN_MOMENTUM

    def __post_init__(self):
        # normalise list inputs (e.g. from JSON) to tuples so the config stays hashable
        object.__setattr__(self, "conv_filters", tuple(int(v) for v in self.conv_filters))
        object.__setattr__(self, "gru_units", tuple(int(v) for v in self.gru_units))
        object.__setattr__(self, "heads", tuple((str(n), int(k)) for n, k in self.heads))
        counts = [self.channels, self.window, self.kernel_size, *self.conv_filters, *self.gru_units]
        if min(counts) < 1 or not self.conv_filters or not self.gru_units:
            raise ValueError(f"all layer counts must be >= 1: {self}")
        if not self.heads or min(k for _, k in self.heads) < 1:
            raise ValueError("need at least one head with >= 1 class")
        for rate in (self.conv_dropout, self.gru_dropout, self.merge_dropout):
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout rates must lie in [0, 1), got {rate}")
        if self.conv_length < 1:
            raise ValueError(
                f"window {self.window} too short for {len(self.conv_filters)} conv blocks "
                f"with kernel size {self.kernel_size}"
            )

    @property
    def conv_length(self) -> int:
        return self.window - len(self.conv_filters) * (self.kernel_size - 1)

    @property
    def merged_features(self) -> int:
        return self.conv_length * self.conv_filters[-1] + self.gru_units[-1]

    @property
    def head_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.heads)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class SatrParams:
    """Learnable tensors plus batch-norm running statistics.

    ``weights`` is what the optimizer updates; ``buffers`` hold the running
    mean/variance of each batch-norm layer.
    """

    weights: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "SatrParams":
        return SatrParams(
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, SatrParams):
            return NotImplemented
        return _same_arrays(self.weights, other.weights) and _same_arrays(self.buffers, other.buffers)

    def n_weights(self) -> int:
        return sum(v.size for v in self.weights.values())


def _same_arrays(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(
        a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a
    )


@dataclass
class DualPrediction:
    skill: np.ndarray
    task: np.ndarray


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(config: ModelConfig, seed=0) -> SatrParams:
    """Xavier-uniform weights, zero biases, identity batch-norm.

    Convolution kernels use ``fan = channels * kernel_size``; each GRU gate
    block is drawn with its own ``(inputs, hidden)`` fan.
    """
    rng = np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}
    buf: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in, fan_out):
        lim = glorot_limit(fan_in, fan_out)
        return rng.uniform(-lim, lim, size=shape)

    def bn(prefix, f):
        w[f"{prefix}.gamma"] = np.ones(f)
        w[f"{prefix}.beta"] = np.zeros(f)
        buf[f"{prefix}.running_mean"] = np.zeros(f)
        buf[f"{prefix}.running_var"] = np.ones(f)

    k = config.kernel_size
    cin = config.channels
    for i, cout in enumerate(config.conv_filters):
        w[f"conv{i}.kernel"] = uniform((cout, cin, k), cin * k, cout * k)
        w[f"conv{i}.bias"] = np.zeros(cout)
        bn(f"conv{i}.bn", cout)
        cin = cout

    cin = config.channels
    for i, hid in enumerate(config.gru_units):
        w[f"gru{i}.W"] = np.concatenate([uniform((cin, hid), cin, hid) for _ in range(3)], axis=1)
        w[f"gru{i}.U"] = np.concatenate([uniform((hid, hid), hid, hid) for _ in range(3)], axis=1)
        w[f"gru{i}.b"] = np.zeros(3 * hid)
        cin = hid

    f = config.merged_features
    bn("merge.bn", f)
    for name, n_cls in config.heads:
        w[f"head.{name}.W"] = uniform((n_cls, f), f, n_cls)
        w[f"head.{name}.b"] = np.zeros(n_cls)
    return SatrParams(w, buf)


@dataclass
class ForwardPass:
    """Result of :func:`forward`.

    ``probs`` maps head name to an ``(N, K)`` posterior tensor living on
    ``tape`` (when one was recorded); ``running_stats`` holds the batch-norm
    statistics the caller should commit after a training step.
    """

    probs: dict[str, Tensor]
    tape: GradientTape | None
    running_stats: dict[str, np.ndarray]
    merged: Tensor

    def posteriors(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.probs.items()}

    def predictions(self) -> list[DualPrediction]:
        skill, task = self.probs["skill"].data, self.probs["task"].data
        return [DualPrediction(s, t) for s, t in zip(skill, task)]


def forward(
    params: SatrParams,
    config: ModelConfig,
    batch,
    mode: LayerMode = LayerMode.INFERENCE,
    rng: np.random.Generator | None = None,
    *,
    record: bool | None = None,
) -> ForwardPass:
    """Run the network on ``batch`` of shape ``(N, T, C)``.

    A tape is recorded by default in training mode only; pass ``record`` to
    override.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (config.window, config.channels):
        raise ShapeError(
            f"batch shape {x.shape} does not match (N, {config.window}, {config.channels})"
        )
    if mode is LayerMode.TRAINING and x.shape[0] < 2:
        raise ShapeError("training-mode forward needs a batch of at least 2 windows")
    if record is None:
        record = mode is LayerMode.TRAINING
    tape = GradientTape() if record else None

    if tape is not None:
        p = {name: tape.watch(name, value) for name, value in params.weights.items()}
    else:
        p = {name: Tensor(value, name) for name, value in params.weights.items()}
    stats: dict[str, np.ndarray] = {}

    def bn(h, prefix):
        out, (mean, var) = nd.batchnorm(
            h,
            p[f"{prefix}.gamma"],
            p[f"{prefix}.beta"],
            params.buffers[f"{prefix}.running_mean"],
            params.buffers[f"{prefix}.running_var"],
            mode,
            tape,
            eps=config.bn_eps,
            momentum=config.bn_momentum,
        )
        stats[f"{prefix}.running_mean"] = mean
        stats[f"{prefix}.running_var"] = var
        return out

    inp = Tensor(x)

    h = inp
    for i in range(len(config.conv_filters)):
        h = nd.conv1d(h, p[f"conv{i}.kernel"], p[f"conv{i}.bias"], tape)
        h = bn(h, f"conv{i}.bn")
        h = nd.relu(h, tape)
        h = nd.dropout(h, config.conv_dropout, mode, rng, tape)
    conv_features = nd.flatten(h, tape)

    s = inp
    for i in range(len(config.gru_units)):
        s = nd.gru_layer(s, p[f"gru{i}.W"], p[f"gru{i}.U"], p[f"gru{i}.b"], tape=tape)
        s = nd.dropout(s, config.gru_dropout, mode, rng, tape)
    gru_features = nd.last_step(s, tape)

    merged = nd.concat([conv_features, gru_features], tape)
    z = bn(merged, "merge.bn")
    z = nd.relu(z, tape)
    z = nd.dropout(z, config.merge_dropout, mode, rng, tape)

    probs = {
        name: nd.dense_softmax(z, p[f"head.{name}.W"], p[f"head.{name}.b"], tape)
        for name in config.head_names
    }
    return ForwardPass(probs, tape, stats, merged)


def joint_loss(probs, labels, tape: GradientTape | None = None) -> Tensor:
    """Summed-over-heads, batch-averaged cross-entropy.

    ``probs`` is a sequence (or dict, in head order) of ``(N, K)`` posterior
    tensors and ``labels`` an ``(N, n_heads)`` integer array of 0-based class
    indices.
    """
    if isinstance(probs, dict):
        probs = list(probs.values())
    probs = [nd.as_tensor(p) for p in probs]
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[None]
    if labels.shape != (probs[0].shape[0], len(probs)):
        raise ShapeError(f"labels shape {labels.shape} vs {len(probs)} heads of {probs[0].shape[0]} rows")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be integer class indices")
    total = None
    for j, pj in enumerate(probs):
        ce = nd.cross_entropy(pj, labels[:, j], tape)
        total = ce if total is None else nd.add(total, ce, tape)
    return total


def predict_interval(params: SatrParams, config: ModelConfig, window) -> tuple[int, int, DualPrediction]:
    """Classify one ``(T, C)`` window; ties resolve to the lowest class index."""
    fp = forward(params, config, np.asarray(window)[None], LayerMode.INFERENCE)
    pred = fp.predictions()[0]
    return int(np.argmax(pred.skill)), int(np.argmax(pred.task)), pred


def save_checkpoint(path, params: SatrParams, config: ModelConfig, classes=None) -> Path:
    """Write a versioned ``.npz`` container; reading it back is bit-exact."""
    path = Path(path)
    classes = {k: list(v) for k, v in (classes or DEFAULT_CLASSES).items()}
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "classes": classes,
        "weights": {k: list(v.shape) for k, v in params.weights.items()},
        "buffers": {k: list(v.shape) for k, v in params.buffers.items()},
    }
    arrays = {f"w/{k}": v for k, v in params.weights.items()}
    arrays.update({f"b/{k}": v for k, v in params.buffers.items()})
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path) -> tuple[SatrParams, ModelConfig, dict[str, tuple[str, ...]]]:
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r} in {path}")
        weights = {k: npz[f"w/{k}"] for k in meta["weights"]}
        buffers = {k: npz[f"b/{k}"] for k in meta["buffers"]}
    for kind, table, arrays in (("weight", meta["weights"], weights), ("buffer", meta["buffers"], buffers)):
        for k, shape in table.items():
            if list(arrays[k].shape) != shape:
                raise ValueError(f"{kind} {k!r} has shape {arrays[k].shape}, header says {shape}")
    config = ModelConfig.from_dict(meta["config"])
    classes = {k: tuple(v) for k, v in meta["classes"].items()}
    return SatrParams(weights, buffers), config, classes
