"""Small reverse-mode autodiff core over float64 numpy arrays.

Every primitive takes plain :class:`Tensor` inputs plus an optional
:class:`GradientTape`. When a tape is given the primitive appends a record
holding a vector-Jacobian closure; :func:`backward` replays the records in
reverse order. Passing ``tape=None`` runs the forward computation only,
which is what inference uses.

Batched layouts are used throughout: sequences are ``(N, T, C)`` and
feature vectors ``(N, F)``. Single-example inputs (``(T, C)`` or ``(F,)``)
are accepted by the primitives that document it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class TapeError(RuntimeError):
    """Raised on misuse of a gradient tape."""


class LayerMode(enum.Enum):
    TRAINING = "training"
    INFERENCE = "inference"


class Tensor:
    """A float64 array with identity, so the tape can key gradients on it."""

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim > 3:
            raise ShapeError(f"tensors have at most 3 axes, got shape {data.shape}")
        self.data = data
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradientTape:
    """Ordered log of the primitives evaluated during one forward pass."""

    records: list[_Record] = field(default_factory=list)
    params: dict[str, Tensor] = field(default_factory=dict)
    consumed: bool = False

    def watch(self, name: str, value) -> Tensor:
        """Register a named leaf; :func:`backward` returns a gradient for it."""
        if name in self.params:
            raise TapeError(f"parameter {name!r} is already watched")
        t = Tensor(value, name=name)
        self.params[name] = t
        return t

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that has been consumed by backward()")
        self.records.append(_Record(out, tuple(inputs), vjp))

    def __len__(self) -> int:
        return len(self.records)


def _record(tape: GradientTape | None, out: Tensor, inputs, vjp) -> Tensor:
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def backward(tape: GradientTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a gradient for every watched parameter, zeros for parameters the
    loss does not depend on. A tape can be consumed only once.
    """
    if tape.consumed:
        raise TapeError("backward() was already called on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    return {
        name: grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape)
        for name, t in tape.params.items()
    }


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a: Tensor, b: Tensor, tape: GradientTape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record(tape, Tensor(a.data + b.data), (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor, tape: GradientTape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _record(tape, Tensor(a.data * b.data), (a, b), lambda g: (g * b.data, g * a.data))


def total(a: Tensor, tape: GradientTape | None = None) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    return _record(
        tape, Tensor(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),)
    )


def relu(x: Tensor, tape: GradientTape | None = None) -> Tensor:
    mask = x.data > 0
    return _record(tape, Tensor(np.where(mask, x.data, 0.0)), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape: tuple[int, ...], tape: GradientTape | None = None) -> Tensor:
    src = x.shape
    return _record(tape, Tensor(x.data.reshape(shape)), (x,), lambda g: (g.reshape(src),))


def flatten(x: Tensor, tape: GradientTape | None = None) -> Tensor:
    """Collapse all axes after the first."""
    return reshape(x, (x.shape[0], -1), tape)


def last_step(seq: Tensor, tape: GradientTape | None = None) -> Tensor:
    """``seq[:, -1, :]`` for a ``(N, T, H)`` sequence."""
    if seq.ndim != 3:
        raise ShapeError(f"last_step expects (N, T, H), got {seq.shape}")

    def vjp(g):
        out = np.zeros_like(seq.data)
        out[:, -1, :] = g
        return (out,)

    return _record(tape, Tensor(seq.data[:, -1, :]), (seq,), vjp)


def concat(parts: Sequence[Tensor], tape: GradientTape | None = None) -> Tensor:
    """Concatenate ``(N, F_i)`` tensors along the feature axis."""
    n = {p.shape[0] for p in parts}
    if len(n) != 1 or any(p.ndim != 2 for p in parts):
        raise ShapeError(f"concat expects (N, F) parts with equal N, got {[p.shape for p in parts]}")
    cuts = np.cumsum([p.shape[1] for p in parts])[:-1]
    return _record(
        tape,
        Tensor(np.concatenate([p.data for p in parts], axis=1)),
        tuple(parts),
        lambda g: tuple(np.split(g, cuts, axis=1)),
    )


# ---------------------------------------------------------------------------
# layers


def _promote(x: Tensor, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x.data[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1} or {ndim} axes, got shape {x.shape}")
    return x.data, False


def conv1d(
    x: Tensor, kernels: Tensor, bias: Tensor, tape: GradientTape | None = None
) -> Tensor:
    """Valid, stride-1 temporal convolution.

    ``x`` is ``(N, T, Cin)`` or ``(T, Cin)``, ``kernels`` is ``(Cout, Cin, k)``
    and the result has ``T - k + 1`` time steps::

        out[n, t, o] = bias[o] + sum_{tau, i} x[n, t + tau, i] * kernels[o, i, tau]
    """
    xd, single = _promote(x, 3)
    if kernels.ndim != 3:
        raise ShapeError(f"conv1d kernels must be (Cout, Cin, k), got {kernels.shape}")
    cout, cin, k = kernels.shape
    n, t_in, c = xd.shape
    if c != cin:
        raise ShapeError(f"conv1d: input shape {x.shape} has {c} channels, kernels {kernels.shape} expect {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv1d: bias shape {bias.shape} does not match {cout} output channels")
    if k < 1 or t_in < k:
        raise ShapeError(f"conv1d: input length {t_in} shorter than kernel size {k}")
    t_out = t_in - k + 1
    # im2col: column block tau holds x[:, t + tau, :]
    cols = np.concatenate([xd[:, tau : tau + t_out, :] for tau in range(k)], axis=2)
    cols = cols.reshape(-1, k * cin)
    wmat = kernels.data.transpose(0, 2, 1).reshape(cout, k * cin)
    out = (cols @ wmat.T + bias.data).reshape(n, t_out, cout)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        dcols = (g2 @ wmat).reshape(n, t_out, k, cin)
        dx = np.zeros_like(xd)
        for tau in range(k):
            dx[:, tau : tau + t_out, :] += dcols[:, :, tau, :]
        dw = (g2.T @ cols).reshape(cout, k, cin).transpose(0, 2, 1)
        return (dx[0] if single else dx, dw, g2.sum(axis=0))

    return _record(tape, Tensor(out[0] if single else out), (x, kernels, bias), vjp)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: LayerMode,
    tape: GradientTape | None = None,
    *,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> tuple[Tensor, tuple[np.ndarray, np.ndarray]]:
    """Normalize the last axis using statistics pooled over all other axes.

    Returns the output and the (possibly updated) running statistics; the
    inputs are never mutated. Training mode uses population batch statistics
    and blends them into the running ones with ``momentum``.
    """
    f = x.shape[-1]
    if gamma.shape != (f,) or beta.shape != (f,):
        raise ShapeError(f"batchnorm: gamma/beta {gamma.shape}/{beta.shape} vs {f} features")
    flat = x.data.reshape(-1, f)
    m = flat.shape[0]

    if mode is LayerMode.INFERENCE:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (flat - running_mean) * inv
        out = (xhat * gamma.data + beta.data).reshape(x.shape)

        def vjp_inf(g):
            g = g.reshape(-1, f)
            return ((g * gamma.data * inv).reshape(x.shape), (g * xhat).sum(0), g.sum(0))

        return _record(tape, Tensor(out), (x, gamma, beta), vjp_inf), (running_mean, running_var)

    if m < 2:
        raise ShapeError("batchnorm in training mode needs at least 2 samples per feature")
    mu = flat.mean(axis=0)
    var = flat.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mu) * inv
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def vjp(g):
        g = g.reshape(-1, f)
        dxhat = g * gamma.data
        dx = inv / m * (m * dxhat - dxhat.sum(0) - xhat * (dxhat * xhat).sum(0))
        return (dx.reshape(x.shape), (g * xhat).sum(0), g.sum(0))

    stats = (
        momentum * running_mean + (1.0 - momentum) * mu,
        momentum * running_var + (1.0 - momentum) * var,
    )
    return _record(tape, Tensor(out), (x, gamma, beta), vjp), stats


def dropout(
    x: Tensor,
    rate: float,
    mode: LayerMode,
    rng: np.random.Generator | None,
    tape: GradientTape | None = None,
) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode is LayerMode.INFERENCE or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record(tape, Tensor(x.data * mask), (x,), lambda g: (g * mask,))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _check_gru(cin: int, W: Tensor, U: Tensor, b: Tensor) -> int:
    h = U.shape[0] if U.ndim == 2 else -1
    if W.shape != (cin, 3 * h) or U.shape != (h, 3 * h) or b.shape != (3 * h,):
        raise ShapeError(
            f"GRU weights W{W.shape} U{U.shape} b{b.shape} inconsistent with {cin} inputs"
        )
    return h


def _split_U(U: np.ndarray, hid: int):
    """Contiguous gate blocks of ``U`` and their transposes."""
    uzr = np.ascontiguousarray(U[:, : 2 * hid])
    uc = np.ascontiguousarray(U[:, 2 * hid :])
    return uzr, uc, np.ascontiguousarray(uzr.T), np.ascontiguousarray(uc.T)


def _gru_step(xw: np.ndarray, h: np.ndarray, U, hid: int):
    """One GRU step given the precomputed input projection ``x @ W + b``.

    Gate column blocks are ordered (update z, reset r, candidate).
    """
    zr = _sigmoid(xw[:, : 2 * hid] + h @ U[0])
    z, r = zr[:, :hid], zr[:, hid:]
    rh = r * h
    cand = np.tanh(xw[:, 2 * hid :] + rh @ U[1])
    h_new = cand + z * (h - cand)
    return h_new, (h, z, r, rh, cand)


def _gru_step_back(dh_new: np.ndarray, cache, U, hid: int):
    """Gradients of one step w.r.t. the pre-activations and ``h_prev``.

    The ``U`` gradient is ``h.T @ da[:, :2H]`` and ``rh.T @ da[:, 2H:]``; see
    :func:`_gru_dU`.
    """
    h, z, r, rh, cand = cache
    da = np.empty((h.shape[0], 3 * hid))
    da_c = da[:, 2 * hid :]
    np.multiply(dh_new * (1.0 - z), 1.0 - cand * cand, out=da_c)
    da[:, :hid] = dh_new * (h - cand) * z * (1.0 - z)
    d_rh = da_c @ U[3]
    da[:, hid : 2 * hid] = d_rh * h * r * (1.0 - r)
    dh = dh_new * z + d_rh * r + da[:, : 2 * hid] @ U[2]
    return da, dh


def _gru_dU(h: np.ndarray, rh: np.ndarray, da: np.ndarray, hid: int) -> np.ndarray:
    dU = np.empty((hid, 3 * hid))
    dU[:, : 2 * hid] = h.T @ da[:, : 2 * hid]
    dU[:, 2 * hid :] = rh.T @ da[:, 2 * hid :]
    return dU


def gru_cell(
    x: Tensor,
    h_prev: Tensor,
    W: Tensor,
    U: Tensor,
    b: Tensor,
    tape: GradientTape | None = None,
) -> Tensor:
    """Single GRU update.

    ``W`` is ``(Cin, 3H)``, ``U`` is ``(H, 3H)`` and ``b`` is ``(3H,)`` with
    column blocks (update, reset, candidate)::

        z  = sigmoid(x Wz + h Uz + bz)
        r  = sigmoid(x Wr + h Ur + br)
        hc = tanh(x Wh + (r * h) Uh + bh)
        h' = (1 - z) * hc + z * h

    ``x`` may be ``(Cin,)`` or ``(N, Cin)``; ``h_prev`` must match.
    """
    xd, single = _promote(x, 2)
    hd, _ = _promote(h_prev, 2)
    hid = _check_gru(xd.shape[1], W, U, b)
    if hd.shape != (xd.shape[0], hid):
        raise ShapeError(f"gru_cell: h_prev shape {h_prev.shape} vs hidden size {hid}")
    blocks = _split_U(U.data, hid)
    h_new, cache = _gru_step(xd @ W.data + b.data, hd, blocks, hid)

    def vjp(g):
        g = g[None] if single else g
        da, dh = _gru_step_back(g, cache, blocks, hid)
        dU = _gru_dU(cache[0], cache[3], da, hid)
        dx = da @ W.data.T
        dW = xd.T @ da
        if single:
            dx, dh = dx[0], dh[0]
        return (dx, dh, dW, dU, da.sum(0))

    return _record(tape, Tensor(h_new[0] if single else h_new), (x, h_prev, W, U, b), vjp)


def gru_layer(
    seq: Tensor,
    W: Tensor,
    U: Tensor,
    b: Tensor,
    h0: Tensor | None = None,
    tape: GradientTape | None = None,
) -> Tensor:
    """Run :func:`gru_cell` left to right and return every hidden state.

    Recorded as a single tape entry whose backward is a full
    back-propagation-through-time sweep.
    """
    xd, single = _promote(seq, 3)
    n, t_len, cin = xd.shape
    if t_len == 0:
        raise ShapeError("gru_layer: empty sequence")
    hid = _check_gru(cin, W, U, b)
    if h0 is None:
        h0 = Tensor(np.zeros(hid) if single else np.zeros((n, hid)))
    hd, _ = _promote(h0, 2)
    if hd.shape != (n, hid):
        raise ShapeError(f"gru_layer: h0 shape {h0.shape} vs ({n}, {hid})")

    blocks = _split_U(U.data, hid)
    xt = np.ascontiguousarray(xd.transpose(1, 0, 2))
    xw = (xt.reshape(-1, cin) @ W.data + b.data).reshape(t_len, n, 3 * hid)
    out = np.empty((n, t_len, hid))
    caches = []
    h = hd
    for t in range(t_len):
        h, cache = _gru_step(xw[t], h, blocks, hid)
        out[:, t] = h
        caches.append(cache)

    def vjp(g):
        g = g[None] if single else g
        da_all = np.empty((t_len, n, 3 * hid))
        dh = np.zeros((n, hid))
        for t in range(t_len - 1, -1, -1):
            da_all[t], dh = _gru_step_back(g[:, t] + dh, caches[t], blocks, hid)
        h_all = np.concatenate([c[0] for c in caches])
        rh_all = np.concatenate([c[3] for c in caches])
        da2 = da_all.reshape(-1, 3 * hid)
        dU = _gru_dU(h_all, rh_all, da2, hid)
        dx = (da2 @ W.data.T).reshape(t_len, n, cin).transpose(1, 0, 2)
        dW = xt.reshape(-1, cin).T @ da2
        if single:
            dx, dh = dx[0], dh[0]
        return (dx, dW, dU, da2.sum(0), dh)

    return _record(tape, Tensor(out[0] if single else out), (seq, W, U, b, h0), vjp)


def dense(x: Tensor, W: Tensor, b: Tensor, tape: GradientTape | None = None) -> Tensor:
    """Affine map ``x @ W.T + b`` with ``W`` shaped ``(K, F)``."""
    xd, single = _promote(x, 2)
    if W.ndim != 2 or W.shape[1] != xd.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense: input {x.shape}, W {W.shape}, b {b.shape}")
    out = xd @ W.data.T + b.data

    def vjp(g):
        g = g[None] if single else g
        dx = g @ W.data
        return (dx[0] if single else dx, g.T @ xd, g.sum(0))

    return _record(tape, Tensor(out[0] if single else out), (x, W, b), vjp)


def softmax(logits: Tensor, tape: GradientTape | None = None) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(tape, Tensor(p), (logits,), vjp)


def dense_softmax(x: Tensor, W: Tensor, b: Tensor, tape: GradientTape | None = None) -> Tensor:
    return softmax(dense(x, W, b, tape), tape)


def cross_entropy(probs: Tensor, labels, tape: GradientTape | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``probs`` ``(N, K)``."""
    labels = np.asarray(labels)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    rows = np.arange(n)
    picked = probs.data[rows, labels]
    loss = -np.log(picked).sum() / n

    def vjp(g):
        d = np.zeros_like(probs.data)
        d[rows, labels] = -g / (n * picked)
        return (d,)

    return _record(tape, Tensor(loss), (probs,), vjp)
