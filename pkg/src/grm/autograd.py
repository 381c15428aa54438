"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything the alignment head computes is built from the ops here. Ops
record a backward closure onto the active Tape (see `Tape`); `backward`
replays the tape in reverse execution order, which is a reverse topological
order because every op's inputs exist before its output.

Design notes:
  - float64 everywhere; desk-scale tensors make precision cheap and keep
    finite-difference checks meaningful.
  - max-reductions route gradient to the argmax entry, first index on ties.
  - Gumbel noise is -log(-log(u)) with u clamped to [1e-12, 1 - 1e-12].
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import (
    ContractError,
    DegenerateSliceError,
    DeterminismError,
    DomainError,
    ParameterError,
    ShapeError,
)

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the free functions do the real work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of ops; context manager activates it for recording."""

    def __init__(self):
        self._records = []

    def record(self, out: Tensor, backward_fn):
        self._records.append((out, backward_fn))

    def __len__(self):
        return len(self._records)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


_TAPE_STACK: list[Tape] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def from_op(data, inputs, backward_fn) -> Tensor:
    """Create an op output, recording backward_fn(g) if a tape is active.

    backward_fn receives the upstream gradient and must call `accumulate`
    (exported below) on whichever inputs require grad. This is the extension
    point for fused ops defined outside this module.
    """
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(out, backward_fn)
    return out


accumulate = _accumulate


def _unbroadcast(target_shape, g):
    """Sum gradient g down to target_shape (inverse of numpy broadcasting)."""
    while g.ndim > len(target_shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(target_shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting semantics)
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        _accumulate(a, _unbroadcast(a.shape, g))
        _accumulate(b, _unbroadcast(b.shape, g))

    return from_op(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        _accumulate(a, _unbroadcast(a.shape, g))
        _accumulate(b, _unbroadcast(b.shape, -g))

    return from_op(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        _accumulate(a, _unbroadcast(a.shape, g * b.data))
        _accumulate(b, _unbroadcast(b.shape, g * a.data))

    return from_op(a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        _accumulate(a, _unbroadcast(a.shape, g / b.data))
        _accumulate(b, _unbroadcast(b.shape, -g * a.data / (b.data * b.data)))

    return from_op(a.data / b.data, (a, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product with the textbook gradient rules."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (m,k) @ (k,n); got {a.shape} @ {b.shape}")

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return from_op(a.data @ b.data, (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product (..., m, k) @ (..., k, n); batch dims must match."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm shapes incompatible: {a.shape} @ {b.shape}")

    def bwd(g):
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return from_op(a.data @ b.data, (a, b), bwd)


def transpose_last2(x: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(x, np.swapaxes(g, -1, -2))

    return from_op(np.swapaxes(x.data, -1, -2), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        _accumulate(x, g.reshape(x.shape))

    return from_op(x.data.reshape(shape), (x,), bwd)


def column(x: Tensor, j: int) -> Tensor:
    """Select index j along the last axis."""

    def bwd(g):
        z = np.zeros_like(x.data)
        z[..., j] = g
        _accumulate(x, z)

    return from_op(np.ascontiguousarray(x.data[..., j]), (x,), bwd)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    pass_through = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        _accumulate(x, g * pass_through)

    return from_op(np.clip(x.data, lo, hi), (x,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(kind: str, x: Tensor) -> Tensor:
    """Elementwise nonlinearity with its exact analytic backward rule.

    kinds: gelu (erf form), sigmoid, exp, log, square. log requires strictly
    positive inputs.
    """
    x = _as_tensor(x)
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
        out = x.data * cdf
        local = cdf + x.data * np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
    elif kind == "sigmoid":
        out = _sigmoid(x.data)
        local = out * (1.0 - out)
    elif kind == "exp":
        out = np.exp(x.data)
        local = out
    elif kind == "log":
        if np.any(x.data <= 0.0):
            raise DomainError("log requires strictly positive inputs")
        out = np.log(x.data)
        local = 1.0 / x.data
    elif kind == "square":
        out = x.data * x.data
        local = 2.0 * x.data
    else:
        raise ParameterError(f"unknown activation kind: {kind!r}")

    def bwd(g):
        _accumulate(x, g * local)

    return from_op(out, (x,), bwd)


def xlogx(x: Tensor) -> Tensor:
    """x * log(x) with the limit value 0 at x == 0; domain x >= 0."""
    if np.any(x.data < 0.0):
        raise DomainError("xlogx requires non-negative inputs")
    positive = x.data > 0.0
    safe = np.where(positive, x.data, 1.0)
    logx = np.log(safe)

    def bwd(g):
        _accumulate(x, g * np.where(positive, logx + 1.0, 0.0))

    return from_op(np.where(positive, x.data * logx, 0.0), (x,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def reduce(kind: str, x: Tensor, axis=None, mask=None):
    """Masked reduction; returns (Tensor, argmax indices or None).

    mask (boolean, broadcastable to x) keeps True entries. max returns the
    argmax indices along the axis for heatmap export and requires an axis;
    mean divides by the unmasked count. A slice with no valid entries raises
    DegenerateSliceError.
    """
    x = _as_tensor(x)
    if kind not in ("max", "mean", "sum"):
        raise ParameterError(f"unknown reduction kind: {kind!r}")
    if axis is not None and not (-x.data.ndim <= axis < x.data.ndim):
        raise ParameterError(f"axis {axis} invalid for shape {x.shape}")
    m = None if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)

    if kind == "max":
        if axis is None:
            raise ParameterError("max reduction requires an explicit axis")
        masked = x.data if m is None else np.where(m, x.data, -np.inf)
        if m is not None and np.any(~m.any(axis=axis)):
            raise DegenerateSliceError(f"fully-masked slice in max over axis {axis}")
        idx = np.argmax(masked, axis=axis)
        out = np.take_along_axis(masked, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

        def bwd_max(g):
            z = np.zeros_like(x.data)
            np.put_along_axis(z, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
            _accumulate(x, z)

        return from_op(out, (x,), bwd_max), idx

    kept = x.data if m is None else np.where(m, x.data, 0.0)
    total = np.sum(kept, axis=axis)
    if kind == "sum":

        def bwd_sum(g):
            ge = g if axis is None else np.expand_dims(g, axis)
            gg = np.broadcast_to(ge, x.data.shape)
            _accumulate(x, gg * m if m is not None else gg.copy())

        return from_op(total, (x,), bwd_sum), None

    # mean
    if m is None:
        count = float(x.data.size) if axis is None else float(x.data.shape[axis])
    else:
        count = np.sum(m, axis=axis, dtype=np.float64)
        if np.any(count == 0):
            raise DegenerateSliceError(f"fully-masked slice in mean over axis {axis}")
    out = total / count

    def bwd_mean(g):
        scaled = g / count
        ge = scaled if axis is None else np.expand_dims(scaled, axis)
        gg = np.broadcast_to(ge, x.data.shape)
        _accumulate(x, gg * m if m is not None else gg.copy())

    return from_op(out, (x,), bwd_mean), None


def reduce_sum(x: Tensor, axis=None, mask=None) -> Tensor:
    return reduce("sum", x, axis=axis, mask=mask)[0]


def reduce_mean(x: Tensor, axis=None, mask=None) -> Tensor:
    return reduce("mean", x, axis=axis, mask=mask)[0]


# ---------------------------------------------------------------------------
# normalization and gating
# ---------------------------------------------------------------------------


def l2_normalize_rows(x: Tensor, epsilon: float = 1e-12) -> Tensor:
    """Divide each last-axis row by max(||row||_2, epsilon)."""
    if epsilon <= 0:
        raise ParameterError("epsilon must be > 0")
    x = _as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    big = norm >= epsilon
    denom = np.where(big, norm, epsilon)
    out = x.data / denom

    def bwd(g):
        # along-row component is removed only where the true norm was used
        inner = np.sum(g * out, axis=-1, keepdims=True)
        dx = np.where(big, (g - out * inner) / denom, g / epsilon)
        _accumulate(x, dx)

    return from_op(out, (x,), bwd)


def gumbel_softmax(logits: Tensor, tau: float, mode: str, rng=None) -> Tensor:
    """Row softmax at temperature tau, with Gumbel(0,1) noise when stochastic.

    The output stays soft in both modes (no straight-through estimator), so
    gradients are exact for finite-difference verification.
    """
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    if mode not in ("stochastic", "deterministic"):
        raise ParameterError(f"unknown gumbel_softmax mode: {mode!r}")
    logits = _as_tensor(logits)
    z = logits.data
    if mode == "stochastic":
        if rng is None:
            raise ParameterError("stochastic mode requires an rng")
        u = np.clip(rng.random(size=z.shape), 1e-12, 1.0 - 1e-12)
        z = z + (-np.log(-np.log(u)))
    z = z / tau
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def bwd(g):
        inner = np.sum(g * y, axis=-1, keepdims=True)
        _accumulate(logits, (g - inner) * y / tau)

    return from_op(y, (logits,), bwd)


# ---------------------------------------------------------------------------
# fused similarity grid (hot kernel lives in kernels.py)
# ---------------------------------------------------------------------------


def maxmean_similarity(img: Tensor, img_mask, txt: Tensor, txt_mask, backend=None) -> Tensor:
    """Bidirectional max-mean aggregation over already-normalized tokens.

    img: (B_i, L_v, d), txt: (B_t, L_t, d); returns the (B_i, B_t) grid where
    entry [i, j] sums the text-to-image and image-to-text directed scores.
    """
    img_mask = np.asarray(img_mask, dtype=bool)
    txt_mask = np.asarray(txt_mask, dtype=bool)
    if img.shape[-1] != txt.shape[-1]:
        raise ShapeError(f"token dims differ: image {img.shape} vs text {txt.shape}")
    if img_mask.shape != img.shape[:2] or txt_mask.shape != txt.shape[:2]:
        raise ShapeError("mask shape must be (batch, tokens)")
    for side, mask in (("image", img_mask), ("text", txt_mask)):
        empty = np.flatnonzero(~mask.any(axis=1))
        if empty.size:
            raise DegenerateSliceError(f"{side} instance {int(empty[0])} has no valid tokens")

    sim, t2i_idx, i2t_idx = kernels.maxmean_forward(txt.data, txt_mask, img.data, img_mask, backend=backend)

    def bwd(g):
        dtn, dvn = kernels.maxmean_backward(
            g, txt.data, txt_mask, img.data, img_mask, t2i_idx, i2t_idx, backend=backend
        )
        _accumulate(txt, dtn)
        _accumulate(img, dvn)

    return from_op(sim, (img, txt), bwd)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle
# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape):
    """Populate grads of every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if len(tape) == 0:
        raise ContractError("backward needs a nonempty tape")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape._records):
        if out.grad is not None:
            fn(out.grad)


def grad_check(loss_fn, params: dict, h: float = 1e-5) -> dict:
    """Compare backward() against central differences for each parameter.

    loss_fn: nullary closure over `params` returning a scalar Tensor; it must
    be deterministic (reseed internal rngs per call). Returns, per parameter
    name, the max over coordinates of |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8).
    """
    if h <= 0:
        raise ParameterError("h must be > 0")
    probe_a = loss_fn().data.copy()
    probe_b = loss_fn().data.copy()
    if not np.array_equal(probe_a, probe_b):
        raise DeterminismError("loss_fn returned different values on two calls")

    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    report = {}
    for name, p in params.items():
        ga = analytic[name]
        worst = 0.0
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            f_plus = loss_fn().item()
            flat[i] = keep - h
            f_minus = loss_fn().item()
            flat[i] = keep
            gn = (f_plus - f_minus) / (2.0 * h)
            ga_i = ga.reshape(-1)[i]
            err = abs(ga_i - gn) / max(abs(ga_i), abs(gn), 1e-8)
            if err > worst:
                worst = err
        report[name] = worst
    return report
