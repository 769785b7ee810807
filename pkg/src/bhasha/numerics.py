"""Dense tensor compute substrate with reverse-mode differentiation.

Every model operation in this package is expressed through the ops below.
Design constraints:

* two precisions: float32 for training runs, float64 for gradient
  certification (finite differences are unreliable at float32);
* no broadcasting beyond trailing-axis affine ops -- all other shapes must
  match exactly, so shape bugs surface early;
* gradients are recorded on an explicit ``Tape``; replaying the tape backward
  populates ``grad`` for every ``requires_grad`` tensor exactly once per
  ``backward`` call.

With no tape active, ops compute values only (inference mode).
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_state = threading.local()


def _current_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tensor:
    """A dense float array with an optional gradient slot.

    Values are immutable once produced by an op; ``grad`` is populated by
    ``backward`` and holds an array of identical shape.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed differentiable operations.

    Used as a context manager; ops executed inside the ``with`` block are
    recorded, and ``backward`` replays them in reverse. Tapes must not be
    shared between concurrent runs.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]):
        self.nodes.append((out, backward_fn))

    def __enter__(self) -> "Tape":
        if _current_tape() is not None:
            raise ContractError("nested tapes are not supported")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False


def _record(out: Tensor, parents: Sequence[Tensor], backward_fn):
    tape = _current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, backward_fn)
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None):
    """Populate ``grad`` of every tensor reachable from ``loss`` on the tape."""
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = tape or _current_tape()
    if tape is None:
        raise ContractError("backward called with no active tape")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for out, fn in reversed(tape.nodes):
        if out.grad is not None:
            fn(out.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} must match exactly")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _record(out, (a, b), bw)


def scale(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * s)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * s)

    return _record(out, (x,), bw)


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """x + constant; the constant may broadcast but must not enlarge x."""
    data = x.data + c
    if data.shape != x.data.shape:
        raise ShapeError(f"add_const: constant of shape {np.shape(c)} enlarges {x.data.shape}")
    out = Tensor(data)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g)

    return _record(out, (x,), bw)


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """x * constant; the constant may broadcast but must not enlarge x."""
    data = x.data * c
    if data.shape != x.data.shape:
        raise ShapeError(f"mul_const: constant of shape {np.shape(c)} enlarges {x.data.shape}")
    out = Tensor(data)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * c)

    return _record(out, (x,), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Trailing-axis affine add: x[..., d] + b[d]."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_bias: bias {b.data.shape} does not fit trailing axis of {x.data.shape}")
    out = Tensor(x.data + b.data)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _record(out, (x, b), bw)


# ---------------------------------------------------------------------------
# linear algebra / structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked leading dims when both operands share them."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {ad.shape} and {bd.shape}")
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
        if not (ad.ndim == 2 and bd.ndim == 2):
            raise ShapeError(f"matmul: leading dimensions must match exactly, got {ad.shape} and {bd.shape}")
    out = Tensor(np.matmul(ad, bd))

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(bd, -1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(np.swapaxes(ad, -1, -2), g))

    return _record(out, (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bw(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    return _record(out, (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))

    def bw(g):
        if x.requires_grad:
            x._accumulate(g.transpose(inv))

    return _record(out, (x,), bw)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor; output shape = idx.shape + (cols,).

    Gradient scatter-adds into the selected rows (embedding-lookup pattern).
    """
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D tensor, got {x.data.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(x.data[idx])

    def bw(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            np.add.at(acc, idx.reshape(-1), g.reshape(-1, x.data.shape[1]))
            x._accumulate(acc)

    return _record(out, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))

    def bw(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, g))

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis`` (max-subtraction)."""
    if not np.isfinite(x.data).all():
        # -inf from attention masks is fine; NaN / +inf is not
        if np.isnan(x.data).any() or np.isposinf(x.data).any():
            raise NumericError("softmax: input contains NaN or +inf")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            x._accumulate(y * (g - dot))

    return _record(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    logp = shifted - lse
    out = Tensor(logp)
    p = np.exp(logp)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return _record(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row zero mean / unit variance over the trailing axis, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bw(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv)

    return _record(out, (x, gain, bias), bw)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _record(out, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    try:
        from scipy.special import erf  # vectorized, exact
    except ImportError:  # pragma: no cover
        erf = np.vectorize(math.erf)
    phi = 0.5 * (1.0 + erf(x.data * inv_sqrt2))
    out = Tensor(x.data * phi)

    def bw(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
            x._accumulate(g * (phi + x.data * pdf))

    return _record(out, (x,), bw)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    neg = alpha * (np.exp(np.minimum(x.data, 0.0)) - 1.0)
    y = np.where(x.data > 0, x.data, neg)
    out = Tensor(y)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * np.where(x.data > 0, 1.0, neg + alpha))

    return _record(out, (x,), bw)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out = Tensor(np.where(x.data > 0, x.data, slope * x.data))

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * np.where(x.data > 0, 1.0, slope))

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# gradient certification


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued; ``x`` should be float64 for meaningful
    results. Returns max over coordinates of
    ``|analytic - central| / max(1, |analytic|)``.
    """
    x = Tensor(x.data.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        loss = f(x)
        backward(loss, tape)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x.data)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x.data)).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
