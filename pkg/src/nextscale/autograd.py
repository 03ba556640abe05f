"""Dense float64 tensors with taped reverse-mode differentiation.

The engine is deliberately small: a Tensor is a numpy float64 array plus a
gradient slot, and a Tape is the forward-ordered list of primitive
applications recorded while it is active.  Calling ``backward`` replays the
tape once in reverse, accumulating vector-Jacobian products.  The primitive
set is closed: add, mul, matmul, bilinear resize, reshape, transpose, exp,
log, relu, gelu, layer_norm, softmax, gather, and sum/mean reductions.
Everything downstream (losses, transformer, tokenizer) composes these.

Usage:

    w = Tensor(np.zeros((4, 4)), requires_grad=True)
    with Tape() as tape:
        loss = (matmul(x, w) - y).mul_self_sum()   # pseudo
    backward(loss, tape)
    w.grad  # populated, additive across backward calls

Gradients accumulate additively; call ``zero_grad`` between steps.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError

_TAPE_STACK: list["Tape"] = []

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tape:
    """Forward-ordered record of primitive ops, consumed by one backward sweep."""

    def __init__(self) -> None:
        self._records: list[tuple["Tensor", list[tuple["Tensor", Callable]]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False

    def record(self, out: "Tensor", pulls: list[tuple["Tensor", Callable]]) -> None:
        """Append one op: ``pulls`` maps grad-of-out to grad-of-each-input."""
        self._records.append((out, pulls))

    def reset(self) -> None:
        self._records.clear()

    def __len__(self) -> int:
        return len(self._records)


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class suspend_taping:
    """Context that hides any active tape, making enclosed ops pure forward."""

    def __enter__(self) -> None:
        self._saved = _TAPE_STACK[:]
        _TAPE_STACK.clear()

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK[:] = self._saved
        return False


class Tensor:
    """A contiguous float64 array with an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, _checked: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not _checked and not np.all(np.isfinite(arr)):
            raise NumericError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, _checked=True)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is supported by scalars only")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method forms of the primitives ---------------------------------

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis, keepdims)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _emit(out_data: np.ndarray, pairs: Iterable[tuple[Tensor, Callable]]) -> Tensor:
    """Wrap a primitive result; record it when a tape is active and needed."""
    tape = active_tape()
    pulls = (
        [(t, fn) for t, fn in pairs if t.requires_grad] if tape is not None else []
    )
    out = Tensor(out_data, requires_grad=bool(pulls), _checked=True)
    if pulls:
        tape.record(out, pulls)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data
    return _emit(
        out,
        [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ],
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _emit(
        out,
        [
            (a, lambda g: _unbroadcast(g * bd, a.shape)),
            (b, lambda g: _unbroadcast(g * ad, b.shape)),
        ],
    )


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul operands must have rank >= 2")
    out = a.data @ b.data
    ad, bd = a.data, b.data
    return _emit(
        out,
        [
            (a, lambda g: _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)),
            (b, lambda g: _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)),
        ],
    )


def reshape(t, shape) -> Tensor:
    t = _lift(t)
    src_shape = t.shape
    out = t.data.reshape(shape)
    return _emit(out, [(t, lambda g: g.reshape(src_shape))])


def transpose(t, axes=None) -> Tensor:
    t = _lift(t)
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    axes = tuple(a % t.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    out = t.data.transpose(axes)
    return _emit(out, [(t, lambda g: g.transpose(inv))])


def exp(t) -> Tensor:
    t = _lift(t)
    with np.errstate(over="ignore"):
        out = np.exp(t.data)
    if not np.all(np.isfinite(out)):
        raise NumericError("exp overflow")
    return _emit(out, [(t, lambda g: g * out)])


def log(t) -> Tensor:
    t = _lift(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(t.data)
    if not np.all(np.isfinite(out)):
        raise NumericError("log of a non-positive value")
    td = t.data
    return _emit(out, [(t, lambda g: g / td)])


def relu(t) -> Tensor:
    t = _lift(t)
    keep = t.data > 0.0
    out = np.where(keep, t.data, 0.0)
    return _emit(out, [(t, lambda g: g * keep)])


def gelu(t) -> Tensor:
    """Exact Gaussian-error-linear unit: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    t = _lift(t)
    x = t.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf
    # d/dx = Phi(x) + x * phi(x), with phi the standard normal pdf
    local = cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return _emit(out, [(t, lambda g: g * local)])


def layer_norm(t, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine part)."""
    t = _lift(t)
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def pull(g: np.ndarray) -> np.ndarray:
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return inv * (g - gm - y * gym)

    return _emit(y, [(t, pull)])


def softmax(t) -> Tensor:
    """Row-stabilized softmax over the last axis."""
    t = _lift(t)
    z = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def pull(g: np.ndarray) -> np.ndarray:
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (g - dot) * s

    return _emit(s, [(t, pull)])


def gather(t, index) -> Tensor:
    """Select rows along axis 0; gradient scatter-adds back."""
    t = _lift(t)
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("gather index must be integral")
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[0]):
        raise IndexError("gather index out of range")
    out = t.data[idx]
    src_shape = t.shape

    def pull(g: np.ndarray) -> np.ndarray:
        gx = np.zeros(src_shape, dtype=np.float64)
        np.add.at(gx, idx, g)
        return gx

    return _emit(out, [(t, pull)])


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _lift(t)
    axis = _norm_axis(axis, t.ndim)
    out = t.data.sum(axis=axis, keepdims=keepdims)
    src_shape = t.shape

    def pull(g: np.ndarray) -> np.ndarray:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, src_shape).copy()

    return _emit(out, [(t, pull)])


def tensor_mean(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _lift(t)
    axis = _norm_axis(axis, t.ndim)
    out = t.data.mean(axis=axis, keepdims=keepdims)
    src_shape = t.shape
    count = (
        t.size
        if axis is None
        else int(np.prod([src_shape[a] for a in axis]))
    )

    def pull(g: np.ndarray) -> np.ndarray:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / count, src_shape).copy()

    return _emit(out, [(t, pull)])


@lru_cache(maxsize=None)
def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Corner-aligned 1-D linear interpolation weights, shape (n_out, n_in).

    Output coordinate i samples source coordinate i*(n_in-1)/(n_out-1); a
    single-row output samples coordinate 0.  Used directly for enlargement;
    reduction uses its normalized transpose (see ``resize_matrix``).
    """
    if n_out < 1 or n_in < 1:
        raise ContractError("resize extents must be positive")
    w = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        w[:, 0] = 1.0
    elif n_out == 1:
        w[0, 0] = 1.0
    else:
        src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(src).astype(np.int64), n_in - 2)
        frac = src - lo
        rows = np.arange(n_out)
        w[rows, lo] = 1.0 - frac
        w[rows, lo + 1] = frac
    w.setflags(write=False)
    return w


@lru_cache(maxsize=None)
def resize_matrix(n_out: int, n_in: int) -> np.ndarray:
    """1-D resize weights: interpolation up, tent-filtered average down.

    Enlargement (n_out >= n_in) interpolates with corner alignment.
    Reduction uses the row-normalized transpose of the opposite-direction
    interpolation: each coarse sample is the tent-weighted average of the
    fine samples it would spread to, which is the standard bilinear
    minification filter (n_out = 1 degenerates to the plain mean).  Both
    branches are the exact identity when n_out == n_in.
    """
    if n_out >= n_in:
        return interp_matrix(n_out, n_in)
    w = interp_matrix(n_in, n_out).T
    w = w / w.sum(axis=1, keepdims=True)
    w.setflags(write=False)
    return w


def bilinear_resize(t, out_hw: tuple[int, int]) -> Tensor:
    """Resize a (h, w, c) tensor over its first two axes.

    Per axis: corner-aligned linear interpolation when growing, the
    tent-filtered average (its normalized adjoint) when shrinking.
    """
    t = _lift(t)
    if t.ndim != 3:
        raise ContractError("bilinear_resize expects a rank-3 (h, w, c) tensor")
    hh, ww = int(out_hw[0]), int(out_hw[1])
    wr = resize_matrix(hh, t.shape[0])
    wc = resize_matrix(ww, t.shape[1])
    out = np.einsum("Hh,hwc,Ww->HWc", wr, t.data, wc)

    def pull(g: np.ndarray) -> np.ndarray:
        return np.einsum("Hh,HWc,Ww->hwc", wr, g, wc)

    return _emit(out, [(t, pull)])


def resize_array(x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Plain-numpy twin of ``bilinear_resize`` for non-differentiable paths."""
    wr = resize_matrix(int(out_hw[0]), x.shape[0])
    wc = resize_matrix(int(out_hw[1]), x.shape[1])
    return np.einsum("Hh,hwc,Ww->HWc", wr, x, wc)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def backward(root: Tensor, tape: Tape) -> None:
    """Propagate d(root)/d(node) through the tape, newest record first.

    Each record is visited exactly once.  Gradients land additively in the
    ``grad`` slot of every tensor with ``requires_grad``; the tape is reset
    afterwards and cannot be replayed.
    """
    if root.data.size != 1:
        raise ContractError("backward root must be a scalar tensor")
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    holders: dict[int, Tensor] = {id(root): root}
    for out, pulls in reversed(tape._records):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        holders.pop(id(out), None)
        if out.requires_grad:
            out.grad = g if out.grad is None else out.grad + g
        for inp, fn in pulls:
            gi = fn(g)
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = gi
                holders[key] = inp
    for key, g in pending.items():
        leaf = holders[key]
        if leaf.requires_grad:
            leaf.grad = g if leaf.grad is None else leaf.grad + g
    tape.reset()


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None
