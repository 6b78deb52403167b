"""Dense tensors with reverse-mode differentiation.

Every primitive records its inputs and a closure mapping the output
gradient to input gradients.  ``backward`` orders the recorded graph
topologically (the tape) and replays it in reverse.

Arrays are float64 unless created otherwise; primitives keep the dtype
of their inputs so float32 training stays float32 end to end.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NonFiniteError, ShapeError, UsageError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _check_finite_enabled() -> bool:
    return getattr(_state, "check_finite", False)


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording them (inference, logging)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def detect_nonfinite():
    """Raise NonFiniteError as soon as any primitive produces NaN/Inf."""
    prev = _check_finite_enabled()
    _state.check_finite = True
    try:
        yield
    finally:
        _state.check_finite = prev


class Tensor:
    """An n-dimensional array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def is_leaf(self) -> bool:
        return self._backward is None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __abs__(self):
        return abs_(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _check_finite_enabled() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"primitive {op!r} produced non-finite values")
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.op = op
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scale,
    "abs": abs_,
    "square": square,
    "relu": relu,
    "tanh": tanh,
}


def apply_elementwise(op: str, *inputs):
    """Dispatch by name to one of the elementwise primitives."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# ----------------------------------------------------------------------
# reductions and shape ops
# ----------------------------------------------------------------------

def _norm_axes(axes, ndim) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(a, op: str = "sum", axes=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    if op == "sum":
        def backward(g):
            return (np.broadcast_to(np.reshape(g, kept), shape).copy(),)
        return _make(np.sum(a.data, axis=axes), (a,), backward, "sum")
    if op == "mean":
        count = int(np.prod([shape[i] for i in axes])) if axes else 1

        def backward(g):
            return (np.broadcast_to(np.reshape(g, kept) / count, shape).copy(),)
        return _make(np.mean(a.data, axis=axes), (a,), backward, "mean")
    raise ConfigError(f"unknown reduction {op!r}")


def sum_(a, axes=None) -> Tensor:
    return reduce(a, "sum", axes)


def mean(a, axes=None) -> Tensor:
    return reduce(a, "mean", axes)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (np.reshape(g, old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def spatial_gradient(a, axis: int) -> Tensor:
    """Forward difference ``x[i+1] - x[i]`` along ``axis``."""
    a = as_tensor(a)
    axis = _norm_axes(axis, a.ndim)[0]
    n = a.shape[axis]
    if n < 2:
        raise ShapeError(f"spatial_gradient needs extent >= 2 along axis {axis}, got {n}")
    hi = [slice(None)] * a.ndim
    lo = [slice(None)] * a.ndim
    hi[axis] = slice(1, None)
    lo[axis] = slice(None, -1)
    hi, lo = tuple(hi), tuple(lo)
    shape = a.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[hi] += g
        gx[lo] -= g
        return (gx,)
    return _make(a.data[hi] - a.data[lo], (a,), backward, "spatial_gradient")


def upsample_nearest(a, factor: int = 2, first_spatial_axis: int = 2) -> Tensor:
    """Repeat every sample ``factor`` times along each spatial axis."""
    a = as_tensor(a)
    axes = range(first_spatial_axis, a.ndim)
    out = a.data
    for ax in axes:
        out = np.repeat(out, factor, axis=ax)
    shape = a.shape

    def backward(g):
        # fold each block of factor**d samples back onto its source voxel
        split = list(shape[:first_spatial_axis])
        for n in shape[first_spatial_axis:]:
            split += [n, factor]
        block_axes = tuple(first_spatial_axis + 2 * i + 1 for i in range(len(shape) - first_spatial_axis))
        return (g.reshape(split).sum(axis=block_axes),)
    return _make(out, (a,), backward, "upsample")


def linear_map(a, forward: Callable[[np.ndarray], np.ndarray],
               adjoint: Callable[[np.ndarray], np.ndarray], op: str = "linear") -> Tensor:
    """Apply a linear operator whose exact transpose is ``adjoint``."""
    a = as_tensor(a)
    return _make(forward(a.data), (a,), lambda g: (adjoint(g),), op)


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------

def _pad_symmetric(x: np.ndarray, pads: Sequence[int]) -> np.ndarray:
    widths = [(0, 0), (0, 0)] + [(p, p) for p in pads]
    return np.pad(x, widths, mode="symmetric")


def _unpad_symmetric(g: np.ndarray, pads: Sequence[int]) -> np.ndarray:
    """Transpose of ``_pad_symmetric``: fold mirrored borders back inside."""
    for i, p in enumerate(pads):
        if p == 0:
            continue
        ax = 2 + i
        n = g.shape[ax] - 2 * p
        core = np.take(g, range(p, p + n), axis=ax).copy()
        left = np.flip(np.take(g, range(0, p), axis=ax), axis=ax)
        right = np.flip(np.take(g, range(n + p, n + 2 * p), axis=ax), axis=ax)
        idx = [slice(None)] * g.ndim
        idx[ax] = slice(0, p)
        core[tuple(idx)] += left
        idx[ax] = slice(n - p, n)
        core[tuple(idx)] += right
        g = core
    return g


def _im2col(xp: np.ndarray, ksize, strides, out_sp) -> np.ndarray:
    """Rows ``[N * prod(out), C * prod(k)]`` of strided windows of ``xp[N, C, ...]``."""
    d = len(ksize)
    c = xp.shape[1]
    win = sliding_window_view(xp, ksize, axis=tuple(range(2, 2 + d)))
    win = win[(slice(None), slice(None)) + tuple(slice(0, o * s, s) for o, s in zip(out_sp, strides))]
    perm = (0,) + tuple(range(2, 2 + d)) + (1,) + tuple(range(2 + d, 2 + 2 * d))
    return np.ascontiguousarray(win.transpose(perm)).reshape(-1, c * int(np.prod(ksize)))


def conv_nd(x, kernels, stride=1, padding_mode: str = "symmetric", bias=None) -> Tensor:
    """Cross-correlate ``x[N, C_in, *spatial]`` with ``kernels[C_out, C_in, *k]``.

    ``x`` may also be unbatched (``[C_in, *spatial]``).  With symmetric
    padding each axis is padded by ``(k - 1) // 2`` mirrored samples (the
    border sample is repeated, as in numpy's ``"symmetric"`` mode).
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    d = kernels.ndim - 2
    if d < 1:
        raise ShapeError("kernels must be [C_out, C_in, k...]")
    unbatched = x.ndim == d + 1
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != d + 2:
        raise ShapeError(f"input rank {x.ndim} does not match {d}-d kernels")
    n_batch, c_in = x.shape[:2]
    c_out = kernels.shape[0]
    if kernels.shape[1] != c_in:
        raise ShapeError(f"kernel expects {kernels.shape[1]} input channels, got {c_in}")
    ksize = kernels.shape[2:]
    strides = (stride,) * d if isinstance(stride, int) else tuple(stride)
    if len(strides) != d or any(s < 1 for s in strides):
        raise ConfigError(f"invalid stride {stride}")
    spatial = x.shape[2:]
    if padding_mode == "symmetric":
        pads = [(k - 1) // 2 for k in ksize]
        if any(s == 1 and k % 2 == 0 for s, k in zip(strides, ksize)):
            raise ConfigError("symmetric padding with stride 1 needs odd kernel extents")
        if any(p > n for p, n in zip(pads, spatial)):
            raise ShapeError("input too small for symmetric padding")
    elif padding_mode == "none":
        pads = [0] * d
    else:
        raise ConfigError(f"unknown padding mode {padding_mode!r}")
    for s, n in zip(strides, spatial):
        if s > 1 and n % s:
            raise ConfigError(f"spatial extent {n} not divisible by stride {s}")
    xd = x.data
    xp = _pad_symmetric(xd, pads) if any(pads) else xd
    out_sp = tuple((n + 2 * p - k) // s + 1 for n, p, k, s in zip(spatial, pads, ksize, strides))
    if any(o < 1 for o in out_sp):
        raise ShapeError("kernel larger than padded input")
    cols = _im2col(xp, ksize, strides, out_sp)
    wmat = kernels.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = np.ascontiguousarray(np.moveaxis(out.reshape((n_batch,) + out_sp + (c_out,)), -1, 1))
    padded_shape = xp.shape

    def backward(g):
        gmat = np.moveaxis(g, 1, -1).reshape(-1, c_out)
        gw = (gmat.T @ cols).reshape(kernels.shape)
        if all(s == 1 for s in strides):
            # d/dx of a correlation is a full correlation with the flipped, transposed kernel
            gpad = np.pad(g, [(0, 0), (0, 0)] + [(k - 1, k - 1) for k in ksize])
            flipped = np.flip(kernels.data, axis=tuple(range(2, 2 + d))).swapaxes(0, 1)
            gcols = _im2col(gpad, ksize, strides, padded_shape[2:])
            gxp = np.ascontiguousarray(np.moveaxis(
                (gcols @ flipped.reshape(c_in, -1).T).reshape((n_batch,) + padded_shape[2:] + (c_in,)), -1, 1))
        elif tuple(strides) == tuple(ksize):
            # non-overlapping windows: every padded sample belongs to exactly one window
            gc = (gmat @ wmat).reshape((n_batch,) + out_sp + (c_in,) + tuple(ksize))
            perm = (0, 1 + d) + tuple(v for i in range(d) for v in (1 + i, 2 + d + i))
            gxp = np.zeros(padded_shape, dtype=g.dtype)
            covered = tuple(o * k for o, k in zip(out_sp, ksize))
            gxp[(slice(None), slice(None)) + tuple(slice(0, c) for c in covered)] = (
                gc.transpose(perm).reshape((n_batch, c_in) + covered))
        else:
            gc = (gmat @ wmat).reshape((n_batch,) + out_sp + (c_in,) + tuple(ksize))
            gc = np.moveaxis(gc, 1 + d, 1)
            gxp = np.zeros(padded_shape, dtype=g.dtype)
            for off in itertools.product(*(range(k) for k in ksize)):
                dst = (slice(None), slice(None)) + tuple(
                    slice(o, o + n * s, s) for o, n, s in zip(off, out_sp, strides))
                gxp[dst] += gc[(Ellipsis,) + off]
        gx = _unpad_symmetric(gxp, pads) if any(pads) else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, 2 + d))))
        return tuple(grads)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    y = _make(out, parents, backward, "conv_nd")
    if unbatched:
        y = reshape(y, y.shape[1:])
    return y


# ----------------------------------------------------------------------
# normalization and regularization
# ----------------------------------------------------------------------

def batch_norm(x, scale_, shift, running_mean: np.ndarray, running_var: np.ndarray,
               mode: str = "train", eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalization over the batch and spatial axes of ``x[N, C, ...]``.

    In train mode the running statistics are updated in place as
    ``r <- momentum * r + (1 - momentum) * batch_stat`` (unbiased batch
    variance for the running estimate, biased for normalization).
    """
    x, scale_, shift = as_tensor(x), as_tensor(scale_), as_tensor(shift)
    if x.ndim < 2:
        raise ShapeError("batch_norm needs [N, C, ...] input")
    c = x.shape[1]
    if scale_.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"batch_norm parameters must have shape ({c},)")
    red = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    gamma = scale_.data.reshape(bshape)
    beta = shift.data.reshape(bshape)
    xd = x.data
    if mode == "train":
        count = xd.size // c
        if count < 2:
            raise ShapeError("batch_norm train mode needs >= 2 elements per channel")
        mu = xd.mean(axis=red, keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=red, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv
        running_mean *= momentum
        running_mean += (1 - momentum) * mu.reshape(c)
        running_var *= momentum
        running_var += (1 - momentum) * var.reshape(c) * (count / (count - 1))

        def backward(g):
            gg = g * gamma
            gx = inv * (gg - gg.mean(axis=red, keepdims=True)
                        - xhat * (gg * xhat).mean(axis=red, keepdims=True))
            return gx, (g * xhat).sum(axis=red), g.sum(axis=red)
    elif mode == "eval":
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (xd - running_mean.reshape(bshape)) * inv

        def backward(g):
            return g * gamma * inv, (g * xhat).sum(axis=red), g.sum(axis=red)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    out = (xhat * gamma + beta).astype(xd.dtype, copy=False)
    return _make(out, (x, scale_, shift), backward, "batch_norm")


def dropout(x, rate: float, mode: str = "train", rng: np.random.Generator | int | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    x = as_tensor(x)
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0:
        return x
    if mode != "train":
        raise ConfigError(f"unknown mode {mode!r}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ----------------------------------------------------------------------
# reverse pass
# ----------------------------------------------------------------------

@dataclass
class TapeRecord:
    node: Tensor
    inputs: tuple[Tensor, ...]


def build_tape(loss: Tensor) -> list[TapeRecord]:
    """Topologically ordered records of every primitive reachable from ``loss``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return [TapeRecord(n, n._parents) for n in order if n._backward is not None]


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Propagate d(loss)/d(node) through the tape.

    Leaf tensors with ``requires_grad`` receive their gradient in ``.grad``.
    When ``wrt`` is given, a list of gradients for those tensors is returned
    (zeros for tensors the loss does not depend on).
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf() and loss.requires_grad:
        leaves[id(loss)] = loss
    for rec in reversed(build_tape(loss)):
        g = grads.pop(id(rec.node), None)
        if g is None:
            continue
        in_grads = rec.node._backward(g)
        for parent, pg in zip(rec.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.is_leaf():
                leaves[key] = parent
    for key, leaf in leaves.items():
        leaf.grad = np.asarray(grads.get(key, np.zeros_like(leaf.data)), dtype=leaf.dtype).reshape(leaf.shape)
    if wrt is None:
        return None
    out = []
    for t in wrt:
        if id(t) in leaves:
            out.append(t.grad)
        else:
            out.append(np.zeros_like(t.data))
    return out
