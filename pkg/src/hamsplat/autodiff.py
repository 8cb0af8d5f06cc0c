"""Reverse-mode automatic differentiation over dense float64 tensors.

The tape is built eagerly: every operation returns a ``Tensor`` that remembers
its parents and enough saved state to run its backward rule.  Gradients
returned by :func:`grad` with ``create_graph=True`` are themselves tape nodes,
so a scalar function of a gradient can be differentiated again
(reverse-over-reverse).  A handful of fused kernels (``gather``, ``bilerp``,
``conv2d_valid``, ``scatter_rows``) have raw first-order backward rules and
refuse to participate in a second differentiation.

Tensors are immutable values; distinct tapes on distinct threads are
independent.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "Grads",
    "AdamState",
    "leaf",
    "constant",
    "as_tensor",
    "zeros",
    "ones",
    "full",
    "no_grad",
    "set_debug_checks",
    "debug_checks_enabled",
    "grad",
    "adam_step",
    "add", "sub", "neg", "mul", "div", "pow_", "matmul",
    "relu", "tanh", "sigmoid", "exp", "log", "sqrt", "sin", "cos", "absolute",
    "atan2", "clip", "minimum_const", "maximum_const",
    "tsum", "mean", "cumsum", "flip", "reshape", "transpose", "concat",
    "gather", "scatter_rows", "bilerp", "conv2d_valid", "conv2d_sep",
]


class AutodiffError(Exception):
    """Base class for tape errors."""


class ShapeError(AutodiffError):
    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class NonFiniteError(AutodiffError):
    def __init__(self, op: str):
        super().__init__(f"{op}: produced NaN/Inf values (debug checks enabled)")
        self.op = op


_RECORDING = True
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf detection after every op; returns the previous setting."""
    global _DEBUG_CHECKS
    old = _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)
    return old


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


@contextmanager
def no_grad():
    """Suspend taping: ops executed inside produce constant tensors."""
    global _RECORDING
    old = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = old


class Tensor:
    """A dense float64 array plus its position in the tape DAG."""

    __slots__ = ("data", "op", "parents", "saved", "requires_grad", "_visits")

    def __init__(self, data: np.ndarray, op: str = "const", parents: tuple = (),
                 saved=None, requires_grad: bool = False):
        self.data = data
        self.op = op
        self.parents = parents
        self.saved = saved
        self.requires_grad = requires_grad
        self._visits = 0

    # -- array-ish conveniences -------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def leaf(data) -> Tensor:
    """A differentiable input (parameter)."""
    a = _as_array(data).copy()
    a.flags.writeable = False
    return Tensor(a, op="leaf", requires_grad=True)


def constant(data) -> Tensor:
    """A non-differentiable input."""
    a = _as_array(data)
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return Tensor(a, op="const", requires_grad=False)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x)


def zeros(shape) -> Tensor:
    return constant(np.zeros(shape))


def ones(shape) -> Tensor:
    return constant(np.ones(shape))


def full(shape, value) -> Tensor:
    return constant(np.full(shape, float(value)))


def _make(op: str, data, parents: tuple, saved=None) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    if data.flags.writeable:
        data.flags.writeable = False
    if _RECORDING and any(p.requires_grad for p in parents):
        return Tensor(data, op=op, parents=parents, saved=saved, requires_grad=True)
    return Tensor(data, op="const", requires_grad=False)


def _require_first_order(op: str):
    if _RECORDING:
        raise AutodiffError(
            f"{op}: backward rule is first-order only; cannot build a differentiable graph through it")


def _sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to ``shape`` (leading-dim batching)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = tsum(g, axis=0)
    for i, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = tsum(g, axis=i, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


_BACKWARD = {}


def _rule(name):
    def deco(fn):
        _BACKWARD[name] = fn
        return fn
    return deco


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape)
    return _make("add", out, (a, b))


@_rule("add")
def _add_bwd(node, g):
    a, b = node.parents
    return _sum_to(g, a.shape), _sum_to(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape)
    return _make("sub", out, (a, b))


@_rule("sub")
def _sub_bwd(node, g):
    a, b = node.parents
    return _sum_to(g, a.shape), _sum_to(neg(g), b.shape)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,))


@_rule("neg")
def _neg_bwd(node, g):
    return (neg(g),)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape)
    return _make("mul", out, (a, b))


@_rule("mul")
def _mul_bwd(node, g):
    a, b = node.parents
    return _sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.shape, b.shape)
    return _make("div", out, (a, b))


@_rule("div")
def _div_bwd(node, g):
    a, b = node.parents
    ga = div(g, b)
    gb = neg(div(mul(g, a), mul(b, b)))
    return _sum_to(ga, a.shape), _sum_to(gb, b.shape)


def pow_(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make("pow", a.data ** p, (a,), saved=float(p))


@_rule("pow")
def _pow_bwd(node, g):
    (a,) = node.parents
    p = node.saved
    return (mul(g, mul(constant(p), pow_(a, p - 1.0))),)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    return _make("relu", np.maximum(a.data, 0.0), (a,))


@_rule("relu")
def _relu_bwd(node, g):
    (a,) = node.parents
    mask = constant((a.data > 0.0).astype(np.float64))
    return (mul(g, mask),)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _make("tanh", np.tanh(a.data), (a,))


@_rule("tanh")
def _tanh_bwd(node, g):
    y = node
    return (mul(g, sub(1.0, mul(y, y))),)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make("sigmoid", out, (a,))


@_rule("sigmoid")
def _sigmoid_bwd(node, g):
    y = node
    return (mul(g, mul(y, sub(1.0, y))),)


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _make("exp", np.exp(a.data), (a,))


@_rule("exp")
def _exp_bwd(node, g):
    return (mul(g, node),)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make("log", np.log(a.data), (a,))


@_rule("log")
def _log_bwd(node, g):
    (a,) = node.parents
    return (div(g, a),)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    return _make("sqrt", np.sqrt(a.data), (a,))


@_rule("sqrt")
def _sqrt_bwd(node, g):
    return (div(g, mul(2.0, node)),)


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make("sin", np.sin(a.data), (a,))


@_rule("sin")
def _sin_bwd(node, g):
    (a,) = node.parents
    return (mul(g, cos(a)),)


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make("cos", np.cos(a.data), (a,))


@_rule("cos")
def _cos_bwd(node, g):
    (a,) = node.parents
    return (neg(mul(g, sin(a))),)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make("abs", np.abs(a.data), (a,))


@_rule("abs")
def _abs_bwd(node, g):
    (a,) = node.parents
    return (mul(g, constant(np.sign(a.data))),)


def atan2(y, x) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    try:
        out = np.arctan2(y.data, x.data)
    except ValueError:
        raise ShapeError("atan2", y.shape, x.shape)
    return _make("atan2", out, (y, x))


@_rule("atan2")
def _atan2_bwd(node, g):
    y, x = node.parents
    # 1e-300 keeps the rule finite at the (0, 0) singular point
    denom = add(add(mul(x, x), mul(y, y)), 1e-300)
    return _sum_to(mul(g, div(x, denom)), y.shape), _sum_to(neg(mul(g, div(y, denom))), x.shape)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes inside the closed interval."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
    return _make("clip", out, (a,), saved=mask)


@_rule("clip")
def _clip_bwd(node, g):
    return (mul(g, constant(node.saved)),)


def minimum_const(a, c: float) -> Tensor:
    """min(a, c) built from relu so it stays twice-differentiable."""
    a = as_tensor(a)
    return sub(a, relu(sub(a, c)))


def maximum_const(a, c: float) -> Tensor:
    a = as_tensor(a)
    return add(a, relu(sub(c, a)))


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make("matmul", out, (a, b))


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, tuple(axes))


@_rule("matmul")
def _matmul_bwd(node, g):
    a, b = node.parents
    if b.ndim == 1:
        # a (.., m, n) @ b (n,) -> (.., m)
        ga = _sum_to(mul(reshape(g, g.shape + (1,)), b), a.shape)
        gb = _sum_to(matmul(_swap_last(a), reshape(g, g.shape + (1,))), b.shape + (1,))
        return ga, reshape(gb, b.shape)
    ga = matmul(g, _swap_last(b))
    gb = matmul(_swap_last(a), g)
    return _sum_to(ga, a.shape), _sum_to(gb, b.shape)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=np.float64)
    return _make("sum", out, (a,), saved=(axis, keepdims, a.shape))


@_rule("sum")
def _sum_bwd(node, g):
    axis, keepdims, in_shape = node.saved
    if axis is None:
        big = mul(reshape(g, (1,) * len(in_shape)) if in_shape else g, ones(in_shape))
        return (big,)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(in_shape) for ax in axes)
    if not keepdims:
        kshape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
        g = reshape(g, kshape)
    return (mul(g, ones(in_shape)),)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(a, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    return _make("cumsum", np.cumsum(a.data, axis=axis), (a,), saved=axis)


@_rule("cumsum")
def _cumsum_bwd(node, g):
    axis = node.saved
    return (flip(cumsum(flip(g, axis), axis), axis),)


def flip(a, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    return _make("flip", np.flip(a.data, axis=axis), (a,), saved=axis)


@_rule("flip")
def _flip_bwd(node, g):
    return (flip(g, node.saved),)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.reshape(a.data, shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape))
    return _make("reshape", out, (a,), saved=a.shape)


@_rule("reshape")
def _reshape_bwd(node, g):
    return (reshape(g, node.saved),)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    return _make("transpose", out, (a,), saved=tuple(axes))


@_rule("transpose")
def _transpose_bwd(node, g):
    inv = tuple(np.argsort(node.saved))
    return (transpose(g, inv),)


def _slice(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]
    out = np.asarray(out, dtype=np.float64)
    return _make("slice", out, (a,), saved=(key, a.shape))


@_rule("slice")
def _slice_bwd(node, g):
    key, in_shape = node.saved
    return (_unslice(g, key, in_shape),)


def _unslice(g, key, shape) -> Tensor:
    g = as_tensor(g)
    out = np.zeros(shape)
    out[key] = g.data
    return _make("unslice", out, (g,), saved=key)


@_rule("unslice")
def _unslice_bwd(node, g):
    key = node.saved
    return (_slice(g, key),)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors])
    sizes = tuple(t.shape[axis] for t in tensors)
    return _make("concat", out, tensors, saved=(axis, sizes))


@_rule("concat")
def _concat_bwd(node, g):
    axis, sizes = node.saved
    grads = []
    start = 0
    for sz in sizes:
        key = tuple(slice(None) for _ in range(axis)) + (slice(start, start + sz),)
        grads.append(_slice(g, key))
        start += sz
    return tuple(grads)


# ---------------------------------------------------------------------------
# fused first-order kernels
# ---------------------------------------------------------------------------

def _bincount_rows(idx: np.ndarray, values: np.ndarray, num_rows: int) -> np.ndarray:
    """Sum rows of ``values`` into ``num_rows`` bins (duplicate-safe scatter-add)."""
    if values.ndim == 1:
        return np.bincount(idx, weights=values, minlength=num_rows)
    ncol = values.shape[1]
    flat_idx = (idx[:, None] * ncol + np.arange(ncol)[None, :]).ravel()
    out = np.bincount(flat_idx, weights=values.ravel(), minlength=num_rows * ncol)
    return out.reshape(num_rows, ncol)


def gather(a, idx) -> Tensor:
    """Index rows of ``a`` along axis 0 with an integer array of any shape."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise AutodiffError("gather: indices must be integers")
    out = a.data[idx]
    return _make("gather", np.ascontiguousarray(out), (a,), saved=(idx, a.shape))


@_rule("gather")
def _gather_bwd(node, g):
    _require_first_order("gather")
    idx, in_shape = node.saved
    flat_idx = idx.ravel()
    gd = g.data.reshape((flat_idx.size,) + in_shape[1:])
    if len(in_shape) == 1:
        acc = np.bincount(flat_idx, weights=gd, minlength=in_shape[0])
    else:
        acc = _bincount_rows(flat_idx, gd.reshape(flat_idx.size, -1), in_shape[0])
        acc = acc.reshape(in_shape)
    return (constant(acc),)


def scatter_rows(idx, values, num_rows: int) -> Tensor:
    """Sum ``values`` rows into a fresh (num_rows, ...) tensor at ``idx``."""
    values = as_tensor(values)
    idx = np.asarray(idx)
    if idx.ndim != 1 or idx.shape[0] != values.shape[0]:
        raise ShapeError("scatter_rows", idx.shape, values.shape)
    if values.ndim == 1:
        out = np.bincount(idx, weights=values.data, minlength=num_rows)
    else:
        out = _bincount_rows(idx, values.data.reshape(values.shape[0], -1), num_rows)
        out = out.reshape((num_rows,) + values.shape[1:])
    return _make("scatter_rows", out, (values,), saved=idx)


@_rule("scatter_rows")
def _scatter_rows_bwd(node, g):
    idx = node.saved
    return (gather(g, idx),)


def bilerp(grid, gx, gy) -> Tensor:
    """Bilinear lookup of a (H, W, C) grid at fractional coordinates.

    ``gx`` indexes the first grid axis in [0, H-1], ``gy`` the second in
    [0, W-1]; callers clamp out-of-range queries beforehand.  Differentiable
    in the grid values and in both coordinates (within a cell).
    """
    grid, gx, gy = as_tensor(grid), as_tensor(gx), as_tensor(gy)
    if grid.ndim != 3 or gx.ndim != 1 or gx.shape != gy.shape:
        raise ShapeError("bilerp", grid.shape, gx.shape, gy.shape)
    h, w, c = grid.shape
    if h < 2 or w < 2:
        raise ShapeError("bilerp", grid.shape)
    i0 = np.clip(np.floor(gx.data).astype(np.int64), 0, h - 2)
    j0 = np.clip(np.floor(gy.data).astype(np.int64), 0, w - 2)
    fx = (gx.data - i0)[:, None]
    fy = (gy.data - j0)[:, None]
    flat = grid.data.reshape(h * w, c)
    g00 = flat[i0 * w + j0]
    g01 = flat[i0 * w + j0 + 1]
    g10 = flat[(i0 + 1) * w + j0]
    g11 = flat[(i0 + 1) * w + j0 + 1]
    out = ((1 - fx) * (1 - fy) * g00 + (1 - fx) * fy * g01
           + fx * (1 - fy) * g10 + fx * fy * g11)
    return _make("bilerp", out, (grid, gx, gy), saved=(i0, j0, fx, fy))


@_rule("bilerp")
def _bilerp_bwd(node, g):
    _require_first_order("bilerp")
    grid, gx, gy = node.parents
    i0, j0, fx, fy = node.saved
    h, w, c = grid.shape
    flat = grid.data.reshape(h * w, c)
    g00 = flat[i0 * w + j0]
    g01 = flat[i0 * w + j0 + 1]
    g10 = flat[(i0 + 1) * w + j0]
    g11 = flat[(i0 + 1) * w + j0 + 1]
    gd = g.data

    w00 = (1 - fx) * (1 - fy)
    w01 = (1 - fx) * fy
    w10 = fx * (1 - fy)
    w11 = fx * fy
    idx = np.concatenate([i0 * w + j0, i0 * w + j0 + 1, (i0 + 1) * w + j0, (i0 + 1) * w + j0 + 1])
    vals = np.concatenate([w00 * gd, w01 * gd, w10 * gd, w11 * gd], axis=0)
    dgrid = _bincount_rows(idx, vals, h * w).reshape(h, w, c)

    dv_dfx = -(1 - fy) * g00 - fy * g01 + (1 - fy) * g10 + fy * g11
    dv_dfy = -(1 - fx) * g00 + (1 - fx) * g01 - fx * g10 + fx * g11
    dgx = np.sum(gd * dv_dfx, axis=1)
    dgy = np.sum(gd * dv_dfy, axis=1)
    return constant(dgrid), constant(dgx), constant(dgy)


def conv2d_valid(img, kernel: np.ndarray) -> Tensor:
    """Valid 2D correlation of an (H, W, C) image with a constant kernel."""
    img = as_tensor(img)
    kernel = np.asarray(kernel, dtype=np.float64)
    if img.ndim != 3 or kernel.ndim != 2:
        raise ShapeError("conv2d_valid", img.shape, kernel.shape)
    kh, kw = kernel.shape
    h, w, _ = img.shape
    if h < kh or w < kw:
        raise ShapeError("conv2d_valid", img.shape, kernel.shape)
    windows = np.lib.stride_tricks.sliding_window_view(img.data, (kh, kw), axis=(0, 1))
    out = np.einsum("ijcuv,uv->ijc", windows, kernel, optimize=True)
    return _make("conv2d_valid", out, (img,), saved=kernel)


@_rule("conv2d_valid")
def _conv2d_bwd(node, g):
    _require_first_order("conv2d_valid")
    kernel = node.saved
    kh, kw = kernel.shape
    gp = np.pad(g.data, ((kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(0, 1))
    dimg = np.einsum("ijcuv,uv->ijc", windows, kernel[::-1, ::-1], optimize=True)
    return (constant(dimg),)


def _corr_axis(a: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(a, k.size, axis=axis)
    return win @ k


def conv2d_sep(img, kernel1d: np.ndarray) -> Tensor:
    """Valid separable 2D correlation: the same 1D kernel along both axes."""
    img = as_tensor(img)
    k = np.asarray(kernel1d, dtype=np.float64)
    if img.ndim != 3 or k.ndim != 1:
        raise ShapeError("conv2d_sep", img.shape, k.shape)
    h, w, _ = img.shape
    if h < k.size or w < k.size:
        raise ShapeError("conv2d_sep", img.shape, k.shape)
    out = _corr_axis(_corr_axis(img.data, k, 0), k, 1)
    return _make("conv2d_sep", out, (img,), saved=k)


@_rule("conv2d_sep")
def _conv2d_sep_bwd(node, g):
    _require_first_order("conv2d_sep")
    k = node.saved
    p = k.size - 1
    kf = k[::-1]
    mid = _corr_axis(np.pad(g.data, ((0, 0), (p, p), (0, 0))), kf, 1)
    dimg = _corr_axis(np.pad(mid, ((p, p), (0, 0), (0, 0))), kf, 0)
    return (constant(dimg),)


# ---------------------------------------------------------------------------
# grad
# ---------------------------------------------------------------------------

class Grads(dict):
    """Map leaf -> gradient tensor; ``detached`` lists wrt entries not in the graph."""

    def __init__(self):
        super().__init__()
        self.detached: list[Tensor] = []


def grad(output: Tensor, wrt, create_graph: bool = False) -> Grads:
    """Gradients of a scalar output w.r.t. a set of tensors.

    With ``create_graph=True`` the returned gradients are live tape nodes and
    can be differentiated again.  Each reachable node is processed exactly
    once.
    """
    if output.shape != ():
        raise ShapeError("grad(non-scalar output)", output.shape)
    wrt = list(wrt)
    wrt_ids = {id(w) for w in wrt}

    # Postorder over the requires_grad subgraph; mark nodes on a wrt->output path.
    post: list[Tensor] = []
    reaches: dict[int, bool] = {}
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    seen: set[int] = set()
    while stack:
        node, expanded = stack.pop()
        nid = id(node)
        if expanded:
            r = nid in wrt_ids or any(reaches.get(id(p), False) for p in node.parents)
            reaches[nid] = r
            if r:
                post.append(node)
            continue
        if nid in seen:
            continue
        seen.add(nid)
        stack.append((node, True))
        if node.requires_grad or nid in wrt_ids:
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))

    collected: dict[int, Tensor] = {}
    cot: dict[int, Tensor] = {}
    if reaches.get(id(output), False):
        cot[id(output)] = constant(np.ones(()))
        sweep_ctx = _NULL_CTX if create_graph else no_grad()
        with sweep_ctx:
            for node in reversed(post):
                g = cot.pop(id(node), None)
                if g is None:
                    continue
                if _DEBUG_CHECKS:
                    node._visits += 1
                if id(node) in wrt_ids:
                    collected[id(node)] = g
                    if not node.parents:
                        continue
                if node.op in ("leaf", "const"):
                    continue
                rule = _BACKWARD[node.op]
                pgrads = rule(node, g)
                for p, pg in zip(node.parents, pgrads):
                    if pg is None or not reaches.get(id(p), False):
                        continue
                    pid = id(p)
                    if pid in cot:
                        cot[pid] = add(cot[pid], pg)
                    else:
                        cot[pid] = pg

    out = Grads()
    for w in wrt:
        got = collected.get(id(w))
        if got is None:
            out[w] = zeros(w.shape)
            out.detached.append(w)
        else:
            out[w] = got
    return out


class _Null:
    def __enter__(self):
        return self

    def __exit__(self, *a):
        return False


_NULL_CTX = _Null()


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second-moment running averages for one parameter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(param.shape), v=np.zeros(param.shape),
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param: Tensor, gradient: Tensor, state: AdamState, lr: float) -> Tensor:
    """One bias-corrected Adam update; returns the new parameter leaf."""
    p = param.data
    g = gradient.data if isinstance(gradient, Tensor) else np.asarray(gradient, dtype=np.float64)
    if p.shape != g.shape or state.m.shape != p.shape:
        raise ShapeError("adam_step", p.shape, g.shape, state.m.shape)
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    mhat = state.m / (1.0 - state.beta1 ** state.step)
    vhat = state.v / (1.0 - state.beta2 ** state.step)
    new = p - lr * mhat / (np.sqrt(vhat) + state.eps)
    return leaf(new)
