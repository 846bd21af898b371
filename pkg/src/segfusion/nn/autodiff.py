"""Dense-array reverse-mode automatic differentiation.

A ``DiffArray`` wraps a numpy array and records the operations that produced
it.  Calling :meth:`DiffArray.backward` on a scalar result walks the recorded
graph in reverse topological order and accumulates exact adjoints into every
reachable array with ``requires_grad=True``.  Subgraphs that cannot influence
any gradient (all inputs constant) are pruned at construction time, so frozen
model parts cost a forward pass only.

All arithmetic is plain numpy; default precision is float64 and can be
switched to float32 for speed via :func:`set_default_dtype`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "DiffArray",
    "ShapeError",
    "set_default_dtype",
    "default_dtype",
    "asdiff",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "concat",
    "reshape",
    "transpose",
    "gather_rows",
    "take_pairs",
    "scatter_rows",
    "segment_mean",
    "relu",
    "gelu",
    "exp",
    "log",
    "softmax",
    "layer_norm",
    "mean",
    "sum_",
    "bilinear_gather",
    "conv2d",
    "upsample_nearest2",
    "detach",
]

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for newly created arrays (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    """Raised when an operation receives incompatible array shapes."""


class DiffArray:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"DiffArray(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph ------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate adjoints of this value into every reachable input."""
        if grad is None:
            if self.size != 1:
                raise ShapeError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype)

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ----------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def asdiff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def constant(x) -> DiffArray:
    """A graph leaf that never receives a gradient."""
    return DiffArray(x, requires_grad=False)


def detach(x: DiffArray) -> DiffArray:
    return DiffArray(x.data, requires_grad=False)


def _make(data, parents: Sequence[DiffArray], backward: Callable) -> DiffArray:
    out = DiffArray(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _acc(node: DiffArray, g) -> None:
    if node.requires_grad:
        node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules)
# ---------------------------------------------------------------------------


def _broadcast_check(op: str, a: DiffArray, b: DiffArray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> DiffArray:
    a, b = asdiff(a), asdiff(b)
    _broadcast_check("add", a, b)

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> DiffArray:
    a, b = asdiff(a), asdiff(b)
    _broadcast_check("sub", a, b)

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> DiffArray:
    a, b = asdiff(a), asdiff(b)
    _broadcast_check("mul", a, b)

    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> DiffArray:
    a, b = asdiff(a), asdiff(b)
    _broadcast_check("div", a, b)

    def backward(g):
        _acc(a, _unbroadcast(g / b.data, a.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# linear algebra / shape ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> DiffArray:
    """Matrix product with numpy stacking semantics on leading batch axes."""
    a, b = asdiff(a), asdiff(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def backward(g):
        _acc(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _acc(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def concat(arrays, axis: int = 0) -> DiffArray:
    arrays = [asdiff(a) for a in arrays]
    if not arrays:
        raise ShapeError("concat: need at least one array")
    try:
        data = np.concatenate([a.data for a in arrays], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = [a.shape[axis] for a in arrays]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for arr, lo, hi in zip(arrays, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(arr, g[tuple(idx)])

    return _make(data, arrays, backward)


def reshape(a, shape) -> DiffArray:
    a = asdiff(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None

    def backward(g):
        _acc(a, g.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a, axes) -> DiffArray:
    a = asdiff(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _acc(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def _slice(a, key) -> DiffArray:
    """Basic slicing (ints, slices, tuples thereof); adjoint zero-fills."""
    a = asdiff(a)
    data = a.data[key]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        _acc(a, ga)

    return _make(data, (a,), backward)


def gather_rows(a, idx) -> DiffArray:
    """Select rows (axis 0) by integer index; duplicates allowed."""
    a = asdiff(a)
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"gather: index must be a 1-D integer array, got {idx.dtype} {idx.shape}")
    if a.ndim < 1:
        raise ShapeError("gather: cannot gather from a scalar")

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _acc(a, ga)

    return _make(a.data[idx], (a,), backward)


def take_pairs(a, rows, cols) -> DiffArray:
    """Element pick ``a[rows[k], cols[k]]`` for paired index arrays."""
    a = asdiff(a)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    if a.ndim != 2 or rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError(
            f"take_pairs: need 2-D input and matching 1-D indices, got {a.shape}, {rows.shape}, {cols.shape}"
        )

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        _acc(a, ga)

    return _make(a.data[rows, cols], (a,), backward)


def scatter_rows(idx, rows, num_rows: int) -> DiffArray:
    """Place ``rows[k]`` at output row ``idx[k]``; other rows are zero.

    Indices must be unique (each output row written at most once), which keeps
    the adjoint an exact gather.
    """
    rows = asdiff(rows)
    idx = np.asarray(idx)
    if idx.ndim != 1 or idx.shape[0] != rows.shape[0]:
        raise ShapeError(f"scatter: index shape {idx.shape} does not match rows {rows.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ShapeError(f"scatter: index out of range [0, {num_rows})")
    if len(np.unique(idx)) != idx.size:
        raise ShapeError("scatter: duplicate target rows")
    data = np.zeros((num_rows,) + rows.shape[1:], dtype=rows.data.dtype)
    data[idx] = rows.data

    def backward(g):
        _acc(rows, g[idx])

    return _make(data, (rows,), backward)


def segment_mean(a, segment_ids, num_segments: int) -> DiffArray:
    """Average rows sharing a segment id; empty segments yield zero rows."""
    a = asdiff(a)
    seg = np.asarray(segment_ids)
    if seg.ndim != 1 or seg.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_mean: ids shape {seg.shape} does not match input {a.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ShapeError(f"segment_mean: segment id out of range [0, {num_segments})")
    counts = np.bincount(seg, minlength=num_segments).astype(a.data.dtype)
    safe = np.maximum(counts, 1.0)
    sums = np.zeros((num_segments,) + a.shape[1:], dtype=a.data.dtype)
    np.add.at(sums, seg, a.data)
    denom = safe.reshape((-1,) + (1,) * (a.ndim - 1))

    def backward(g):
        _acc(a, (g / denom)[seg])

    return _make(sums / denom, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------


def relu(a) -> DiffArray:
    a = asdiff(a)
    mask = a.data > 0

    def backward(g):
        _acc(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> DiffArray:
    """Gaussian error linear unit, exact form x * Phi(x)."""
    a = asdiff(a)
    phi = 0.5 * (1.0 + erf(a.data / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        _acc(a, g * (phi + a.data * pdf))

    return _make(a.data * phi, (a,), backward)


def exp(a) -> DiffArray:
    a = asdiff(a)
    data = np.exp(a.data)

    def backward(g):
        _acc(a, g * data)

    return _make(data, (a,), backward)


def log(a) -> DiffArray:
    a = asdiff(a)

    def backward(g):
        _acc(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def softmax(a, axis: int = -1, mask=None) -> DiffArray:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0.

    ``mask`` broadcasts against the input.  Rows that are fully masked come
    out all-zero rather than NaN.
    """
    a = asdiff(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    hi = np.max(x, axis=axis, keepdims=True)
    hi = np.where(np.isfinite(hi), hi, 0.0)  # fully masked rows
    e = np.exp(x - hi)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    p = e / np.where(denom == 0.0, 1.0, denom)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        _acc(a, p * (g - dot))

    return _make(p, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> DiffArray:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    x, gamma, beta = asdiff(x), asdiff(gamma), asdiff(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must be ({d},), got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        _acc(beta, g.sum(axis=reduce_axes))
        _acc(gamma, (g * xhat).sum(axis=reduce_axes))
        gx = g * gamma.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        _acc(x, inv * (gx - m1 - xhat * m2))

    return _make(gamma.data * xhat + beta.data, (x, gamma, beta), backward)


def mean(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = asdiff(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape) / n)

    return _make(data, (a,), backward)


def sum_(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = asdiff(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# sampling / image ops
# ---------------------------------------------------------------------------


def bilinear_gather(feat, u, v) -> DiffArray:
    """Sample a (C, H, W) map at fractional pixel coords; returns (M, C).

    Coordinates must lie inside [0, W-1] x [0, H-1]; the adjoint scatters the
    four interpolation weights back onto the map.
    """
    feat = asdiff(feat)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if feat.ndim != 3:
        raise ShapeError(f"bilinear: feature map must be (C, H, W), got {feat.shape}")
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"bilinear: u/v must be matching 1-D arrays, got {u.shape}, {v.shape}")
    _, h, w = feat.shape
    if u.size and (u.min() < 0 or u.max() > w - 1 or v.min() < 0 or v.max() > h - 1):
        raise ValueError("bilinear: sample coordinates outside the feature map")

    u0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    du = u - u0
    dv = v - v0
    w00 = (1 - du) * (1 - dv)
    w01 = du * (1 - dv)
    w10 = (1 - du) * dv
    w11 = du * dv

    f = feat.data
    data = (
        w00[:, None] * f[:, v0, u0].T
        + w01[:, None] * f[:, v0, u1].T
        + w10[:, None] * f[:, v1, u0].T
        + w11[:, None] * f[:, v1, u1].T
    )

    def backward(g):
        gf = np.zeros((h, w, f.shape[0]), dtype=f.dtype)
        np.add.at(gf, (v0, u0), g * w00[:, None])
        np.add.at(gf, (v0, u1), g * w01[:, None])
        np.add.at(gf, (v1, u0), g * w10[:, None])
        np.add.at(gf, (v1, u1), g * w11[:, None])
        _acc(feat, gf.transpose(2, 0, 1))

    return _make(data, (feat,), backward)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> DiffArray:
    """2-D convolution of a (Cin, H, W) input with (Cout, Cin, kh, kw) filters."""
    x, w = asdiff(x), asdiff(w)
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    cin, h_in, w_in = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    h_out = (h_in + 2 * pad - kh) // stride + 1
    w_out = (w_in + 2 * pad - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {x.shape} with pad {pad}")

    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (Cin, Ho, Wo, kh, kw)
    cols = win.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T
    if b is not None:
        b = asdiff(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias must be ({cout},), got {b.shape}")
        out = out + b.data
    data = out.reshape(h_out, w_out, cout).transpose(2, 0, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = g.transpose(1, 2, 0).reshape(h_out * w_out, cout)
        _acc(w, (gmat.T @ cols).reshape(w.shape))
        if b is not None:
            _acc(b, gmat.sum(axis=0))
        gcols = (gmat @ wmat).reshape(h_out, w_out, cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                    gcols[:, :, :, i, j].transpose(2, 0, 1)
                )
        _acc(x, gxp[:, pad : pad + h_in, pad : pad + w_in] if pad else gxp)

    return _make(data, parents, backward)


def upsample_nearest2(x) -> DiffArray:
    """Nearest-neighbor 2x spatial upsampling of a (C, H, W) map."""
    x = asdiff(x)
    if x.ndim != 3:
        raise ShapeError(f"upsample: input must be (C, H, W), got {x.shape}")
    c, h, w = x.shape

    def backward(g):
        _acc(x, g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    return _make(x.data.repeat(2, axis=1).repeat(2, axis=2), (x,), backward)
