"""Float64 tensors with record-and-replay reverse-mode differentiation.

Every differentiable operation lives in this module.  An operation computes
its output with numpy, and if any input requires a gradient it records its
parents together with a closure mapping the output gradient to one gradient
per parent.  :func:`backward` replays those closures in reverse topological
order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from diffcd.errors import ContractError, NumericError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Row-major float64 array plus the bookkeeping needed for gradients.

    Tensors are treated as immutable values: operations always allocate new
    outputs and never write into their inputs.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.op = "leaf"
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward_fn if needs else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Gradient of a scalar ``loss`` w.r.t. every leaf tensor flagged ``requires_grad``.

    Returns a mapping from the leaf tensor object to its gradient.  Leaves
    that do not influence ``loss`` are absent from the mapping.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    result: dict[Tensor, Tensor] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            result[node] = Tensor(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return result


# elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return add_scalar(a, b)
    if not isinstance(a, Tensor) and np.isscalar(a):
        return add_scalar(b, a)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return add_scalar(a, -b)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, b)
    if not isinstance(a, Tensor) and np.isscalar(a):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: (g,), "add_scalar")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (np.sign(ad) * g,), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_array(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


# shape manipulation --------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        index = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(int(lo), int(hi))
            parts.append(g[tuple(index)])
        return parts

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def take(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    axis = axis % a.ndim
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make(a.data[index].copy(), (a,), bw, "take")


# reductions ----------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(a.shape[ax] for ax in axes)
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# linear algebra and convolution -------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Rows are output pixels (n, y, x); columns run over (i, j, c)."""
    n, c = xp.shape[:2]
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    cols = np.empty((n, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xt[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _conv_raw(xp: np.ndarray, w: np.ndarray, s: int):
    """Unpadded strided cross-correlation; returns NCHW output and the columns."""
    n, c, hp, wp = xp.shape
    o, _, kh, kw = w.shape
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    cols = _im2col(xp, kh, kw, s, ho, wo)
    wmat = w.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return out, cols


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, C, H, W) with ``w`` (O, C, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    s, p = stride, padding
    if p > min(kh, kw) - 1:
        raise ShapeError(f"padding {p} too large for a {kh}x{kw} kernel")
    hp, wp = h + 2 * p, wd + 2 * p
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    out, cols = _conv_raw(xp, w.data, s)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    wdata = w.data

    def bw(g):
        gx = None
        if x.requires_grad:
            # transposed convolution: dilate by the stride, pad, flip the kernel
            if s > 1:
                gd = np.zeros((n, o, (ho - 1) * s + 1, (wo - 1) * s + 1))
                gd[:, :, ::s, ::s] = g
            else:
                gd = g
            extra_h = (hp - kh) % s
            extra_w = (wp - kw) % s
            ph, pw = kh - 1 - p, kw - 1 - p
            gd = np.pad(gd, ((0, 0), (0, 0), (ph, ph + extra_h), (pw, pw + extra_w)))
            wflip = wdata[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx, _ = _conv_raw(gd, wflip, 1)
            gx = np.ascontiguousarray(gx)
        gw = None
        if w.requires_grad:
            gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
            gw = (gmat.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    f = factor
    out = x.data.repeat(f, axis=2).repeat(f, axis=3)
    return _make(out, (x,),
                 lambda g: (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),), "upsample_nearest")


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over groups of channels (no affine part)."""
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    centered = xg - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def bw(g):
        gg = g.reshape(n, groups, -1)
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return (gx.reshape(n, c, h, w),)

    return _make(xhat.reshape(n, c, h, w), (x,), bw, "group_norm")


# sampling ------------------------------------------------------------------


def bilinear_warp(feat: Tensor, flow: Tensor) -> Tensor:
    """Backward warp with zero padding outside the grid.

    ``out[n, c, y, x]`` samples ``feat[n, c]`` at ``(y + flow[n, 1, y, x],
    x + flow[n, 0, y, x])``; channel 0 of ``flow`` is the horizontal offset.
    """
    if feat.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2:
        raise ShapeError(f"warp expects (N,C,H,W) features and (N,2,H,W) flow, "
                         f"got {feat.shape} and {flow.shape}")
    n, c, h, w = feat.shape
    if flow.shape[0] != n or flow.shape[2:] != (h, w):
        raise ShapeError(f"flow extents {flow.shape} do not match features {feat.shape}")
    px = np.arange(w, dtype=np.float64)[None, None, :] + flow.data[:, 0]
    py = np.arange(h, dtype=np.float64)[None, :, None] + flow.data[:, 1]
    x0 = np.floor(px)
    y0 = np.floor(py)
    wx = (px - x0).reshape(n, 1, h * w)
    wy = (py - y0).reshape(n, 1, h * w)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    fflat = feat.data.reshape(n, c, h * w)

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy, xx = y0 + dy, x0 + dx
        valid = ((yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)).reshape(n, 1, h * w)
        idx = (np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)).reshape(n, 1, h * w)
        vals = np.take_along_axis(fflat, np.broadcast_to(idx, (n, c, h * w)), axis=2)
        corners.append((idx, valid, np.where(valid, vals, 0.0)))
    (i00, m00, v00), (i01, m01, v01), (i10, m10, v10), (i11, m11, v11) = corners
    w00 = (1.0 - wy) * (1.0 - wx)
    w01 = (1.0 - wy) * wx
    w10 = wy * (1.0 - wx)
    w11 = wy * wx
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def bw(g):
        g = g.reshape(n, c, h * w)
        gfeat = None
        if feat.requires_grad:
            base = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
            flat_idx = []
            flat_w = []
            for idx, valid, wt in ((i00, m00, w00), (i01, m01, w01),
                                   (i10, m10, w10), (i11, m11, w11)):
                flat_idx.append((base + idx).ravel())
                flat_w.append((g * (wt * valid)).ravel())
            gfeat = np.bincount(np.concatenate(flat_idx), weights=np.concatenate(flat_w),
                                minlength=n * c * h * w).reshape(n, c, h, w)
        gflow = None
        if flow.requires_grad:
            d_px = (1.0 - wy) * (v01 - v00) + wy * (v11 - v10)
            d_py = (1.0 - wx) * (v10 - v00) + wx * (v11 - v01)
            gflow = np.stack([(g * d_px).sum(axis=1), (g * d_py).sum(axis=1)], axis=1)
            gflow = gflow.reshape(n, 2, h, w)
        return gfeat, gflow

    return _make(out.reshape(n, c, h, w), (feat, flow), bw, "bilinear_warp")


# losses --------------------------------------------------------------------


def bce_with_logits(logits: Tensor, target: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Mean binary cross-entropy in the overflow-free form
    ``max(z, 0) - z*m + log1p(exp(-|z|))``."""
    z = logits.data
    m = np.asarray(target, dtype=np.float64)
    if m.shape != z.shape:
        raise ShapeError(f"logits {z.shape} and target {m.shape} differ")
    weight = 1.0 + (pos_weight - 1.0) * m
    per = np.maximum(z, 0.0) - z * m + np.log1p(np.exp(-np.abs(z)))
    count = z.size
    loss = np.asarray((weight * per).sum() / count)

    def bw(g):
        return (g * weight * (sigmoid_array(z) - m) / count,)

    return _make(loss, (logits,), bw, "bce_with_logits")


def parameters_requiring_grad(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
