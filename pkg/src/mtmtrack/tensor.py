"""Dense float32 tensors with tape-based reverse-mode differentiation.

Only the operations needed by the tracker are provided. Every op checks its
forward output for NaN/Inf and raises :class:`NumericError` instead of
propagating non-finite values.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

_GRAD_ENABLED = True
_BRANCH_LOG: list | None = None


class NumericError(FloatingPointError):
    """A forward op produced NaN or Inf from its inputs."""


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested op."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def record_branches():
    """Collect the discrete choices (ReLU masks, |x| signs, max-pool winners,
    bilinear cells and clamps) made inside the block.

    Two evaluations with equal records lie on the same smooth piece of the
    function, which is what finite-difference checks need.
    """
    global _BRANCH_LOG
    prev = _BRANCH_LOG
    _BRANCH_LOG = []
    try:
        yield _BRANCH_LOG
    finally:
        _BRANCH_LOG = prev


def _note_branch(*arrays) -> None:
    if _BRANCH_LOG is not None:
        _BRANCH_LOG.append(b"".join(np.ascontiguousarray(a).tobytes() for a in arrays))


class Tensor:
    """N-d float32 array that records how it was produced.

    Leaf tensors created with ``requires_grad=True`` receive ``.grad`` after
    :meth:`backward`; intermediate gradients are discarded.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties -------------------------------------------------

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
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a single-element tensor")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE).reshape(self.shape)

        order = _toposort(self)
        grads: dict[int, object] = {id(self): grad}
        owned: set[int] = set()
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(g, SparseGrad):
                g = g.densify()
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                _accumulate(grads, owned, id(parent), pg)

    # -- operator sugar ---------------------------------------------------

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
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class SparseGrad:
    """Gradient given as (flat index, value) pairs; summed into a dense buffer on demand."""

    __slots__ = ("shape", "chunks")

    def __init__(self, shape, idx: np.ndarray, vals: np.ndarray):
        self.shape = tuple(shape)
        self.chunks = [(idx, vals)]

    def densify(self, into: np.ndarray | None = None) -> np.ndarray:
        out = np.zeros(int(np.prod(self.shape)), dtype=DTYPE) if into is None else into.reshape(-1)
        for idx, vals in self.chunks:
            np.add.at(out, idx, vals.astype(DTYPE, copy=False))
        return out.reshape(self.shape)


def _accumulate(grads: dict, owned: set, key: int, pg) -> None:
    cur = grads.get(key)
    if cur is None:
        grads[key] = pg
        return
    if isinstance(cur, SparseGrad) and isinstance(pg, SparseGrad):
        cur.chunks.extend(pg.chunks)
        return
    if isinstance(cur, SparseGrad):
        cur, pg = pg, cur
    if key not in owned:
        cur = cur.copy() if isinstance(pg, SparseGrad) else cur + pg
        owned.add(key)
        if not isinstance(pg, SparseGrad):
            grads[key] = cur
            return
    if isinstance(pg, SparseGrad):
        cur = pg.densify(into=cur)
    else:
        cur += pg
    grads[key] = cur


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=DTYPE)
    if not np.isfinite(data).all():
        raise NumericError(f"{op}: non-finite values in forward output")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_branch(mask)

    def backward(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(DTYPE)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward, "sigmoid")


def tabs(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    _note_branch(sign)

    def backward(g):
        return (g * sign,)

    return _result(np.abs(x.data), (x,), backward, "abs")


def atan2(y: Tensor, x: Tensor, eps: float = 1e-12) -> Tensor:
    """Elementwise angle of (x, y); gradient is damped by ``eps`` at the origin."""
    if y.shape != x.shape:
        raise ShapeError(f"atan2: shapes differ {y.shape} vs {x.shape}")
    out = np.arctan2(y.data, x.data)
    r2 = y.data.astype(np.float64) ** 2 + x.data.astype(np.float64) ** 2 + eps

    def backward(g):
        return (g * (x.data / r2)).astype(DTYPE), (g * (-y.data / r2)).astype(DTYPE)

    return _result(out, (y, x), backward, "atan2")


# -- reductions and shape ops -------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(DTYPE),)

    return _result(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _result(x.data.transpose(axes), (x,), backward, "transpose")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(out, (x,), backward, "getitem")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}") from exc
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(out, tensors, backward, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover extent {x.shape[ax]}")
    parts, lo = [], 0
    for s in sizes:
        index = [slice(None)] * x.ndim
        index[ax] = slice(lo, lo + s)
        parts.append(getitem(x, tuple(index)))
        lo += s
    return parts


# -- linear algebra and normalisation -----------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), backward, "layer_norm")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- spatial ops (H x L x C layout) ---------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an ``H x L x Cin`` grid with a ``k x k x Cin x Cout`` kernel."""
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected HxLxC input and kxkxCinxCout kernel, got {x.shape}, {w.shape}")
    k, k2, cin, cout = w.shape
    H, L, c = x.shape
    if k != k2:
        raise ShapeError("conv2d: kernel must be square")
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cin}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    if k > H + 2 * pad or k > L + 2 * pad:
        raise ShapeError(f"conv2d: kernel {k} does not fit {H}x{L} with pad {pad}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias must have shape ({cout},)")
    Ho = (H + 2 * pad - k) // stride + 1
    Lo = (L + 2 * pad - k) // stride + 1

    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride][:Ho, :Lo]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(Ho * Lo, k * k * cin)
    wmat = w.data.reshape(k * k * cin, cout)
    out = cols @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(Ho, Lo, cout)

    def backward(g):
        g2 = g.reshape(Ho * Lo, cout)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(Ho, Lo, k, k, cin)
            dxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    dxp[i:i + stride * Ho:stride, j:j + stride * Lo:stride] += dcols[:, :, i, j]
            gx = dxp[pad:pad + H, pad:pad + L]
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, backward, "conv2d")


def bilinear_sample(f: Tensor, coords: Tensor) -> Tensor:
    """Sample ``f`` at fractional grid coordinates with border clamping.

    ``f`` is ``H x L x C`` with ``coords`` ``P x 2``, or batched ``B x H x L x C``
    with ``coords`` ``B x P x 2``. Coordinates are in cell-index units
    (cell ``(i, j)`` sits at ``(i, j)``) and are clamped into
    ``[0, H-1] x [0, L-1]``; the coordinate gradient is zero where clamped.
    The interpolation is applied as a sparse matrix with four entries per row.
    """
    batched = f.ndim == 4
    if not batched and (f.ndim != 3 or coords.ndim != 2):
        raise ShapeError(f"bilinear_sample: got f{f.shape}, coords{coords.shape}")
    if batched and (coords.ndim != 3 or coords.shape[0] != f.shape[0]):
        raise ShapeError(f"bilinear_sample: got f{f.shape}, coords{coords.shape}")
    if coords.shape[-1] != 2:
        raise ShapeError("bilinear_sample: coords must end in 2")

    B, H, L, C = f.shape if batched else (1, *f.shape)
    cb = coords.data.reshape(B, -1, 2)
    P = cb.shape[1]
    rows = B * P

    cx = np.clip(cb[..., 0], 0, H - 1).reshape(-1)
    cy = np.clip(cb[..., 1], 0, L - 1).reshape(-1)
    x0 = np.minimum(np.floor(cx), max(H - 2, 0)).astype(np.int32)
    y0 = np.minimum(np.floor(cy), max(L - 2, 0)).astype(np.int32)
    dx = (x0 + 1 < H).astype(np.int32) * L
    dy = (y0 + 1 < L).astype(np.int32)
    _note_branch(x0, y0, cb[..., 0] < 0, cb[..., 0] > H - 1, cb[..., 1] < 0, cb[..., 1] > L - 1)
    wx = (cx - x0).astype(DTYPE)
    wy = (cy - y0).astype(DTYPE)

    idx = np.empty((rows, 4), dtype=np.int32)
    idx[:, 0] = np.repeat(np.arange(B, dtype=np.int32) * (H * L), P) + x0 * L + y0
    idx[:, 1] = idx[:, 0] + dx
    idx[:, 2] = idx[:, 0] + dy
    idx[:, 3] = idx[:, 1] + dy
    idx = idx.reshape(-1)
    indptr = np.arange(0, 4 * rows + 1, 4, dtype=np.int32)
    shape = (rows, B * H * L)
    wts = np.empty((rows, 4), dtype=DTYPE)
    wts[:, 0] = (1 - wx) * (1 - wy)
    wts[:, 1] = wx * (1 - wy)
    wts[:, 2] = (1 - wx) * wy
    wts[:, 3] = wx * wy
    A = sp.csr_matrix((wts.reshape(-1), idx, indptr), shape=shape)
    flat = f.data.reshape(B * H * L, C)
    out = np.asarray(A @ flat, dtype=DTYPE)
    out_shape = (B, P, C) if batched else (P, C)

    def backward(g):
        g2 = g.reshape(rows, C)
        gf = None
        if f.requires_grad:
            if C == 1 and 16 * rows < f.size:
                # a few samples from a huge map (correlation lookups): keep the gradient sparse
                gf = SparseGrad(f.shape, idx, (g2 * wts).reshape(-1))
            else:
                gf = np.asarray(A.T @ g2, dtype=DTYPE).reshape(f.shape)
        gc = None
        if coords.requires_grad:
            inside_x = ((cb[..., 0] >= 0) & (cb[..., 0] <= H - 1)).reshape(-1)
            inside_y = ((cb[..., 1] >= 0) & (cb[..., 1] <= L - 1)).reshape(-1)
            sx = np.empty((rows, 4), dtype=DTYPE)
            sx[:, 1] = 1 - wy
            sx[:, 0] = -sx[:, 1]
            sx[:, 3] = wy
            sx[:, 2] = -wy
            sy = np.empty((rows, 4), dtype=DTYPE)
            sy[:, 2] = 1 - wx
            sy[:, 0] = -sy[:, 2]
            sy[:, 3] = wx
            sy[:, 1] = -wx
            sx, sy = sx.reshape(-1), sy.reshape(-1)
            dfx = sp.csr_matrix((sx, idx, indptr), shape=shape) @ flat
            dfy = sp.csr_matrix((sy, idx, indptr), shape=shape) @ flat
            gcx = (g2 * dfx).sum(-1) * inside_x
            gcy = (g2 * dfy).sum(-1) * inside_y
            gc = np.stack([gcx, gcy], axis=-1).astype(DTYPE).reshape(coords.shape)
        return gf, gc

    return _result(out.reshape(out_shape), (f, coords), backward, "bilinear_sample")


def pool2d(x: Tensor, kind: str = "avg", global_: bool = True, size: int = 2) -> Tensor:
    """Average or max pooling over an ``H x L x C`` grid.

    With ``global_`` the spatial axes collapse to ``1 x 1 x C``; otherwise
    non-overlapping ``size x size`` windows are pooled (extents must divide).
    Max pooling routes the gradient to the first maximal cell.
    """
    if kind not in ("avg", "max"):
        raise ValueError(f"pool2d: unknown kind {kind!r}")
    H, L, C = x.shape
    if global_:
        win = x.data.reshape(1, H * L, 1, C)
        oh, ol = 1, 1
    else:
        if H % size or L % size:
            raise ShapeError(f"pool2d: {H}x{L} not divisible by window {size}")
        oh, ol = H // size, L // size
        win = (x.data.reshape(oh, size, ol, size, C).transpose(0, 2, 1, 3, 4)
               .reshape(oh * ol, size * size, 1, C))
    n = win.shape[1]
    if kind == "avg":
        out = win.mean(axis=1)

        def backward(g):
            gw = np.broadcast_to(g.reshape(oh * ol, 1, 1, C) / n, win.shape)
            return (_unwindow(gw, H, L, C, global_, size),)
    else:
        arg = win.argmax(axis=1)
        _note_branch(arg)
        out = np.take_along_axis(win, arg[:, None], axis=1)[:, 0]

        def backward(g):
            gw = np.zeros(win.shape, dtype=DTYPE)
            np.put_along_axis(gw, arg[:, None], g.reshape(oh * ol, 1, 1, C), axis=1)
            return (_unwindow(gw, H, L, C, global_, size),)

    return _result(out.reshape(oh, ol, C), (x,), backward, f"{kind}_pool")


def _unwindow(gw: np.ndarray, H: int, L: int, C: int, global_: bool, size: int) -> np.ndarray:
    if global_:
        return np.ascontiguousarray(gw.reshape(H, L, C))
    oh, ol = H // size, L // size
    return np.ascontiguousarray(
        gw.reshape(oh, ol, size, size, C).transpose(0, 2, 1, 3, 4).reshape(H, L, C))
