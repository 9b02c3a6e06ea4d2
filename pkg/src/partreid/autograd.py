"""Reverse-mode autodiff on numpy arrays.

Every network in this package runs on the primitives below. Forward ops
record a tape (parents + vjp closure) on the output tensor; ``backward`` on
a scalar walks the tape once in reverse topological order and accumulates
gradients into leaf tensors. Computation is float32 by default; gradient
checking is done in float64 (float32 finite differences are too noisy for
1e-4 tolerances).

Every op validates its output for NaN/Inf and fails fast naming the op:
a silent NaN makes multi-task training failures undiagnosable.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "absolute",
    "relu", "sigmoid", "matmul", "bmm", "transpose2d", "affine",
    "softmax", "log_softmax", "tsum", "tmean", "reshape", "concat",
    "narrow", "crop", "conv2d", "conv_transpose2d", "bilinear_resize",
    "global_avg_pool", "global_max_pool", "masked_max_pool",
    "take_pairs", "l2_normalize",
    "grad_check", "GradCheckReport",
]


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for an op."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / mask generation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional array with optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._op = "leaf"

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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode pass from a scalar output.

        Touches each tape node exactly once and accumulates gradients into
        every reachable tensor with ``requires_grad``.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar output, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            g = np.asarray(g)
            if g.shape != node.data.shape:
                g = g.reshape(node.data.shape)
            if node.requires_grad:
                node.accumulate_grad(g)
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                # never accumulate in place: vjp outputs may alias each
                # other (views) and 0-d results decay to immutable scalars
                grads[id(parent)] = pg if acc is None else acc + pg

    # Operator sugar; constants are wrapped as non-grad tensors.
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op})"


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _finite_or_raise(out: np.ndarray, op: str):
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _make(out_data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    _finite_or_raise(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = False
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise

def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _wrap(a, b.dtype)
    if not isinstance(b, Tensor):
        b = _wrap(b, a.dtype)
    return a, b


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data + b.data
    return _make(out, "add", (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data - b.data
    return _make(out, "sub", (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data * b.data
    return _make(out, "mul", (a, b), lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make(out, "div", (a, b), lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, "log", (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g / (2.0 * out),))


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    return _make(out, "abs", (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _make(out, "relu", (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    # numerically stable two-sided form
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(out, "matmul", (a, b), lambda g: (
        g @ b.data.T, a.data.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(out, "bmm", (a, b), lambda g: (
        g @ np.swapaxes(b.data, 1, 2), np.swapaxes(a.data, 1, 2) @ g))


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose2d needs >=2 dims, got {a.shape}")
    out = np.swapaxes(a.data, -1, -2).copy()
    return _make(out, "transpose2d", (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully-connected layer: x @ w.T (+ b). w has shape (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"affine: x {x.shape} incompatible with w {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def vjp(g):
        gb = g.sum(axis=0) if b is not None else None
        return (g @ w.data, g.T @ x.data, gb)

    parents = (x, w, b) if b is not None else (x, w)
    if b is None:
        return _make(out, "affine", parents, lambda g: (g @ w.data, g.T @ x.data))
    return _make(out, "affine", parents, vjp)


# ---------------------------------------------------------------------------
# reductions / shape

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.full_like(a.data, g),) if np.isscalar(g) else (
                np.broadcast_to(g, a.shape).astype(a.dtype),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype).copy(),)

    return _make(np.asarray(out), "sum", (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))

    def vjp(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).astype(a.dtype).copy(),)

    return _make(np.asarray(out), "mean", (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, "concat", tuple(tensors), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(
            f"narrow [{start}:{start + length}] outside axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl].copy()

    def vjp(g):
        gx = np.zeros_like(a.data)
        gx[sl] = g
        return (gx,)

    return _make(out, "narrow", (a,), vjp)


def crop(a: Tensor, box: tuple[int, int, int, int]) -> Tensor:
    """Spatial crop of an (..., H, W) tensor; box = (y0, y1, x0, x1), half-open."""
    y0, y1, x0, x1 = box
    h, w = a.shape[-2], a.shape[-1]
    if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
        raise ShapeError(f"crop box {box} outside map of shape {a.shape}")
    out = a.data[..., y0:y1, x0:x1].copy()

    def vjp(g):
        gx = np.zeros_like(a.data)
        gx[..., y0:y1, x0:x1] = g
        return (gx,)

    return _make(out, "crop", (a,), vjp)


# ---------------------------------------------------------------------------
# softmax family

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, "softmax", (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = s - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (a,), vjp)


# ---------------------------------------------------------------------------
# convolution

def _im2col_indices(c, h, w, kh, kw, stride, padding, dilation):
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"conv window (k={kh}x{kw}, stride={stride}, pad={padding}, "
            f"dil={dilation}) does not fit input {h}x{w}")
    i0 = np.repeat(np.arange(kh) * dilation, kw)
    i0 = np.tile(i0, c)
    i1 = stride * np.repeat(np.arange(ho), wo)
    j0 = np.tile(np.arange(kw) * dilation, kh * c)
    j1 = stride * np.tile(np.arange(wo), ho)
    i = i0.reshape(-1, 1) + i1.reshape(1, -1)   # (c*kh*kw, ho*wo)
    j = j0.reshape(-1, 1) + j1.reshape(1, -1)
    k = np.repeat(np.arange(c), kh * kw).reshape(-1, 1)
    return (k, i, j), ho, wo


def _im2col(x, kh, kw, stride, padding, dilation):
    n, c, h, w = x.shape
    (k, i, j), ho, wo = _im2col_indices(c, h, w, kh, kw, stride, padding, dilation)
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = x[:, k, i, j]                       # (n, c*kh*kw, ho*wo)
    return cols, ho, wo


def _col2im(cols, x_shape, kh, kw, stride, padding, dilation):
    n, c, h, w = x_shape
    (k, i, j), ho, wo = _im2col_indices(c, h, w, kh, kw, stride, padding, dilation)
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    np.add.at(out, (slice(None), k, i, j), cols)
    if padding > 0:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D convolution; x (N,C,H,W), w (F,C,kh,kw), b (F,)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: x {x.shape} incompatible with w {w.shape}")
    n, c, h, wth = x.shape
    f, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding, dilation)
    wf = w.data.reshape(f, -1)
    out = np.einsum("fk,nkl->nfl", wf, cols, optimize=True)
    out = out.reshape(n, f, ho, wo)
    if b is not None:
        out = out + b.data.reshape(1, f, 1, 1)

    def vjp(g):
        gl = g.reshape(n, f, -1)
        gw = np.einsum("nfl,nkl->fk", gl, cols, optimize=True).reshape(w.shape)
        gcols = np.einsum("fk,nfl->nkl", wf, gl, optimize=True)
        gx = _col2im(gcols, x.shape, kh, kw, stride, padding, dilation)
        gb = gl.sum(axis=(0, 2)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, "conv2d", parents, vjp)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-D convolution (adjoint of conv2d); w (Cin,Cout,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"conv_transpose2d: x {x.shape} incompatible with w {w.shape}")
    n, cin, h, wth = x.shape
    _, cout, kh, kw = w.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wth - 1) * stride - 2 * padding + kw
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d produces empty output {ho}x{wo}")
    wf = w.data.reshape(cin, -1)               # (cin, cout*kh*kw)
    xf = x.data.reshape(n, cin, -1)            # (n, cin, h*w)
    cols = np.einsum("ck,ncl->nkl", wf, xf, optimize=True)
    out = _col2im(cols, (n, cout, ho, wo), kh, kw, stride, padding, 1)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)

    def vjp(g):
        gcols, _, _ = _im2col(g, kh, kw, stride, padding, 1)
        gx = np.einsum("ck,nkl->ncl", wf, gcols, optimize=True).reshape(x.shape)
        gw = np.einsum("ncl,nkl->ck", xf, gcols, optimize=True).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, "conv_transpose2d", parents, vjp)


# ---------------------------------------------------------------------------
# pooling / resize

def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C): mean over spatial positions."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(
            x.dtype).copy(),)

    return _make(out, "global_avg_pool", (x,), vjp)


def global_max_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C): max over spatial positions, grad to first argmax."""
    if x.ndim != 4:
        raise ShapeError(f"global_max_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, -1)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def vjp(g):
        gx = np.zeros((n, c, h * w), dtype=x.dtype)
        np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
        return (gx.reshape(x.shape),)

    return _make(out, "global_max_pool", (x,), vjp)


def masked_max_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """(N,C,H,W) -> (N,C): max over positions where mask is true.

    mask is a constant boolean array, either (H,W) shared across the batch or
    (N,H,W) per sample. Raises if any mask selects no position.
    """
    if x.ndim != 4:
        raise ShapeError(f"masked_max_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == (h, w):
        mask = np.broadcast_to(mask, (n, h, w))
    if mask.shape != (n, h, w):
        raise ShapeError(
            f"mask shape {mask.shape} incompatible with input {x.shape}")
    if not mask.any(axis=(1, 2)).all():
        raise ShapeError("masked_max_pool: a mask selects no position")
    mflat = mask.reshape(n, 1, -1)
    flat = np.where(mflat, x.data.reshape(n, c, -1), -np.inf)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(x.data.reshape(n, c, -1), idx[:, :, None], axis=2)[:, :, 0]

    def vjp(g):
        gx = np.zeros((n, c, h * w), dtype=x.dtype)
        np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
        return (gx.reshape(x.shape),)

    return _make(out, "masked_max_pool", (x,), vjp)


def bilinear_resize(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear resize of (..., H, W) to (..., out_h, out_w).

    Uses corner-aligned sampling; resizing to the identical shape is an exact
    identity (bit-exact copy).
    """
    oh, ow = out_hw
    h, w = x.shape[-2], x.shape[-1]
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"bilinear_resize target {out_hw} must be positive")
    if (oh, ow) == (h, w):
        return _make(x.data.copy(), "bilinear_resize", (x,), lambda g: (g,))

    def axis_weights(n_in, n_out):
        if n_out == 1:
            lo = np.zeros(1, dtype=np.int64)
            frac = np.zeros(1, dtype=x.dtype)
        elif n_in == 1:
            lo = np.zeros(n_out, dtype=np.int64)
            frac = np.zeros(n_out, dtype=x.dtype)
        else:
            pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
            lo = np.floor(pos).astype(np.int64)
            lo = np.minimum(lo, n_in - 2)
            frac = (pos - lo).astype(x.dtype)
        return lo, frac

    ylo, yf = axis_weights(h, oh)
    xlo, xf = axis_weights(w, ow)
    yf_ = yf.reshape(-1, 1)
    xf_ = xf.reshape(1, -1)

    def interp(arr):
        top = arr[..., ylo, :] * (1 - yf_)[..., :, :] + arr[..., np.minimum(ylo + 1, h - 1), :] * yf_
        return top[..., :, xlo] * (1 - xf_) + top[..., :, np.minimum(xlo + 1, w - 1)] * xf_

    out = interp(x.data)

    def vjp(g):
        # adjoint of the two separable linear interpolations
        g_top = np.zeros(g.shape[:-1] + (w,), dtype=x.dtype)
        np.add.at(g_top, (..., xlo), g * (1 - xf_))
        np.add.at(g_top, (..., np.minimum(xlo + 1, w - 1)), g * xf_)
        gx = np.zeros(g.shape[:-2] + (h, w), dtype=x.dtype)
        np.add.at(gx, (..., ylo, slice(None)), g_top * (1 - yf_))
        np.add.at(gx, (..., np.minimum(ylo + 1, h - 1), slice(None)), g_top * yf_)
        return (gx,)

    return _make(out, "bilinear_resize", (x,), vjp)


# ---------------------------------------------------------------------------
# misc

def take_pairs(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather x[rows[i], cols[i]] from a 2-D tensor; indices are constants."""
    if x.ndim != 2:
        raise ShapeError(f"take_pairs expects a 2-D tensor, got {x.shape}")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = x.data[rows, cols]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _make(out, "take_pairs", (x,), vjp)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    sq = tsum(mul(x, x), axis=axis, keepdims=True)
    return div(x, sqrt(add(sq, Tensor(np.asarray(eps, dtype=x.dtype)))))


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    """Per-parameter max deviation between analytic and numeric gradients."""
    passed: bool
    tolerance: float
    deviations: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.deviations, key=self.deviations.get)
        return name, self.deviations[name]

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        name, dev = self.worst
        line = f"grad_check {status}: worst {name} dev={dev:.3e} tol={self.tolerance:.0e}"
        if self.failures:
            line += f"; failing: {', '.join(self.failures)}"
        return line


def grad_check(fn, params: dict[str, Tensor], tolerance: float = 1e-4,
               h: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of a scalar-valued fn against central
    finite differences, parameter by parameter.

    ``fn`` takes no arguments and must be a deterministic closure over
    ``params``. All parameters must be float64: float32 differences drown in
    rounding noise at these tolerances. The deviation metric per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1).
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 params; '{name}' is {p.dtype}")
        p.requires_grad = True
        p.grad = None

    out = fn()
    if out.size != 1:
        raise ShapeError(f"grad_check requires a scalar output, got {out.shape}")
    out.backward()

    analytic = {}
    for name, p in params.items():
        analytic[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)

    report = GradCheckReport(passed=True, tolerance=tolerance)
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(fn().data)
                flat[i] = orig - h
                f_minus = float(fn().data)
                flat[i] = orig
                numeric[i] = (f_plus - f_minus) / (2 * h)
            a = analytic[name].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1.0)
            dev = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
            report.deviations[name] = dev
            if dev >= tolerance:
                report.passed = False
                report.failures.append(name)
    return report
