"""Reverse-mode automatic differentiation over numpy arrays.

A small, self-contained engine: each op records its parents and a closure
that routes the upstream gradient to them. `backward` on a scalar walks the
graph in reverse topological order. Only the op set needed by the models in
this package is implemented (conv2d, 2x pooling/upsampling, dense, the usual
elementwise ops and reductions).

float32 is the working precision; build models in float64 when running
finite-difference gradient checks. Ops preserve the dtype of their operands.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ShapeError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """N-d array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autograd plumbing ---------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def backward(self) -> None:
        backward(self)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), mul(self, -1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable tensor; its gradient buffer always exists and matches shape."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype not in _FLOAT_DTYPES:
        dtype = np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(p) into every reachable tensor that requires grad.

    `loss` must hold a single value.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # Free intermediate grads and graph references so a training loop does not
    # retain every forward pass; Parameters keep their accumulated grads.
    for node in topo:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            if not isinstance(node, Parameter) and node is not loss:
                node.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    out_data = a.data + b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape).astype(a.dtype, copy=False))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape).astype(b.dtype, copy=False))

    return _make(out_data, (a, b), back)


def mul(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    out_data = a.data * b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape).astype(a.dtype, copy=False))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape).astype(b.dtype, copy=False))

    return _make(out_data, (a, b), back)


def power(a: Tensor, exponent: float) -> Tensor:
    out_data = a.data ** exponent

    def back(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(out_data, (a,), back)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def back(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, (a,), back)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the un-clamped region."""
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def back(g):
        if a.requires_grad:
            a._accumulate(g * inside)

    return _make(out_data, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    t = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))

    def back(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), back)


def leaky_relu(a: Tensor, alpha: float = 0.01) -> Tensor:
    neg = a.data < 0
    out_data = np.where(neg, a.data * alpha, a.data)

    def back(g):
        if a.requires_grad:
            a._accumulate(np.where(neg, g * alpha, g))

    return _make(out_data, (a,), back)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    return _make(out_data, (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def back(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out_data, (a,), back)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(out_data, tensors, back)


def concat_channels(tensors: Iterable[Tensor]) -> Tensor:
    """Concatenate [N,C,H,W] tensors along the channel axis."""
    return concat(tensors, axis=1)


# ---------------------------------------------------------------------------
# dense / matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), back)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: x @ weight (+ bias). x: [N, d_in], weight: [d_in, d_out]."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy against integer class labels.

    Fused op: numerically stable forward, (softmax - onehot)/N backward.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [N, classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(expz.sum(axis=1)))
    out_data = np.asarray(nll.mean(), dtype=logits.dtype)

    def back(g):
        if logits.requires_grad:
            grad = probs.copy()
            grad[np.arange(n), labels] -= 1.0
            logits._accumulate((g * grad / n).astype(logits.dtype, copy=False))

    return _make(out_data, (logits,), back)


# ---------------------------------------------------------------------------
# spatial ops: conv2d, pooling, upsampling
# ---------------------------------------------------------------------------

def _conv_geometry(extent: int, k: int, stride: int, padding: int) -> int:
    span = extent + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv2d geometry not integral: extent={extent} k={k} "
            f"stride={stride} padding={padding}"
        )
    out = span // stride + 1
    if out <= 0:
        raise ShapeError("conv2d produces empty output")
    return out


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """[N,C,H,W] -> [N, C*k*k, Ho*Wo] patch matrix."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    n, c, ho, wo, _, _ = windows.shape
    return np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    """Scatter-add of [N, C*k*k, Ho*Wo] patches back to [N,C,H,W]."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xpad = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    patches = cols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            xpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += patches[:, :, i, j]
    if padding:
        return xpad[:, :, padding:padding + h, padding:padding + w]
    return xpad


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x with kernels [C_out, C_in, k, k].

    Accepts a single image [C,H,W] or a batch [N,C,H,W]; output follows suit.
    """
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects x [N,C,H,W] and kernels [O,C,k,k], got {x.shape}, {kernels.shape}")
    n, c_in, h, w = x.shape
    c_out, c_k, kh, kw = kernels.shape
    if kh != kw:
        raise ShapeError("only square kernels supported")
    if c_in != c_k:
        raise ShapeError(f"channel mismatch: input {c_in} vs kernel {c_k}")
    k = kh
    ho = _conv_geometry(h, k, stride, padding)
    wo = _conv_geometry(w, k, stride, padding)

    cols = _im2col(x.data, k, stride, padding)                  # [N, C*k*k, Ho*Wo]
    wmat = kernels.data.reshape(c_out, -1)                      # [O, C*k*k]
    out_data = (wmat @ cols).reshape(n, c_out, ho, wo)

    def back(g):
        g2 = g.reshape(n, c_out, ho * wo)                        # [N, O, Ho*Wo]
        if kernels.requires_grad:
            gw = np.einsum("nox,ncx->oc", g2, cols, optimize=True)
            kernels._accumulate(gw.reshape(kernels.shape).astype(kernels.dtype, copy=False))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)                        # [N, C*k*k, Ho*Wo]
            x._accumulate(_col2im(gcols, (n, c_in, h, w), k, stride, padding, ho, wo))

    out = _make(out_data, (x, kernels), back)
    if single:
        out = reshape(out, out.shape[1:])
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block."""
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(f"upsample2x expects [C,H,W] or [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def back(g):
        if x.requires_grad:
            x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    out = _make(out_data, (x,), back)
    if single:
        out = reshape(out, out.shape[1:])
    return out


def mean_pool(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial extents must be even."""
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"mean_pool needs even extents, got {h}x{w}")
    out_data = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g):
        if x.requires_grad:
            up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
            x._accumulate((up * 0.25).astype(x.dtype, copy=False))

    out = _make(out_data, (x,), back)
    if single:
        out = reshape(out, out.shape[1:])
    return out


def global_mean_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial average."""
    if x.ndim != 4:
        raise ShapeError(f"global_mean_pool expects [N,C,H,W], got {x.shape}")
    return mean(x, axis=(2, 3))


def assert_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.isfinite(t.data).all():
        raise UsageError(f"{what} contains non-finite values")
