"""Dense tensors with reverse-mode differentiation.

Covers exactly what the capsule network needs: elementwise arithmetic with
broadcasting, matmul, 2-D/1-D convolution, batch normalization, max pooling,
reductions, ReLU, softmax and the squash nonlinearity. Data lives in numpy
arrays; each differentiable op records a backward closure and backward()
replays them in reverse topological order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

SQUASH_EPS = 1e-12

# graph recording is toggled per thread so concurrent inference cannot race
_thread_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_thread_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    prev = _grad_enabled()
    _thread_state.grad_enabled = False
    try:
        yield
    finally:
        _thread_state.grad_enabled = prev


class Tensor:
    """N-dimensional real array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad and _grad_enabled()
        self._backward = None
        self._prev: Tuple[Tensor, ...] = ()

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output.

        Gradients accumulate into ``grad`` on every tensor that requires
        them; repeated calls keep accumulating until grads are zeroed.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar output, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited = set()
        stack: list[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ops -----------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(a.data ** p, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _make(np.maximum(a.data, 0.0), (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through only inside [lo, hi]."""
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


# -- shape ops -----------------------------------------------------------


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def getitem(a: Tensor, idx) -> Tensor:
    # basic (slice/integer) indexing only; each source element appears at
    # most once, so scatter-add on the slice is the exact adjoint
    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] += g
            a._accumulate(full)

    return _make(a.data[idx].copy(), (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(part)

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# -- reductions ----------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(_expand_reduced(g, a.data.shape, axis, keepdims).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]

    def backward(g):
        if a.requires_grad:
            a._accumulate(_expand_reduced(g, a.data.shape, axis, keepdims) / count)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul requires >=2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _make(a.data @ b.data, (a, b), backward)


# -- convolution / pooling -----------------------------------------------


def _im2col2d(x: np.ndarray, kh: int, kw: int, stride: int):
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,C,H,W] (or [C,H,W]) input with [O,C,kH,kW] kernel.

    Output spatial size is floor((H + 2*padding - kH)/stride) + 1.
    """
    squeeze = x.data.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.data.shape)
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects a 3-D or 4-D input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    o, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise ValueError(
            f"conv2d channel mismatch: input has {c} channels, kernel expects {ck}"
        )
    if bias.data.shape != (o,):
        raise ValueError(
            f"conv2d bias shape {bias.data.shape} does not match {o} output channels"
        )
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col2d(xp, kh, kw, stride)
    wmat = kernel.data.reshape(o, c * kh * kw)
    out_data = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2) + bias.data.reshape(1, o, 1, 1)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if kernel.requires_grad:
            kernel._accumulate((gmat.T @ cols).reshape(kernel.data.shape))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(dxp)

    out = _make(out_data, (x, kernel, bias), backward)
    if squeeze:
        out = reshape(out, out.data.shape[1:])
    return out


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation of [N,C,L] (or [C,L]) input with [O,C,k] kernel."""
    squeeze = x.data.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.data.shape)
    if x.data.ndim != 3:
        raise ValueError(f"conv1d expects a 2-D or 3-D input, got shape {x.data.shape}")
    n, c, length = x.data.shape
    o, ck, k = kernel.data.shape
    if ck != c:
        raise ValueError(
            f"conv1d channel mismatch: input has {c} channels, kernel expects {ck}"
        )
    if bias.data.shape != (o,):
        raise ValueError(
            f"conv1d bias shape {bias.data.shape} does not match {o} output channels"
        )
    if length < k:
        raise ValueError(f"conv1d kernel size {k} larger than input length {length}")

    lo = (length - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=2)[:, :, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3).reshape(n * lo, c * k))
    wmat = kernel.data.reshape(o, c * k)
    out_data = (cols @ wmat.T).reshape(n, lo, o).transpose(0, 2, 1) + bias.data.reshape(1, o, 1)

    def backward(g):
        gmat = g.transpose(0, 2, 1).reshape(n * lo, o)
        if kernel.requires_grad:
            kernel._accumulate((gmat.T @ cols).reshape(kernel.data.shape))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, lo, c, k)
            dx = np.zeros_like(x.data)
            for i in range(k):
                dx[:, :, i:i + stride * lo:stride] += dcols[:, :, :, i].transpose(0, 2, 1)
            x._accumulate(dx)

    out = _make(out_data, (x, kernel, bias), backward)
    if squeeze:
        out = reshape(out, out.data.shape[1:])
    return out


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k*k max pooling; spatial dims must divide by k."""
    squeeze = x.data.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.data.shape)
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ValueError(f"maxpool2d requires dims divisible by {k}, got {h}x{w}")
    ho, wo = h // k, w // k
    patches = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = patches.argmax(axis=-1)
    out_data = np.take_along_axis(patches, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dpatches = np.zeros_like(patches)
        np.put_along_axis(dpatches, idx[..., None], g[..., None], axis=-1)
        dx = dpatches.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        x._accumulate(dx)

    out = _make(out_data, (x,), backward)
    if squeeze:
        out = reshape(out, out.data.shape[1:])
    return out


# -- network nonlinearities ----------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, stabilized by a (shift-invariant) max subtraction."""
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = exp(x - shift)
    return e / e.sum(axis=axis, keepdims=True)


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Vector nonlinearity v = (|s|^2 / (1 + |s|^2)) * s / |s| along ``axis``.

    The norm in the division carries a 1e-12 offset so the zero vector maps
    to the zero vector; the backward rule is guarded the same way.
    """
    n2 = np.sum(s.data * s.data, axis=axis, keepdims=True)
    norm = np.sqrt(n2)
    denom = (1.0 + n2) * (norm + SQUASH_EPS)
    scale = n2 / denom
    out_data = scale * s.data

    def backward(g):
        if not s.requires_grad:
            return
        # v = scale(n2) * s with n2 = sum(s^2); chain through both factors.
        # d(denom)/d(n2) uses 1/(2*(norm+eps)) so the zero vector stays finite.
        ddenom = (norm + SQUASH_EPS) + (1.0 + n2) / (2.0 * (norm + SQUASH_EPS))
        dscale = (denom - n2 * ddenom) / (denom * denom)
        gs = np.sum(g * s.data, axis=axis, keepdims=True)
        s._accumulate(g * scale + 2.0 * s.data * gs * dscale)

    return _make(out_data, (s,), backward)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over all axes except the channel axis (1).

    Train mode normalizes with the batch's population statistics and updates
    the running buffers in place; eval mode uses the running buffers.
    """
    channels = x.data.shape[1]
    if gamma.data.shape != (channels,) or beta.data.shape != (channels,):
        raise ValueError(
            f"batchnorm scale/shift must have shape ({channels},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = (1, channels) + (1,) * (x.data.ndim - 2)
    if training:
        if x.data.shape[0] == 0:
            raise ValueError("batchnorm cannot compute statistics over an empty batch")
        mu = tensor_mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = tensor_mean(centered * centered, axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(channels)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(channels)
        xhat = centered / sqrt(var + eps)
    else:
        mu = Tensor(running_mean.reshape(bshape).astype(x.data.dtype))
        istd = Tensor((1.0 / np.sqrt(running_var + eps)).reshape(bshape).astype(x.data.dtype))
        xhat = (x - mu) * istd
    return reshape(gamma, bshape) * xhat + reshape(beta, bshape)
