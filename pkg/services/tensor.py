"""
Dense reverse-mode autodiff over numpy arrays.

Only the operations the detector needs are provided: elementwise arithmetic, matmul,
reductions, log-sum-exp, convolution (cross-correlation), 2x2 max pooling, global
average pooling, dense layers and batch normalization. Every op has an exact backward.

Tensors default to float32; `checking_mode()` switches new tensors to float64 for
finite-difference gradient checks.
"""
import contextlib
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.validation import ValidationError, check_shape

_default_dtype: ContextVar = ContextVar("default_dtype", default=np.float32)
_grad_enabled: ContextVar = ContextVar("grad_enabled", default=True)


def get_default_dtype():
    return _default_dtype.get()


@contextlib.contextmanager
def checking_mode():
    """64-bit tensors for gradient checks"""
    token = _default_dtype.set(np.float64)
    try:
        yield
    finally:
        _default_dtype.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: Tuple["Tensor", ...] = (), _backward: Optional[Callable] = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar: float):
        return mul(self, 1.0 / scalar)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or get_default_dtype()))


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    grad = grad.astype(tensor.data.dtype, copy=False)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = _grad_enabled.get() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor that requires it, from a scalar loss"""
    if loss.data.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")

    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# elementwise / algebra

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, Tensor) else None)

    def _backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), _backward)


def neg(a: Tensor) -> Tensor:
    def _backward(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), _backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def _backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), _backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValidationError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), _backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), _backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tensor_sum(a, axis, keepdims), 1.0 / float(count))


def reshape(a: Tensor, shape) -> Tensor:
    def _backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), _backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def _backward(g):
        _accumulate(x, g * mask)

    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), _backward)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along `axis` with the max subtracted first"""
    peak = np.max(x.data, axis=axis, keepdims=True)
    shifted = np.exp(x.data - peak)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = np.squeeze(peak + np.log(total), axis=axis)

    def _backward(g):
        _accumulate(x, np.expand_dims(g, axis) * shifted / total)

    return _result(out, (x,), _backward)


def append_constant(x: Tensor, value: float = 1.0) -> Tensor:
    """Append a constant component to the last axis: (..., k) -> (..., k + 1)"""
    pad = np.full(x.shape[:-1] + (1,), value, dtype=x.dtype)

    def _backward(g):
        _accumulate(x, g[..., :-1])

    return _result(np.concatenate([x.data, pad], axis=-1), (x,), _backward)


# layers

def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValidationError(f"dense: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ValidationError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
        out = add(out, bias)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) with (F, C, kh, kw) filters"""
    check_shape("conv2d input", x.shape, (None,) * 4)
    check_shape("conv2d weight", weight.shape, (None,) * 4)
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValidationError(f"conv2d: input has {c} channels, weight expects {cw}")
    if stride < 1 or padding < 0:
        raise ValidationError(f"conv2d: stride must be >= 1 and padding >= 0")
    if bias is not None and bias.shape != (f,):
        raise ValidationError(f"conv2d: bias {bias.shape} does not match {f} filters")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValidationError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kernel = weight.data.reshape(f, c * kh * kw)
    out = (cols @ kernel.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        _accumulate(weight, (g2.T @ cols).reshape(weight.shape))
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (g2 @ kernel).reshape(n, ho, wo, c, kh, kw)
            dpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    dpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            _accumulate(x, dpad[:, :, padding:padding + h, padding:padding + w])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, _backward)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pooling; an odd trailing row or column is dropped"""
    check_shape("max_pool2x2 input", x.shape, (None,) * 4)
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ValidationError(f"max_pool2x2: input {h}x{w} too small")
    blocks = (x.data[:, :, :2 * h2, :2 * w2]
              .reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4))
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        routed = np.zeros_like(blocks)
        np.put_along_axis(routed, idx[..., None], g[..., None], axis=-1)
        full = np.zeros_like(x.data)
        full[:, :, :2 * h2, :2 * w2] = (routed.reshape(n, c, h2, w2, 2, 2)
                                        .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2))
        _accumulate(x, full)

    return _result(out, (x,), _backward)


def global_avg_pool(x: Tensor) -> Tensor:
    check_shape("global_avg_pool input", x.shape, (None,) * 4)
    return tensor_mean(x, axis=(2, 3))


@dataclass
class RunningStats:
    """Batch-norm buffers; updated in training mode, read in inference mode"""
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1) -> "RunningStats":
        dtype = get_default_dtype()
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats,
              training: bool, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of (N, C, H, W)"""
    check_shape("batchnorm input", x.shape, (None,) * 4)
    channels = x.shape[1]
    for name, shape in (("gamma", gamma.shape), ("beta", beta.shape), ("running mean", running.mean.shape)):
        check_shape(f"batchnorm {name}", shape, (channels,))

    axes = (0, 2, 3)
    count = x.data.size // channels
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / max(count - 1, 1)
        running.mean[...] = (1 - running.momentum) * running.mean + running.momentum * mu
        running.var[...] = (1 - running.momentum) * running.var + running.momentum * unbiased
    else:
        mu, var = running.mean, running.var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def _backward(g):
        _accumulate(beta, g.sum(axis=axes))
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            total = dxhat.sum(axis=axes, keepdims=True)
            dot = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = (inv_std[None, :, None, None] / count) * (count * dxhat - total - xhat * dot)
        else:
            dx = dxhat * inv_std[None, :, None, None]
        _accumulate(x, dx)

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), _backward)
