"""
SGS Autodiff - minimal reverse-mode differentiation over float64 numpy arrays.

Every operation is a Function subclass:
    forward(*arrays)  -> array       (saves what backward needs on self)
    backward(grad)    -> tuple       (one gradient per parent, None if constant)

Tensor.apply records the Function as the result's context; ComputeGraph
orders the recorded nodes topologically and accumulates gradients from a
scalar loss back to every leaf.

Array layout for volumes and images is channel-first: N x C x spatial...
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sgs.errors import ConfigurationError

_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate without recording a graph (generation, evaluation metrics)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


# =============================================================================
# Tensor and graph
# =============================================================================

class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, ctx: Function | None = None) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.ctx = ctx

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        ComputeGraph(self).backward()

    # operators
    def __neg__(self) -> Tensor: return Neg.apply(self)
    def __add__(self, x) -> Tensor: return Add.apply(self, x)
    def __radd__(self, x) -> Tensor: return Add.apply(x, self)
    def __sub__(self, x) -> Tensor: return Sub.apply(self, x)
    def __rsub__(self, x) -> Tensor: return Sub.apply(x, self)
    def __mul__(self, x) -> Tensor: return Mul.apply(self, x)
    def __rmul__(self, x) -> Tensor: return Mul.apply(x, self)
    def __truediv__(self, x) -> Tensor: return Div.apply(self, x)
    def __matmul__(self, x) -> Tensor: return MatMul.apply(self, x)
    def __getitem__(self, index) -> Tensor: return Slice.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        count = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> Tensor:
        return Transpose.apply(self, axes=axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class ComputeGraph:
    """Nodes reachable from `loss`, in topological order (inputs first)."""

    def __init__(self, loss: Tensor) -> None:
        self.loss = loss
        self.order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.ctx is not None:
                for parent in node.ctx.parents:
                    if id(parent) not in visited:
                        stack.append((parent, False))

    def backward(self) -> None:
        if self.loss.data.size != 1:
            raise ConfigurationError(f"backward() needs a scalar loss, got shape {self.loss.shape}")
        grads: dict[int, np.ndarray] = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.ctx is None:
                if node.requires_grad:
                    node.grad = grad if node.grad is None else node.grad + grad
                continue
            for parent, g in zip(node.ctx.parents, node.ctx.backward(grad)):
                if g is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = g if key not in grads else grads[key] + g


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.ctx is not None


def backward(loss: Tensor, params: list[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d loss / d leaf into every requires_grad leaf; return grads for `params` if given."""
    ComputeGraph(loss).backward()
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


class Function:
    parents: tuple[Tensor, ...]

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        fn = cls()
        tensors = tuple(as_tensor(x) for x in inputs)
        fn.parents = tensors
        out = fn.forward(*[t.data for t in tensors], **kwargs)
        record = _grad_enabled and any(_needs_grad(t) for t in tensors)
        return Tensor(out, ctx=fn if record else None)

    def forward(self, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# =============================================================================
# Elementwise
# =============================================================================

class Neg(Function):
    def forward(self, x): return -x
    def backward(self, grad): return (-grad,)


class Add(Function):
    def forward(self, x, y):
        self.shapes = x.shape, y.shape
        return x + y

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, x, y):
        self.shapes = x.shape, y.shape
        return x - y

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return unbroadcast(grad * self.y, self.x.shape), unbroadcast(grad * self.x, self.y.shape)


class Div(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        return (
            unbroadcast(grad / self.y, self.x.shape),
            unbroadcast(-grad * self.x / (self.y * self.y), self.y.shape),
        )


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad): return (grad * self.out,)


class Log(Function):
    """Natural log; inputs below `floor` are clamped and pass no gradient."""

    def forward(self, x, floor: float = 0.0):
        self.x = x
        self.live = x > floor
        return np.log(np.maximum(x, floor) if floor > 0 else x)

    def backward(self, grad):
        return (np.where(self.live, grad / np.where(self.live, self.x, 1.0), 0.0),)


class Softplus(Function):
    """log(1 + e^x), evaluated stably."""

    def forward(self, x):
        self.x = x
        return np.logaddexp(0.0, x)

    def backward(self, grad):
        return (grad * _sigmoid(self.x),)


class Sigmoid(Function):
    def forward(self, x):
        self.out = _sigmoid(x)
        return self.out

    def backward(self, grad): return (grad * self.out * (1.0 - self.out),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


class LeakyReLU(Function):
    def forward(self, x, slope: float = 0.2):
        self.mask = x > 0
        self.slope = slope
        return np.where(self.mask, x, slope * x)

    def backward(self, grad): return (np.where(self.mask, grad, self.slope * grad),)


class Softmax(Function):
    def forward(self, x, axis: int = 1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


# =============================================================================
# Shape and reduction
# =============================================================================

class Sum(Function):
    def forward(self, x, axis=None, keepdims: bool = False):
        self.shape = x.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, tuple(a % len(self.shape) for a in np.atleast_1d(self.axis)))
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape=()):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad): return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, x, axes=()):
        self.axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, grad): return (np.transpose(grad, np.argsort(self.axes)),)


class Slice(Function):
    """Basic (non-fancy) indexing."""

    def forward(self, x, index=()):
        self.shape = x.shape
        self.index = index
        return x[index]

    def backward(self, grad):
        out = np.zeros(self.shape)
        out[self.index] += grad
        return (out,)


class Concat(Function):
    def forward(self, *xs, axis: int = 0):
        self.axis = axis
        self.sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class MatMul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad):
        return grad @ self.y.T, self.x.T @ grad


# =============================================================================
# Normalization
# =============================================================================

class InstanceNorm(Function):
    """Per-sample, per-channel standardization over the spatial axes (N x C x ...)."""

    def forward(self, x, eps: float = 1e-5):
        axes = tuple(range(2, x.ndim))
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        self.axes = axes
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.inv_std
        return self.xhat

    def backward(self, grad):
        axes = self.axes
        g_mean = grad.mean(axis=axes, keepdims=True)
        gx_mean = (grad * self.xhat).mean(axis=axes, keepdims=True)
        return (self.inv_std * (grad - g_mean - self.xhat * gx_mean),)


class SpectralNormalize(Function):
    """W / σ with σ = uᵀ W v for fixed power-iteration vectors u, v.

    W is viewed as a matrix (rows = shape[0]); u and v are constants, so
        dW = (G - <G, W/σ> u vᵀ) / σ
    """

    def forward(self, w, u=None, v=None):
        self.shape = w.shape
        matrix = w.reshape(w.shape[0], -1)
        self.u, self.v = u, v
        self.sigma = float(u @ matrix @ v)
        self.out = w / self.sigma
        return self.out

    def backward(self, grad):
        inner = float(np.sum(grad * self.out))
        correction = (inner * np.outer(self.u, self.v)).reshape(self.shape)
        return ((grad - correction) / self.sigma,)


def power_iteration(matrix: np.ndarray, u: np.ndarray, iterations: int = 1) -> tuple[np.ndarray, np.ndarray, float]:
    """Refresh (u, v) toward the top singular pair; returns (u, v, sigma)."""
    v = None
    for _ in range(iterations):
        v = matrix.T @ u
        v = v / max(np.linalg.norm(v), 1e-12)
        u = matrix @ v
        u = u / max(np.linalg.norm(u), 1e-12)
    return u, v, float(u @ matrix @ v)


# =============================================================================
# Convolution (N-d, channel-first)
# =============================================================================

def _offset_slices(offset: tuple[int, ...], stride: int, size: tuple[int, ...]) -> tuple[slice, ...]:
    return tuple(slice(k, k + stride * (n - 1) + 1, stride) for k, n in zip(offset, size))


class Conv(Function):
    """x: N x Cin x S..., w: Cout x Cin x K..., b: Cout."""

    def forward(self, x, w, b, stride: int = 2, padding: int = 1):
        nd = x.ndim - 2
        self.stride, self.padding = stride, padding
        self.x_shape = x.shape
        self.w = w
        pad = [(0, 0), (0, 0)] + [(padding, padding)] * nd
        xp = np.pad(x, pad)
        kernel = w.shape[2:]
        windows = sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + nd)))
        windows = windows[(slice(None), slice(None)) + (slice(None, None, stride),) * nd]
        self.windows = windows
        self.xp_shape = xp.shape
        out = np.tensordot(windows, w, axes=([1, *range(2 + nd, 2 + 2 * nd)], [1, *range(2, 2 + nd)]))
        out = np.moveaxis(out, -1, 1)
        return out + b.reshape((1, -1) + (1,) * nd)

    def backward(self, grad):
        nd = grad.ndim - 2
        out_size = grad.shape[2:]
        spatial = tuple(range(2, 2 + nd))
        gw = np.tensordot(grad, self.windows, axes=([0, *spatial], [0, *spatial]))
        gb = grad.sum(axis=(0, *spatial))
        gxp = np.zeros(self.xp_shape)
        for offset in itertools.product(*(range(k) for k in self.w.shape[2:])):
            part = np.tensordot(grad, self.w[(slice(None), slice(None)) + offset], axes=([1], [0]))
            gxp[(slice(None), slice(None)) + _offset_slices(offset, self.stride, out_size)] += np.moveaxis(part, -1, 1)
        p = self.padding
        crop = (slice(None), slice(None)) + tuple(slice(p, s - p) for s in self.xp_shape[2:])
        return gxp[crop], gw, gb


class ConvTranspose(Function):
    """x: N x Cin x S..., w: Cin x Cout x K..., b: Cout; output (S-1)·stride - 2·padding + K."""

    def forward(self, x, w, b, stride: int = 2, padding: int = 1):
        nd = x.ndim - 2
        self.stride, self.padding = stride, padding
        self.x, self.w = x, w
        kernel = w.shape[2:]
        full = tuple((s - 1) * stride + k for s, k in zip(x.shape[2:], kernel))
        out = np.zeros((x.shape[0], w.shape[1]) + full)
        for offset in itertools.product(*(range(k) for k in kernel)):
            part = np.tensordot(x, w[(slice(None), slice(None)) + offset], axes=([1], [0]))
            out[(slice(None), slice(None)) + _offset_slices(offset, stride, x.shape[2:])] += np.moveaxis(part, -1, 1)
        self.full = full
        p = padding
        out = out[(slice(None), slice(None)) + tuple(slice(p, f - p) for f in full)]
        return out + b.reshape((1, -1) + (1,) * nd)

    def backward(self, grad):
        nd = grad.ndim - 2
        p = self.padding
        spatial = tuple(range(2, 2 + nd))
        gfull = np.zeros(grad.shape[:2] + self.full)
        gfull[(slice(None), slice(None)) + tuple(slice(p, f - p) for f in self.full)] = grad
        gx = np.zeros_like(self.x)
        gw = np.zeros_like(self.w)
        in_size = self.x.shape[2:]
        for offset in itertools.product(*(range(k) for k in self.w.shape[2:])):
            window = gfull[(slice(None), slice(None)) + _offset_slices(offset, self.stride, in_size)]
            w_k = self.w[(slice(None), slice(None)) + offset]
            gx += np.moveaxis(np.tensordot(window, w_k, axes=([1], [1])), -1, 1)
            gw[(slice(None), slice(None)) + offset] = np.tensordot(self.x, window, axes=([0, *spatial], [0, *spatial]))
        gb = grad.sum(axis=(0, *spatial))
        return gx, gw, gb


# =============================================================================
# Functional helpers
# =============================================================================

def exp(x) -> Tensor: return Exp.apply(x)
def log(x, floor: float = 0.0) -> Tensor: return Log.apply(x, floor=floor)
def softplus(x) -> Tensor: return Softplus.apply(x)
def sigmoid(x) -> Tensor: return Sigmoid.apply(x)
def leaky_relu(x, slope: float = 0.2) -> Tensor: return LeakyReLU.apply(x, slope=slope)
def softmax(x, axis: int = 1) -> Tensor: return Softmax.apply(x, axis=axis)
def instance_norm(x, eps: float = 1e-5) -> Tensor: return InstanceNorm.apply(x, eps=eps)


def conv(x, w, b, stride: int = 2, padding: int = 1) -> Tensor:
    return Conv.apply(x, w, b, stride=stride, padding=padding)


def conv_transpose(x, w, b, stride: int = 2, padding: int = 1) -> Tensor:
    return ConvTranspose.apply(x, w, b, stride=stride, padding=padding)


def spectral_normalize(w, u: np.ndarray, v: np.ndarray) -> Tensor:
    return SpectralNormalize.apply(w, u=u, v=v)
