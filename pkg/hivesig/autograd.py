"""
Dense tensor engine with reverse-mode differentiation.

Each op computes its forward value with numpy and, when any input requires a
gradient, records a closure that pushes the upstream gradient back into its
inputs. `Tensor.backward` replays those closures in reverse topological order.

Layer kernels: conv2d, maxpool2d, batchnorm, dense, relu, dropout, flatten,
plus softmax / cross-entropy and the RMSprop optimizer with its step schedule.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidProbability, ShapeMismatch

Array = np.ndarray
SeedLike = Union[int, np.random.Generator, None]


class _Mode(threading.local):
    grad_enabled = True
    check_finite = False


_mode = _Mode()


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording a graph."""
    previous = _mode.grad_enabled
    _mode.grad_enabled = False
    try:
        yield
    finally:
        _mode.grad_enabled = previous


@contextmanager
def detect_anomalies() -> Iterator[None]:
    """Raise FloatingPointError as soon as an op produces NaN or inf."""
    previous = _mode.check_finite
    _mode.check_finite = True
    try:
        yield
    finally:
        _mode.check_finite = previous


class Tensor:
    """n-d array with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[Array] = None
        self._parents: Sequence["Tensor"] = ()
        self._backward: Optional[Callable[[Array], None]] = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: Array) -> None:
        if g.shape != self.data.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} does not match tensor {self.data.shape}")
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad: Optional[Array] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable tensor's `.grad`."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)

        order, seen = [], set()

        def visit(node: "Tensor") -> None:
            if id(node) in seen:
                return
            seen.add(id(node))
            for parent in node._parents:
                visit(parent)
            order.append(node)

        visit(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            other = Tensor(np.asarray(other, dtype=self.dtype))
        if other.shape != self.shape and other.data.size != 1 and self.data.size != 1:
            raise ShapeMismatch(f"cannot add shapes {self.shape} and {other.shape}")
        a, b = self, other

        def backward(g: Array) -> None:
            for t in (a, b):
                if t.requires_grad:
                    t._accumulate(g if t.shape == g.shape else np.asarray(g.sum()).reshape(t.shape))

        return _result(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __mul__(self, scalar: float) -> "Tensor":
        if isinstance(scalar, Tensor):
            raise TypeError("only scalar multiplication is supported")
        a = self

        def backward(g: Array) -> None:
            a._accumulate(g * scalar)

        return _result(a.data * scalar, (a,), backward)

    __rmul__ = __mul__


def _result(data: Array, parents: Sequence[Tensor], backward: Callable[[Array], None]) -> Tensor:
    if _mode.check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced")
    track = _mode.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Layer kernels
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIkk weights (im2col + matmul)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeMismatch(f"conv2d input has {c} channels, weight expects {ci}")
    if bias is not None and as_tensor(bias).shape != (o,):
        raise ShapeMismatch(f"conv2d bias must have shape ({o},)")
    if h + 2 * pad < kh or w + 2 * pad < kw or stride < 1:
        raise ShapeMismatch(f"kernel {kh}x{kw} does not fit padded input {h}x{w} (pad {pad})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    w2 = weight.data.reshape(o, -1)
    out = cols @ w2.T
    if bias is not None:
        out = out + as_tensor(bias).data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))

    def backward(g: Array) -> None:
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if weight.requires_grad:
            weight._accumulate((g2.T @ cols).reshape(weight.shape))
        if bias is not None and parents[2].requires_grad:
            parents[2]._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            x._accumulate(dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp)

    return _result(np.ascontiguousarray(out), parents, backward)


def maxpool2d(x: Tensor, k: int = 2, stride: Optional[int] = None) -> Tensor:
    """Non-overlapping k x k max pooling; ties route the gradient to the first index."""
    x = as_tensor(x)
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ShapeMismatch(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if stride != k or h % k or w % k:
        raise ShapeMismatch(f"maxpool2d needs H, W divisible by k={k} with stride k, got {h}x{w}")
    ho, wo = h // k, w // k
    blocks = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g: Array) -> None:
        dblocks = np.zeros_like(blocks)
        np.put_along_axis(dblocks, idx, g[..., None], axis=-1)
        x._accumulate(dblocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))

    return _result(out, (x,), backward)


@dataclass
class RunningStats:
    """Per-channel running mean/variance; arrays are updated in place."""

    mean: Array
    var: Array
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype))

    def update(self, batch_mean: Array, batch_var: Array, count: int) -> None:
        unbiased = batch_var * (count / (count - 1)) if count > 1 else batch_var
        self.mean *= 1.0 - self.momentum
        self.mean += self.momentum * batch_mean.astype(self.mean.dtype)
        self.var *= 1.0 - self.momentum
        self.var += self.momentum * unbiased.astype(self.var.dtype)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: Optional[RunningStats] = None,
    training: bool = True,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over (N, C) or (N, C, H, W) input.

    Training mode normalizes with batch statistics and updates `running`;
    eval mode normalizes with `running`.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 4):
        raise ShapeMismatch(f"batchnorm expects (N, C) or (N, C, H, W), got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeMismatch(f"batchnorm parameters must have shape ({channels},)")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, channels) if x.ndim == 2 else (1, channels, 1, 1)
    count = x.data.size // channels

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running is not None:
            running.update(mu, var, count)
    else:
        if running is None:
            raise ShapeMismatch("eval-mode batchnorm needs running statistics")
        mu, var = running.mean, running.var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g: Array) -> None:
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                dx = (
                    count * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                ) * (inv_std.reshape(bshape) / count)
            else:
                dx = dxhat * inv_std.reshape(bshape)
            x._accumulate(dx)

    return _result(out, (x, gamma, beta), backward)


batchnorm2d = batchnorm


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x W^T + b with W of shape (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeMismatch(f"dense bias must have shape ({weight.shape[0]},)")
        out = out + bias.data
        parents.append(bias)

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _result(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g: Array) -> None:
        x._accumulate(g * mask)

    return _result(x.data * mask, (x,), backward)


def dropout(x: Tensor, p: float, rng: SeedLike = None, training: bool = True) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p); identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    gen = np.random.default_rng(rng)
    mask = ((gen.random(x.shape) >= p) / (1.0 - p)).astype(x.dtype)

    def backward(g: Array) -> None:
        x._accumulate(g * mask)

    return _result(x.data * mask, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g: Array) -> None:
        x._accumulate(g.reshape(shape))

    return _result(x.data.reshape(shape[0], -1), (x,), backward)


# ---------------------------------------------------------------------------
# Probabilities and losses
# ---------------------------------------------------------------------------

def softmax(z, axis: int = -1) -> Array:
    """Max-shifted softmax over `axis`."""
    z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if z.shape[axis] == 0:
        raise ShapeMismatch("softmax over an empty class axis")
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def one_hot(labels, n_classes: int, dtype=np.float64) -> Array:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(probs, target, eps: float = 1e-12) -> float:
    """-sum(target * log(probs)), averaged over the batch for 2-D input."""
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if probs.shape != target.shape:
        raise ShapeMismatch(f"probs {probs.shape} and target {target.shape} differ")
    per_sample = -(target * np.log(np.maximum(probs, eps))).sum(axis=-1)
    return float(per_sample.mean()) if per_sample.ndim else float(per_sample)


def softmax_cross_entropy(logits: Tensor, target, temperature: float = 1.0, eps: float = 1e-12) -> Tensor:
    """Differentiable cross_entropy(softmax(logits / T), target), batch-averaged."""
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.float64)
    if logits.ndim != 2 or logits.shape != target.shape:
        raise ShapeMismatch(f"logits {logits.shape} and target {target.shape} differ")
    probs = softmax(logits.data.astype(np.float64) / temperature)
    loss = cross_entropy(probs, target, eps)
    n = logits.shape[0]

    def backward(g: Array) -> None:
        grad = (probs * target.sum(axis=-1, keepdims=True) - target) / (temperature * n)
        logits._accumulate((float(g) * grad).astype(logits.dtype))

    return _result(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def rmsprop_step(
    params: Dict[str, Array],
    grads: Dict[str, Array],
    state: Dict[str, Array],
    lr: float,
    rho: float = 0.9,
    eps: float = 1e-8,
) -> None:
    """In-place RMSprop update of every parameter that has a gradient."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        cache = state.get(name)
        if cache is None:
            cache = state[name] = np.zeros_like(p)
        elif cache.shape != p.shape:
            raise ShapeMismatch(f"{name}: optimizer state {cache.shape} vs parameter {p.shape}")
        cache *= rho
        cache += (1.0 - rho) * g * g
        p -= (lr * g / (np.sqrt(cache) + eps)).astype(p.dtype)


def lr_schedule(epoch: int, lr0: float, factor: float = 0.5, interval: int = 6) -> float:
    """Step decay: lr0 * factor^floor(epoch / interval)."""
    return lr0 * factor ** (epoch // interval)


def finite_difference_grad(f: Callable[[Array], float], x: Array, h: float = 1e-5) -> Array:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad
