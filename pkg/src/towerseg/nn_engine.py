"""A small NumPy neural-network engine with hand-written backward passes.

Every layer caches what its backward pass needs during ``forward`` and
returns the input gradient from ``backward`` while accumulating parameter
gradients into :attr:`Tensor.grad`. Layers act on the last axis and accept
any leading shape, so ``(b, n, c)`` point batches and ``(b, c)`` global
features go through the same code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ROW_BLOCK = 256
NARROW = 8


def rowwise_matmul(x2: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x2 @ w`` where each output row is bit-identical wherever the row sits.

    BLAS picks kernels by matrix shape, so a point's features could change
    in the last bit with the point count or its position. Wide outputs are
    computed in zero-padded blocks of exactly ``ROW_BLOCK`` rows; narrow ones
    (fewer than ``NARROW`` columns) by explicit per-column accumulation.
    """
    x2 = np.ascontiguousarray(x2)
    rows, c_in = x2.shape
    c_out = w.shape[1]
    dtype = np.result_type(x2, w)
    if c_out < NARROW:
        out = np.zeros((rows, c_out), dtype=dtype)
        for i in range(c_in):
            out += x2[:, i:i + 1] * w[i]
        return out
    out = np.empty((rows, c_out), dtype=dtype)
    full = rows - rows % ROW_BLOCK
    for s in range(0, full, ROW_BLOCK):
        np.matmul(x2[s:s + ROW_BLOCK], w, out=out[s:s + ROW_BLOCK])
    if full < rows:
        buf = np.zeros((ROW_BLOCK, c_in), dtype=x2.dtype)
        buf[:rows - full] = x2[full:]
        out[full:] = (buf @ w)[:rows - full]
    return out


def batched_transform(x: np.ndarray, mats: np.ndarray) -> np.ndarray:
    """Apply one ``(d, d)`` matrix per cloud: ``(b, n, d) @ (b, d, d)``, row-stable."""
    return np.stack([rowwise_matmul(x[i], mats[i]) for i in range(len(x))])


class Tensor:
    """Dense array with a gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Layer:
    """Base class: parameters, buffers and a train/eval switch."""

    training = True

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    __call__ = forward


class Linear(Layer):
    """Affine map shared across all leading axes (a 1x1 convolution over points).

    ``input_grad=False`` skips the input gradient for layers fed by data.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 dtype=np.float32, input_grad: bool = True):
        bound = 1.0 / math.sqrt(c_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(c_in, c_out)), dtype)
        self.bias = Tensor(rng.uniform(-bound, bound, size=c_out), dtype)
        self.input_grad = input_grad
        self._x = None

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        c_in, c_out = self.weight.shape
        if x.shape[-1] != c_in:
            raise ValueError(f"linear expects {c_in} input channels on the last axis, got {x.shape[-1]}")
        self._x = x
        out = rowwise_matmul(x.reshape(-1, c_in), self.weight.data)
        out += self.bias.data
        return out.reshape(x.shape[:-1] + (c_out,))

    def backward(self, grad):
        c_in, c_out = self.weight.shape
        x2 = self._x.reshape(-1, c_in)
        g2 = grad.reshape(-1, c_out)
        self.weight.grad += x2.T @ g2
        self.bias.grad += g2.sum(axis=0)
        if not self.input_grad:
            return None
        return (g2 @ self.weight.data.T).reshape(self._x.shape)


class BatchNorm(Layer):
    """Per-channel normalisation over every axis but the last."""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = BN_MOMENTUM,
                 eps: float = BN_EPS):
        self.gamma = Tensor(np.ones(channels), dtype)
        self.beta = Tensor(np.zeros(channels), dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x):
        c = self.gamma.shape[0]
        if x.shape[-1] != c:
            raise ValueError(f"batchnorm expects {c} channels, got {x.shape[-1]}")
        x2 = x.reshape(-1, c)
        m = x2.shape[0]
        if not self.training:
            scale = self.gamma.data / np.sqrt(self.running_var + self.eps)
            shift = self.beta.data - self.running_mean * scale
            return (x2 * scale + shift).reshape(x.shape)
        if m < 2:
            raise ValueError("batchnorm in train mode needs at least 2 values per channel")
        mean = x2.mean(axis=0)
        xhat = x2 - mean
        var = np.einsum("ij,ij->j", xhat, xhat) / m
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat *= inv
        self._cache = (xhat, inv)
        mom = self.momentum
        self.running_mean *= 1 - mom
        self.running_mean += mom * mean
        self.running_var *= 1 - mom
        self.running_var += mom * var * (m / (m - 1))
        out = xhat * self.gamma.data
        out += self.beta.data
        return out.reshape(x.shape)

    def backward(self, grad):
        xhat, inv = self._cache
        c = xhat.shape[1]
        g2 = grad.reshape(-1, c)
        m = g2.shape[0]
        dgamma = np.einsum("ij,ij->j", g2, xhat)
        dbeta = g2.sum(axis=0)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        dx = g2 - dbeta / m
        dx -= xhat * (dgamma / m)
        dx *= self.gamma.data * inv
        return dx.reshape(grad.shape)


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, 0, out=x if x.flags.writeable else None)

    def backward(self, grad):
        return grad * self._mask


class BNReLU(Layer):
    """``relu(batchnorm(x))`` fused into two passes each way (train mode).

    Same parameters, buffers and results as ``BatchNorm`` then ``ReLU``.
    """

    def __init__(self, channels: int, dtype=np.float32, momentum: float = BN_MOMENTUM,
                 eps: float = BN_EPS):
        self.bn = BatchNorm(channels, dtype, momentum, eps)
        self._cache = None

    def parameters(self):
        return self.bn.parameters()

    def buffers(self):
        return self.bn.buffers()

    def forward(self, x):
        bn = self.bn
        c = bn.gamma.shape[0]
        if x.shape[-1] != c:
            raise ValueError(f"batchnorm expects {c} channels, got {x.shape[-1]}")
        if not self.training:
            scale = bn.gamma.data / np.sqrt(bn.running_var + bn.eps)
            shift = bn.beta.data - bn.running_mean * scale
            out = x * scale
            out += shift
            return np.maximum(out, 0, out=out)
        z = np.ascontiguousarray(x.reshape(-1, c))
        m = z.shape[0]
        if m < 2:
            raise ValueError("batchnorm in train mode needs at least 2 values per channel")
        mean, var = _kernels.column_moments(z)
        inv = 1.0 / np.sqrt(var + bn.eps)
        mom = bn.momentum
        bn.running_mean[...] = (1 - mom) * bn.running_mean + mom * mean
        bn.running_var[...] = (1 - mom) * bn.running_var + mom * var * (m / (m - 1))
        mean = mean.astype(z.dtype)
        inv = inv.astype(z.dtype)
        self._cache = (z, mean, inv)
        out = _kernels.bn_relu_forward(z, mean, inv, bn.gamma.data, bn.beta.data)
        return out.reshape(x.shape)

    def backward(self, grad):
        z, mean, inv = self._cache
        bn = self.bn
        g = np.ascontiguousarray(grad.reshape(z.shape))
        dz, dgamma, dbeta = _kernels.bn_relu_backward(z, g, mean, inv, bn.gamma.data, bn.beta.data)
        bn.gamma.grad += dgamma
        bn.beta.grad += dbeta
        return dz.reshape(grad.shape)


class Dropout(Layer):
    """Inverted dropout; identity in eval mode or at rate 0."""

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self.rng = rng
        self._mask = None

    def forward(self, x):
        if not self.training or self.rate == 0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._mask = keep.astype(x.dtype) / (1 - self.rate)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def parameters(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers)
                for k, v in layer.parameters().items()}

    def buffers(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers)
                for k, v in layer.buffers().items()}

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def shared_mlp(c_in: int, widths: Iterable[int], rng, dtype=np.float32, batchnorm: bool = True,
               first_input_grad: bool = True) -> Sequential:
    """Linear -> BatchNorm -> ReLU for each width (BN and ReLU fused)."""
    layers: list[Layer] = []
    for i, w in enumerate(widths):
        layers.append(Linear(c_in, w, rng, dtype, input_grad=first_input_grad or i > 0))
        layers.append(BNReLU(w, dtype) if batchnorm else ReLU())
        c_in = w
    return Sequential(layers)


# --------------------------------------------------------------------------
# set pooling and losses


class MaxPoolPoints(Layer):
    """``(b, n, c) -> (b, c)`` channel-wise maximum over points.

    The gradient goes to the first point attaining the maximum.
    """

    def __init__(self):
        self._arg = None
        self._shape = None

    def forward(self, x):
        if x.ndim != 3:
            raise ValueError("max_pool_points expects a (b, n, c) array")
        if x.shape[1] == 0:
            raise ValueError("max_pool_points needs at least one point")
        self._shape = x.shape
        best, self._arg = _kernels.max_argmax(np.ascontiguousarray(x))
        return best

    def backward(self, grad):
        return _kernels.scatter_max_grad(np.ascontiguousarray(grad), self._arg, self._shape[1])


def max_pool_points(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pool = MaxPoolPoints()
    return pool.forward(x), pool._arg


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad):
    return grad * (x > 0)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Stable log-softmax over the last axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax_backward(log_probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad - np.exp(log_probs) * grad.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ClassWeights:
    beta: float
    counts: tuple[int, ...]
    weights: np.ndarray


def class_balanced_weights(counts: Sequence[int], beta: float) -> ClassWeights:
    """Inverse effective-number weights ``(1 - beta) / (1 - beta**n)``, summing to 1."""
    counts = tuple(int(c) for c in counts)
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    if not counts or min(counts) < 1:
        raise ValueError("every class needs a count of at least 1")
    n = np.asarray(counts, dtype=np.float64)
    # 1 - beta**n computed as -expm1(n * log(beta)) to keep precision near beta -> 1
    if beta == 0:
        raw = np.ones_like(n)
    else:
        raw = (1.0 - beta) / -np.expm1(n * math.log(beta))
    weights = raw / raw.sum()
    weights.flags.writeable = False
    return ClassWeights(beta, counts, weights)


def weighted_nll_loss(log_probs: np.ndarray, targets: np.ndarray,
                      weights: ClassWeights | np.ndarray) -> tuple[float, np.ndarray]:
    """Weighted mean negative log-likelihood and its gradient w.r.t. ``log_probs``.

    ``log_probs`` is ``(m, k)``; the loss is ``sum w_t * -log p_t / sum w_t``.
    """
    w = weights.weights if isinstance(weights, ClassWeights) else np.asarray(weights)
    m, k = log_probs.shape
    if len(w) != k:
        raise ValueError(f"{k} classes but {len(w)} weights")
    targets = np.asarray(targets).reshape(-1)
    if len(targets) != m:
        raise ValueError("one target per row required")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ValueError("target index out of range")
    wt = w[targets].astype(log_probs.dtype)
    denom = wt.sum()
    picked = log_probs[np.arange(m), targets]
    loss = float(-(wt * picked).sum() / denom)
    grad = np.zeros_like(log_probs)
    grad[np.arange(m), targets] = -wt / denom
    return loss, grad


# --------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    best_loss: float = math.inf
    bad_epochs: int = 0
    patience: int = 10
    decay: float = 0.5
    min_improvement: float = 1e-6


def adam_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """One bias-corrected Adam update using each tensor's ``grad``, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} differs from parameter {name} {p.shape}")
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (state.lr * update).astype(p.data.dtype)


def plateau_schedule(state: OptimizerState, val_loss: float) -> OptimizerState:
    """Halve the learning rate after ``patience`` epochs without improvement."""
    if val_loss <= state.best_loss - state.min_improvement:
        state.best_loss = val_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.lr *= state.decay
            state.bad_epochs = 0
    return state
