"""Parametric layers: convolution bank, multi-head attention, layer
normalization, bidirectional LSTM, dense layers, and the Adam optimizer.

Layers hold their parameters as requires-grad tensors and expose
``parameters()`` as (name, tensor) pairs; forward passes build the
gradient tape through the autodiff primitives.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    limit = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


class Dense:
    """Per-frame affine map [T, in] -> [T, out] with optional activation."""

    def __init__(self, in_dim: int, out_dim: int, activation=None, rng=None):
        if activation not in (None, "tanh", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.weight = uniform_init(rng, (in_dim, out_dim), in_dim)
        self.bias = uniform_init(rng, (out_dim,), in_dim)

    def parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def forward(self, x: Tensor) -> Tensor:
        y = ad.add(ad.matmul(x, self.weight), self.bias)
        if self.activation == "tanh":
            return ad.tanh(y)
        if self.activation == "relu":
            return ad.relu(y)
        return y


class Conv1DLayer:
    """Length-preserving 1-D convolution branch (zero same-padding)."""

    def __init__(self, kernel_size: int, in_channels: int, out_channels: int, rng=None):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ShapeError(f"kernel size must be odd and positive, got {kernel_size}")
        self.kernel_size = kernel_size
        self.in_channels = in_channels
        self.out_channels = out_channels
        fan_in = in_channels * kernel_size
        self.weight = uniform_init(rng, (out_channels, in_channels, kernel_size), fan_in)
        self.bias = uniform_init(rng, (out_channels,), fan_in)

    def parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight, self.bias, padding="same")


class ConvBank:
    """Parallel multi-scale convolution branches concatenated by ascending
    kernel size; output is [T, len(kernel_sizes) * channels_per_branch]."""

    def __init__(self, in_channels: int, channels_per_branch: int,
                 kernel_sizes=(1, 3, 5, 7, 9), rng=None):
        self.kernel_sizes = tuple(sorted(kernel_sizes))
        self.branches = [
            Conv1DLayer(k, in_channels, channels_per_branch, rng=rng)
            for k in self.kernel_sizes
        ]

    def parameters(self):
        for k, branch in zip(self.kernel_sizes, self.branches):
            for name, p in branch.parameters():
                yield f"k{k}.{name}", p

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[0] < 1:
            raise ShapeError("conv bank: input has no frames")
        return ad.concat([branch.forward(x) for branch in self.branches], axis=1)


class LayerNorm:
    """Per-frame normalization over the feature axis with learned gain/offset."""

    def __init__(self, dim: int, epsilon: float = 1e-5):
        self.dim = dim
        self.epsilon = epsilon
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.offset = Tensor(np.zeros(dim), requires_grad=True)

    def parameters(self):
        yield "gain", self.gain
        yield "offset", self.offset

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.dim:
            raise ShapeError(f"layer norm: expected feature dim {self.dim}, got {x.data.shape[-1]}")
        mu = ad.tmean(x, axis=-1, keepdims=True)
        centered = ad.sub(x, mu)
        var = ad.tmean(ad.square(centered), axis=-1, keepdims=True)
        normed = ad.div(centered, ad.sqrt(ad.add(var, self.epsilon)))
        return ad.add(ad.mul(normed, self.gain), self.offset)


class MultiHeadAttention:
    """Scaled dot-product self-attention with per-head projections fused into
    [model_dim, heads * head_dim] matrices, one output projection, and a
    residual add."""

    def __init__(self, model_dim: int = 512, heads: int = 8, head_dim: int = 64, rng=None):
        if heads * head_dim != model_dim:
            raise ShapeError(f"model dim {model_dim} must equal heads*head_dim = {heads * head_dim}")
        self.model_dim = model_dim
        self.heads = heads
        self.head_dim = head_dim
        self.wq = uniform_init(rng, (model_dim, model_dim), model_dim)
        self.wk = uniform_init(rng, (model_dim, model_dim), model_dim)
        self.wv = uniform_init(rng, (model_dim, model_dim), model_dim)
        self.wo = uniform_init(rng, (model_dim, model_dim), model_dim)

    def parameters(self):
        yield "wq", self.wq
        yield "wk", self.wk
        yield "wv", self.wv
        yield "wo", self.wo

    def forward(self, x: Tensor, return_weights: bool = False):
        if x.data.shape[-1] != self.model_dim:
            raise ShapeError(f"attention: expected feature dim {self.model_dim}, got {x.data.shape[-1]}")
        q_all = ad.matmul(x, self.wq)
        k_all = ad.matmul(x, self.wk)
        v_all = ad.matmul(x, self.wv)
        scale = 1.0 / math.sqrt(self.head_dim)
        contexts = []
        weights = []
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            q = ad.narrow(q_all, 1, lo, hi)
            k = ad.narrow(k_all, 1, lo, hi)
            v = ad.narrow(v_all, 1, lo, hi)
            att = ad.softmax(ad.mul(ad.matmul(q, ad.transpose(k)), scale))
            weights.append(att)
            contexts.append(ad.matmul(att, v))
        out = ad.add(x, ad.matmul(ad.concat(contexts, axis=1), self.wo))
        if return_weights:
            return out, weights
        return out


class AttentionEncoder:
    """Chained attention layers followed by a single layer norm; produces the
    global feature view of the input sequence."""

    def __init__(self, model_dim: int = 512, layers: int = 6, heads: int = 8,
                 head_dim: int = 64, rng=None):
        self.model_dim = model_dim
        self.layers = [MultiHeadAttention(model_dim, heads, head_dim, rng=rng) for _ in range(layers)]
        self.norm = LayerNorm(model_dim)

    def parameters(self):
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters():
                yield f"attn{i}.{name}", p
        for name, p in self.norm.parameters():
            yield f"norm.{name}", p

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x)
        return self.norm.forward(x)


class _LSTMCell:
    """Single-direction LSTM with standard input/forget/output gates and tanh
    candidate; gate blocks are ordered (i, f, g, o) in the fused matrices."""

    def __init__(self, input_dim: int, hidden: int, rng=None):
        self.input_dim = input_dim
        self.hidden = hidden
        self.wx = uniform_init(rng, (input_dim, 4 * hidden), input_dim)
        self.wh = uniform_init(rng, (hidden, 4 * hidden), hidden)
        self.bias = uniform_init(rng, (4 * hidden,), hidden)

    def parameters(self):
        yield "wx", self.wx
        yield "wh", self.wh
        yield "bias", self.bias

    def run(self, x: Tensor) -> Tensor:
        return ad.lstm_sequence(x, self.wx, self.wh, self.bias, self.hidden)


class BLSTMLayer:
    """Bidirectional LSTM: per frame the forward state and the backward state
    (the forward cell run on the time-reversed sequence, re-reversed) are
    concatenated, giving [T, 2 * hidden]."""

    def __init__(self, input_dim: int, hidden: int = 150, rng=None):
        self.input_dim = input_dim
        self.hidden = hidden
        self.fw = _LSTMCell(input_dim, hidden, rng=rng)
        self.bw = _LSTMCell(input_dim, hidden, rng=rng)

    def parameters(self):
        for name, p in self.fw.parameters():
            yield f"fw.{name}", p
        for name, p in self.bw.parameters():
            yield f"bw.{name}", p

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.input_dim:
            raise ShapeError(f"blstm: expected input dim {self.input_dim}, got {x.data.shape[-1]}")
        forward_states = self.fw.run(x)
        backward_states = ad.flip(self.bw.run(ad.flip(x, axis=0)), axis=0)
        return ad.concat([forward_states, backward_states], axis=1)


class Adam:
    """Adam with bias correction; update is lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(self, params: dict[str, Tensor], learning_rate: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = dict(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"adam: trainable parameter {name!r} has no gradient")
            g = p.grad
            m = self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
