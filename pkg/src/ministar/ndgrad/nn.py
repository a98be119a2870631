"""Layers built from ndgrad ops.

Modules own Parameters as attributes (directly, or inside child modules
and lists of modules). `parameters()` flattens them into dotted names in
a stable order, which is also the order checkpoints use.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ministar.errors import DimensionError
from ministar.ndgrad import ops
from ministar.ndgrad.tensor import Parameter, Tensor, default_dtype


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


class Module:
    training: bool = True

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name in sorted(vars(self)):
            value = getattr(self, name)
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def parameters(self) -> dict[str, Parameter]:
        params: dict[str, Parameter] = {}
        for name in sorted(vars(self)):
            value = getattr(self, name)
            if isinstance(value, Parameter):
                params[name] = value
        for prefix, child in self.named_children():
            for name, p in child.parameters().items():
                params[f"{prefix}.{name}"] = p
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise DimensionError(f"state mismatch: missing={missing[:3]} unexpected={unexpected[:3]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(he_uniform(rng, (n_in, n_out), n_in))
        if bias:
            self.bias = Parameter(np.zeros(n_out, dtype=default_dtype()))
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class EntityConv1d(Linear):
    """Kernel-size-1 convolution over the entity axis of an [N, d] tensor."""

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2:
            raise DimensionError(f"entity conv expects [N, d], got {x.shape}")
        return super().__call__(x)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        self.weight = Parameter(he_uniform(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
        self.bias = Parameter(np.zeros(c_out, dtype=default_dtype()))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1):
        self.weight = Parameter(he_uniform(rng, (c_in, c_out, kernel, kernel), c_in))
        self.bias = Parameter(np.zeros(c_out, dtype=default_dtype()))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d_transpose(x, self.weight, self.bias, self.stride)


class LayerNorm(Module):
    def __init__(self, size: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(size, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(size, dtype=default_dtype()))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class LSTMCell(Module):
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, forget_bias: float = 1.0):
        self.hidden = hidden
        self.w_ih = Parameter(he_uniform(rng, (n_in, 4 * hidden), n_in))
        self.w_hh = Parameter(he_uniform(rng, (hidden, 4 * hidden), hidden))
        bias = np.zeros(4 * hidden, dtype=default_dtype())
        bias[hidden:2 * hidden] = forget_bias
        self.bias = Parameter(bias)

    def zero_state(self) -> tuple[Tensor, Tensor]:
        zeros = np.zeros(self.hidden, dtype=default_dtype())
        return Tensor(zeros), Tensor(zeros.copy())

    def __call__(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        h, c = state
        return ops.lstm_cell(x, h, c, self.w_ih, self.w_hh, self.bias)


class LSTM(Module):
    """Stacked LSTM cells; state is a tuple of (h, c) per layer."""

    def __init__(self, n_in: int, hidden: int, layers: int, rng: np.random.Generator):
        self.cells = [LSTMCell(n_in if i == 0 else hidden, hidden, rng) for i in range(layers)]

    def zero_state(self) -> tuple[tuple[Tensor, Tensor], ...]:
        return tuple(cell.zero_state() for cell in self.cells)

    def step(self, x: Tensor, state) -> tuple[Tensor, tuple[tuple[Tensor, Tensor], ...]]:
        new_state = []
        for cell, layer_state in zip(self.cells, state):
            h, c = cell(x, layer_state)
            new_state.append((h, c))
            x = h
        return x, tuple(new_state)


class GLU(Module):
    """Gated linear unit: sigmoid(linear(context)) gates the input before an output linear."""

    def __init__(self, input_size: int, context_size: int, output_size: int, rng: np.random.Generator):
        self.gate = Linear(context_size, input_size, rng)
        self.out = Linear(input_size, output_size, rng)

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        return self.out(ops.mul(ops.sigmoid(self.gate(context)), x))


class FiLM(Module):
    """Feature-wise scale and shift of a [C, H, W] map from a conditioning vector."""

    def __init__(self, channels: int, cond_size: int, rng: np.random.Generator):
        self.channels = channels
        self.proj = Linear(cond_size, 2 * channels, rng)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[0] != self.channels:
            raise DimensionError(f"FiLM over {self.channels} channels got {x.shape}")
        gb = self.proj(cond)
        gamma = ops.reshape(ops.index(gb, slice(0, self.channels)), (self.channels, 1, 1))
        beta = ops.reshape(ops.index(gb, slice(self.channels, 2 * self.channels)), (self.channels, 1, 1))
        return ops.add(ops.mul(x, gamma), beta)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise DimensionError(f"{d_model} features do not split into {heads} heads")
        self.heads = heads
        self.d_head = d_model // heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor, valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Self-attention over rows of x [N, d]; invalid rows are never attended to.

        Returns the output and the attention weights [heads, N, N].
        """
        valid = np.asarray(valid, dtype=bool)
        if x.ndim != 2 or valid.shape != (x.shape[0],):
            raise DimensionError(f"attention input {x.shape} with mask {valid.shape}")
        additive = Tensor(np.where(valid, 0.0, ops.ATTENTION_MASK_VALUE)[None, :], dtype=x.dtype)
        q, k, v = self.q(x), self.k(x), self.v(x)
        scale = 1.0 / math.sqrt(self.d_head)
        outs, weights = [], []
        for h in range(self.heads):
            cols = (slice(None), slice(h * self.d_head, (h + 1) * self.d_head))
            qh, kh, vh = ops.index(q, cols), ops.index(k, cols), ops.index(v, cols)
            scores = ops.add(ops.mul(ops.matmul(qh, ops.transpose(kh)), scale), additive)
            attn = ops.softmax(scores, axis=-1)
            weights.append(attn.data)
            outs.append(ops.matmul(attn, vh))
        return self.out(ops.concat(outs, axis=1)), np.stack(weights)


class TransformerLayer(Module):
    def __init__(self, d_model: int, heads: int, ff_size: int, rng: np.random.Generator, dropout: float = 0.0):
        self.attention = MultiHeadAttention(d_model, heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.ff_in = Linear(d_model, ff_size, rng)
        self.ff_out = Linear(ff_size, d_model, rng)
        self.norm2 = LayerNorm(d_model)
        self.dropout = dropout
        self._rng = rng

    def __call__(self, x: Tensor, valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Returns the layer output and its attention weights [heads, N, N]."""
        attended, weights = self.attention(x, valid)
        x = self.norm1(ops.add(x, ops.dropout(attended, self.dropout, self._rng, self.training)))
        ff = self.ff_out(ops.relu(self.ff_in(x)))
        return self.norm2(ops.add(x, ops.dropout(ff, self.dropout, self._rng, self.training))), weights


class ResBlock1D(Module):
    """Two pre-norm linear layers around a skip connection."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(size)
        self.fc1 = Linear(size, size, rng)
        self.norm2 = LayerNorm(size)
        self.fc2 = Linear(size, size, rng)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.fc1(ops.relu(self.norm1(x)))
        y = self.fc2(ops.relu(self.norm2(y)))
        return ops.add(x, y)


class ResBlock2D(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv2(ops.relu(self.conv1(x)))
        return ops.relu(ops.add(x, y))
