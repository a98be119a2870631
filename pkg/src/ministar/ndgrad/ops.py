"""Differentiable ops.

Every op takes Tensors (or plain arrays/scalars, which become constants),
computes its result with numpy, and hands a backward closure to
`tensor.make`. Reductions accumulate in float64 and cast back.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ministar.errors import DimensionError, NoValidActionError, TargetIndexError
from ministar.ndgrad.tensor import Tensor, as_tensor, make

ATTENTION_MASK_VALUE = -1e9


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis or k is None for k in parts)


# ===== ELEMENTWISE =====

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return make(a.data / b.data, (a, b), backward, "div")


def neg(x) -> Tensor:
    x = as_tensor(x)
    return make(-x.data, (x,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return make(np.where(on, x.data, 0).astype(x.dtype), (x,), lambda g: (g * on,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(0, -x.data)).astype(x.dtype)
    return make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return make(out, (x,), lambda g: (g / x.data,), "log")


def arctan(x: Tensor) -> Tensor:
    return make(np.arctan(x.data), (x,), lambda g: (g / (1 + x.data * x.data),), "arctan")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is True with a constant."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return make(out, (x,), lambda g: (np.where(mask, 0, g).astype(g.dtype),), "masked_fill")


# ===== SHAPES AND REDUCTIONS =====

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return div(sum(x, axis=axis, keepdims=keepdims), float(max(count, 1)))


def reshape(x: Tensor, shape) -> Tensor:
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def index(x: Tensor, key) -> Tensor:
    out = np.array(x.data[key], copy=True)

    def backward(g):
        full = np.zeros_like(x.data)
        if _is_basic_index(key):
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return make(out, (x,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat of nothing")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return make(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("stack of nothing")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make(out, tensors, backward, "stack")


# ===== LINEAR ALGEBRA =====

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b for x of shape [in] or [n, in], with w stored as [in, out]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear input {x.shape} does not fit weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    x2 = x.data.reshape(-1, w.shape[0])

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        grads = [(g2 @ w.data.T).reshape(x.shape), x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0, dtype=np.float64).astype(b.dtype))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, backward, "linear")


# ===== SOFTMAX FAMILY =====

def _full_mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    return np.broadcast_to(np.asarray(mask, dtype=bool), shape)


def masked_softmax_np(logits: np.ndarray, mask: np.ndarray | None = None, temperature: float = 1.0) -> np.ndarray:
    """Probabilities over the last axis with masked entries exactly zero."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    mask = _full_mask(mask, logits.shape)
    if not np.all(mask.any(axis=-1)):
        raise NoValidActionError("softmax mask has no valid entry")
    z = np.where(mask, logits.astype(np.float64) / temperature, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(logits.dtype)


def masked_log_softmax_np(logits: np.ndarray, mask: np.ndarray | None = None, temperature: float = 1.0) -> np.ndarray:
    """Log-probabilities over the last axis; masked entries are reported as 0."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    mask = _full_mask(mask, logits.shape)
    if not np.all(mask.any(axis=-1)):
        raise NoValidActionError("softmax mask has no valid entry")
    z = np.where(mask, logits.astype(np.float64) / temperature, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    return np.where(mask, z - lse, 0.0).astype(logits.dtype)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted.astype(np.float64))
    out = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (x,), backward, "softmax")


def softmax_with_temperature(logits: Tensor, temperature: float = 1.0, mask=None) -> Tensor:
    """softmax(logits / temperature) over the last axis restricted to `mask`."""
    probs = masked_softmax_np(logits.data, mask, temperature)

    def backward(g):
        return ((probs * (g - (g * probs).sum(axis=-1, keepdims=True))) / temperature,)

    return make(probs, (logits,), backward, "softmax_with_temperature")


def log_softmax(logits: Tensor, mask=None, temperature: float = 1.0) -> Tensor:
    out = masked_log_softmax_np(logits.data, mask, temperature)
    full = _full_mask(mask, logits.shape)

    def backward(g):
        probs = np.where(full, np.exp(out), 0.0)
        g = np.where(full, g, 0.0)
        return ((g - probs * g.sum(axis=-1, keepdims=True)).astype(logits.dtype) / temperature,)

    return make(out, (logits,), backward, "log_softmax")


def cross_entropy(logits: Tensor, target: int, mask=None, temperature: float = 1.0) -> Tensor:
    """-log softmax(logits)[target] for a single 1-D logit vector."""
    if logits.ndim != 1:
        raise DimensionError(f"cross_entropy expects 1-D logits, got {logits.shape}")
    target = int(target)
    if not 0 <= target < logits.shape[0]:
        raise TargetIndexError(f"target {target} outside {logits.shape[0]} classes")
    if mask is not None and not bool(np.asarray(mask)[target]):
        raise TargetIndexError(f"target {target} is masked out")
    logp = masked_log_softmax_np(logits.data, mask, temperature)
    probs = masked_softmax_np(logits.data, mask, temperature)

    def backward(g):
        grad = probs.copy()
        grad[target] -= 1
        return (grad * g / temperature,)

    return make(np.asarray(-logp[target], dtype=logits.dtype), (logits,), backward, "cross_entropy")


def one_hot(idx: int, n: int, dtype=None) -> Tensor:
    if not 0 <= int(idx) < n:
        raise TargetIndexError(f"one_hot index {idx} outside {n} classes")
    out = np.zeros(n, dtype=dtype or np.float32)
    out[int(idx)] = 1
    return Tensor(out, dtype=dtype)


# ===== CONVOLUTION =====

def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """[C, H, W] -> [Ho, Wo, C, k, k] view of every k x k patch."""
    view = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    return view[:, ::stride, ::stride].transpose(1, 2, 0, 3, 4)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int], k: int, stride: int) -> np.ndarray:
    """Scatter-add [Ho, Wo, C, k, k] patches back into a [C, H, W] canvas."""
    ho, wo = cols.shape[:2]
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, i, j].transpose(2, 0, 1)
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [C, H, W] with w [C_out, C, k, k]."""
    if x.ndim != 3 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d input {x.shape} / weight {w.shape}")
    c_out, c_in, k, _ = w.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"conv2d expects {c_in} channels, got {x.shape[0]}")
    hp, wp = x.shape[1] + 2 * padding, x.shape[2] + 2 * padding
    if k > hp or k > wp:
        raise DimensionError(f"kernel {k} larger than padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    patches = _windows(xp, k, stride)
    ho, wo = patches.shape[:2]
    cols = patches.reshape(ho * wo, c_in * k * k)
    w2 = w.data.reshape(c_out, -1)
    out = (cols @ w2.T).T.reshape(c_out, ho, wo)
    if b is not None:
        out = out + b.data[:, None, None]

    def backward(g):
        g2 = g.reshape(c_out, -1).T
        gcols = (g2 @ w2).reshape(ho, wo, c_in, k, k)
        gx = _col2im(gcols, (c_in, hp, wp), k, stride)
        if padding:
            gx = gx[:, padding:hp - padding, padding:wp - padding]
        grads = [np.ascontiguousarray(gx), (g2.T @ cols).reshape(w.shape)]
        if b is not None:
            grads.append(g.sum(axis=(1, 2), dtype=np.float64).astype(b.dtype))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, backward, "conv2d")


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed convolution of x [C, H, W] with w [C, C_out, k, k], no padding.

    Output side is (H - 1) * stride + k. With matching shapes this is the
    adjoint of `conv2d` using the same weight tensor.
    """
    if x.ndim != 3 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d_transpose input {x.shape} / weight {w.shape}")
    c_in, c_out, k, _ = w.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"conv2d_transpose expects {c_in} channels, got {x.shape[0]}")
    h, wd = x.shape[1:]
    ho, wo = (h - 1) * stride + k, (wd - 1) * stride + k
    x2 = x.data.reshape(c_in, h * wd)
    w2 = w.data.reshape(c_in, c_out * k * k)
    cols = (x2.T @ w2).reshape(h, wd, c_out, k, k)
    out = _col2im(cols, (c_out, ho, wo), k, stride)
    if b is not None:
        out = out + b.data[:, None, None]

    def backward(g):
        gcols = _windows(g, k, stride).reshape(h * wd, c_out * k * k)
        grads = [(gcols @ w2.T).T.reshape(x.shape), (x2 @ gcols).reshape(w.shape)]
        if b is not None:
            grads.append(g.sum(axis=(1, 2), dtype=np.float64).astype(b.dtype))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, backward, "conv2d_transpose")


# ===== NORMALISATION, DROPOUT, RECURRENCE =====

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise DimensionError(f"layer_norm over {x.shape[-1]} features with gamma {gamma.shape}")
    n = x.shape[-1]
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x64.var(axis=-1, keepdims=True) + eps)
    xhat = (x64 - mu) * inv
    out = (xhat * gamma.data + beta.data).astype(x.dtype)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g.astype(np.float64) * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        ggamma = (g * xhat).sum(axis=lead) if lead else g * xhat
        gbeta = g.sum(axis=lead) if lead else g
        return gx.astype(x.dtype), ggamma.astype(gamma.dtype), np.asarray(gbeta, dtype=beta.dtype)

    return make(out, (x, gamma, beta), backward, "layer_norm")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    if p <= 0 or not training:
        return x
    if not p < 1:
        raise ValueError(f"dropout probability must be below 1, got {p}")
    rng = rng or np.random.default_rng()
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1 - p)
    return make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step; gates are laid out as input, forget, cell, output."""
    hidden = h.shape[-1]
    if c.shape != h.shape or w_hh.shape != (hidden, 4 * hidden) or w_ih.shape[1] != 4 * hidden:
        raise DimensionError(f"lstm state {h.shape}/{c.shape} does not fit weights {w_ih.shape}, {w_hh.shape}")
    gates = add(linear(x, w_ih, b), linear(h, w_hh))
    i = sigmoid(index(gates, (Ellipsis, slice(0, hidden))))
    f = sigmoid(index(gates, (Ellipsis, slice(hidden, 2 * hidden))))
    g = tanh(index(gates, (Ellipsis, slice(2 * hidden, 3 * hidden))))
    o = sigmoid(index(gates, (Ellipsis, slice(3 * hidden, 4 * hidden))))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


# ===== OPERATOR SUGAR =====

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = lambda self, other: div(self, other)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.__getitem__ = lambda self, key: index(self, key)
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 else shape)
Tensor.sum = lambda self, axis=None, keepdims=False: sum(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)
