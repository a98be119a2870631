"""Adam and global-norm clipping over named parameter dicts."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from ministar.ndgrad.tensor import Parameter


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale every gradient by the same factor so their joint L2 norm is at most `max_norm`.

    Returns the clipped gradients and the norm before clipping.
    """
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {name: (g.astype(np.float64) * scale).astype(g.dtype) for name, g in grads.items()}, norm


class Adam:
    """Adam with bias correction.

    `step` rebinds each parameter to a freshly allocated array, so arrays
    handed out earlier (for example inside a published snapshot) never change.
    """

    def __init__(self, params: Mapping[str, Parameter], lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data, dtype=np.float64) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data, dtype=np.float64) for name, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self._m[name] = self.beta1 * self._m[name] + (1 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1 - self.beta2) * np.square(g, dtype=np.float64)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)
