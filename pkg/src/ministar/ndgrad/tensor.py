"""Dense tensors and the tape that records how they were computed.

A Tensor is a thin wrapper over an ndarray. Ops executed while a GradTape
is active, and touching at least one tensor that requires gradients, are
appended to that tape; `GradTape.gradient` then walks the records in
reverse and accumulates adjoints.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ministar.errors import DimensionError, NonFiniteError

_local = threading.local()

Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def default_dtype() -> type:
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Switch the dtype new tensors and parameters are created with.

    Gradient checks run under `precision(np.float64)`; everything else
    stays float32.
    """
    previous = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return np.array(self.data, copy=True)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


class Parameter(Tensor):
    """A trainable leaf; always requires gradients."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


@dataclass
class _Record:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Backward


class GradTape:
    """Records differentiable ops inside a `with` block.

    >>> with GradTape() as tape:
    ...     loss = ops.sum(ops.mul(w, w))
    >>> (dw,) = tape.gradient(loss, [w])
    """

    def __init__(self) -> None:
        self._records: list[_Record] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Backward) -> None:
        self._records.append(_Record(out, parents, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Adjoints of `target` with respect to each source.

        A source the target does not depend on gets an exact zero array of
        its own shape. Non-scalar targets are seeded with ones.
        """
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for rec in reversed(self._records):
            g = grads.get(id(rec.out))
            if g is None:
                continue
            for parent, pg in zip(rec.parents, rec.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(f"gradient shape {pg.shape} does not match {parent.shape}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        out = []
        for src in sources:
            g = grads.get(id(src))
            if g is None and src is target:
                g = np.ones_like(src.data)
            out.append(np.zeros_like(src.data) if g is None else g.astype(src.dtype, copy=False))
        return out


def _tape_stack() -> list[GradTape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype if like is not None else None)


def make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Backward, op: str) -> Tensor:
    """Wrap an op result, check it is finite and record it on the active tape."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._record(out, parents, backward)
    return out
