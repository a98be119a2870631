"""Versioned, read-only parameter snapshots shared between learner and actors."""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ministar.errors import MinistarError


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def freeze(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    frozen = {}
    for name, arr in params.items():
        copy = np.array(arr, copy=True)
        copy.setflags(write=False)
        frozen[name] = copy
    return frozen


@dataclass(frozen=True)
class Snapshot:
    version: int
    params: Mapping[str, np.ndarray]

    def digest(self) -> str:
        return params_digest(self.params)


class ParamStore:
    """Publishes numbered snapshots; readers always get a complete one.

    Version 0 is the initial parameters. Only the most recent `keep`
    versions stay retrievable by number.
    """

    def __init__(self, params: Mapping[str, np.ndarray], keep: int = 8):
        self._lock = threading.Lock()
        self._keep = keep
        first = Snapshot(0, freeze(params))
        self._history: dict[int, Snapshot] = {0: first}
        self._latest = first

    def publish(self, params: Mapping[str, np.ndarray]) -> Snapshot:
        frozen = freeze(params)
        with self._lock:
            snap = Snapshot(self._latest.version + 1, frozen)
            self._history[snap.version] = snap
            for old in sorted(self._history)[:-self._keep]:
                del self._history[old]
            self._latest = snap
        return snap

    def latest(self) -> Snapshot:
        with self._lock:
            return self._latest

    @property
    def version(self) -> int:
        return self.latest().version

    def get(self, version: int) -> Snapshot:
        with self._lock:
            try:
                return self._history[version]
            except KeyError:
                raise MinistarError(f"snapshot version {version} is no longer held") from None
