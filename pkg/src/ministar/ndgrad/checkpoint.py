"""Binary parameter checkpoints.

Layout: magic, format version, parameter count, then per parameter its
name and shape, then every payload as little-endian float32 in name order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ministar.errors import FormatError

MAGIC = b"NDGC"
FORMAT_VERSION = 1


def encode_params(params: Mapping[str, np.ndarray]) -> bytes:
    names = sorted(params)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(names)))
    for name in names:
        raw = name.encode("utf-8")
        shape = np.shape(params[name])
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
    for name in names:
        buf.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return buf.getvalue()


def decode_params(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise FormatError("not an ndgrad checkpoint")
    try:
        version, count = struct.unpack_from("<II", view, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"checkpoint format {version} is not supported")
        pos = 12
        header: list[tuple[str, tuple[int, ...]]] = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", view, pos)
            name = bytes(view[pos + 2:pos + 2 + n]).decode("utf-8")
            pos += 2 + n
            (ndim,) = struct.unpack_from("<B", view, pos)
            shape = struct.unpack_from(f"<{ndim}I", view, pos + 1)
            pos += 1 + 4 * ndim
            header.append((name, tuple(shape)))
        out = {}
        for name, shape in header:
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(view):
                raise FormatError(f"checkpoint truncated inside {name}")
            out[name] = np.frombuffer(view, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise FormatError(f"checkpoint header is corrupt: {exc}") from exc
    if pos != len(view):
        raise FormatError("trailing bytes after checkpoint payload")
    return out


def save_params(path: str | Path, params: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_params(params))
    tmp.replace(path)
    return path


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    return decode_params(Path(path).read_bytes())
