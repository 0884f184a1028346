"""Base/merged weight files for the ``merge`` command.

Same conventions as the adapter format: little-endian, float32 payloads,
entries sorted bytewise by name::

    magic "LWTS" | version u32 = 1 | n u32
    per entry: name_len u16 | name | rows u32 | cols u32 | rows*cols f32
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, TruncationError, UnsupportedVersionError
from .linalg import as_matrix

MAGIC = b"LWTS"
VERSION = 1


def dump_weights(weights: Mapping[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<4sII", MAGIC, VERSION, len(weights))]
    for name in sorted(weights, key=str.encode):
        w = np.asarray(weights[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", *w.shape))
        parts.append(np.ascontiguousarray(w).tobytes())
    return b"".join(parts)


def load_weights(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncationError(f"weights file truncated at offset {pos}", offset=pos)
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    magic, version, n = struct.unpack("<4sII", take(12))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    out = {}
    for _ in range(n):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        payload = np.frombuffer(take(4 * rows * cols), dtype="<f4")
        out[name] = as_matrix(payload.reshape(rows, cols), name)
    if pos != len(view):
        raise CorruptionError(f"{len(view) - pos} trailing bytes in weights file")
    return out


def read_weights(path) -> dict[str, np.ndarray]:
    return load_weights(Path(path).read_bytes())


def write_weights(path, weights: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dump_weights(weights))
