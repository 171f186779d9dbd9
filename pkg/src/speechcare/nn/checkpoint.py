"""Binary parameter checkpoints.

Layout: magic ``SCNN1\\0`` followed by, per parameter, ``u32`` name length,
UTF-8 name, ``u32`` rows, ``u32`` cols and ``rows*cols`` little-endian f32
values in row-major order. Vectors are stored as a single row.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from speechcare.errors import FormatError

MAGIC = b"SCNN1\x00"


def _as_matrix(value: np.ndarray) -> np.ndarray:
    value = np.asarray(value)
    if value.ndim == 2:
        return value
    if value.ndim <= 1:
        return value.reshape(1, -1)
    return value.reshape(value.shape[0], -1)


def dumps(state: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC]
    for name, value in state.items():
        mat = _as_matrix(value)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<II", *mat.shape))
        chunks.append(np.ascontiguousarray(mat, dtype="<f4").tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise FormatError("not a parameter checkpoint (bad magic)")
    pos = len(MAGIC)
    state: dict[str, np.ndarray] = {}
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise FormatError("truncated checkpoint header")
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + n + 8 > len(blob):
            raise FormatError("truncated checkpoint entry")
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        size = rows * cols * 4
        if pos + size > len(blob):
            raise FormatError(f"truncated payload for {name!r}")
        state[name] = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float32)
        pos += size
    return state


def save(path, state: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(state))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
