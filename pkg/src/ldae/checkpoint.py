"""Versioned binary container for model state.

One self-describing little-endian format serves every artifact that must
round-trip bit-exactly: 'LDAE' magic, a format version, a container kind
tag, then a scalar metadata section and a named float64 tensor section.
Readers reject unknown magic or versions instead of guessing.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"LDAE"
FORMAT_VERSION = 1

_SCALAR_INT = 0
_SCALAR_FLOAT = 1
_SCALAR_STR = 2


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"{self.path}: truncated container")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def read_str(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def save_container(
    path, kind: str, scalars: dict[str, int | float | str], tensors: dict[str, np.ndarray]
) -> None:
    """Write scalars and float64 tensors under a container kind tag.

    Iteration order of both dicts is preserved in the file; loading
    restores it, so save/load round trips are byte-identical.
    """
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(kind)]

    parts.append(struct.pack("<I", len(scalars)))
    for name, value in scalars.items():
        parts.append(_pack_str(name))
        if isinstance(value, bool):
            raise ValueError(f"scalar {name!r}: store bools as ints")
        if isinstance(value, (int, np.integer)):
            parts.append(struct.pack("<bq", _SCALAR_INT, int(value)))
        elif isinstance(value, (float, np.floating)):
            parts.append(struct.pack("<bd", _SCALAR_FLOAT, float(value)))
        elif isinstance(value, str):
            parts.append(struct.pack("<b", _SCALAR_STR) + _pack_str(value))
        else:
            raise ValueError(f"scalar {name!r} has unsupported type {type(value)}")

    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        if not isinstance(arr, np.ndarray) or arr.dtype != np.float64:
            raise ValueError(f"tensor {name!r} must be float64, got {getattr(arr, 'dtype', type(arr))}")
        if arr.ndim < 1:
            raise ValueError(f"tensor {name!r} must have ndim >= 1")
        a = np.ascontiguousarray(arr)
        parts.append(_pack_str(name))
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}q", *a.shape))
        parts.append(a.astype("<f8", copy=False).tobytes())

    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_container(path, expect_kind: str | None = None):
    """Read a container back as (kind, scalars, tensors)."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(4) != MAGIC:
        raise ValueError(f"{path}: bad magic, not a model container")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    kind = r.read_str()
    if expect_kind is not None and kind != expect_kind:
        raise ValueError(f"{path}: container kind {kind!r}, expected {expect_kind!r}")

    scalars: dict[str, int | float | str] = {}
    (n_scalars,) = r.unpack("<I")
    for _ in range(n_scalars):
        name = r.read_str()
        (code,) = r.unpack("<b")
        if code == _SCALAR_INT:
            (scalars[name],) = r.unpack("<q")
        elif code == _SCALAR_FLOAT:
            (scalars[name],) = r.unpack("<d")
        elif code == _SCALAR_STR:
            scalars[name] = r.read_str()
        else:
            raise ValueError(f"{path}: unknown scalar type code {code}")

    tensors: dict[str, np.ndarray] = {}
    (n_tensors,) = r.unpack("<I")
    for _ in range(n_tensors):
        name = r.read_str()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}q") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = r.take(8 * size)
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    if r.pos != len(r.data):
        raise ValueError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return kind, scalars, tensors
