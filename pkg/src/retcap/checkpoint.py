"""Binary tensor container shared by all trained components.

Layout (all integers unsigned 64-bit little-endian, values float64 LE)::

    b"RCKPT1" | count | count x (name_len | utf-8 name | rank | dims... | values...)
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"RCKPT1"
_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def dumps(tensors):
    parts = [MAGIC, _U64.pack(len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(_U64.pack(len(raw)))
        parts.append(raw)
        parts.append(_U64.pack(arr.ndim))
        parts.extend(_U64.pack(d) for d in arr.shape)
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(data):
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    pos = len(MAGIC)

    def u64():
        nonlocal pos
        if pos + 8 > len(data):
            raise CheckpointError("truncated checkpoint")
        (v,) = _U64.unpack_from(data, pos)
        pos += 8
        return v

    out = {}
    for _ in range(u64()):
        n = u64()
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        shape = tuple(u64() for _ in range(u64()))
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + size > len(data):
            raise CheckpointError(f"truncated values for tensor {name!r}")
        out[name] = np.frombuffer(data[pos:pos + size], dtype="<f8").reshape(shape).astype(np.float64)
        pos += size
    if pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


FINGERPRINT_PREFIX = "meta.fingerprint."


def with_fingerprint(tensors, fingerprint):
    """Tensors plus an empty marker tensor whose name carries ``fingerprint``."""
    out = {FINGERPRINT_PREFIX + fingerprint: np.zeros(0)}
    out.update(tensors)
    return out


def fingerprint_of(tensors):
    names = [k[len(FINGERPRINT_PREFIX):] for k in tensors if k.startswith(FINGERPRINT_PREFIX)]
    return names[0] if names else None
