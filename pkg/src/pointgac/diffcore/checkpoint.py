"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"PGACCKPT"
    version    u32
    digest     32 bytes (sha256 of the run config)
    count      u32
    count x block:
        name_len u16, name utf-8
        ndim     u8, dims u64 * ndim
        values   float64 little-endian, C order
"""
import struct

import numpy as np

from ..fileio import atomic_write_bytes

MAGIC = b"PGACCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(blocks, digest):
    """Serialize an ordered mapping of name -> array."""
    if len(digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), digest, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(payload):
    """Inverse of :func:`encode`; returns ``(blocks, digest, version)``."""
    view = memoryview(payload)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", view, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = bytes(view[12:44])
    (count,) = struct.unpack_from("<I", view, 44)
    pos = 48
    blocks = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", view, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(view, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            blocks[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(view):
        raise CheckpointError("trailing bytes after last block")
    return blocks, digest, version


def save(path, blocks, digest):
    atomic_write_bytes(path, encode(blocks, digest))


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
