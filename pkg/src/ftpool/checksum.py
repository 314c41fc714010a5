"""Adler32, full and incremental.

The full checksum is zlib's.  ``adler32_replace`` patches an existing sum when
a byte range changes, at a cost proportional to the range rather than the
buffer: a byte at position ``i`` of an ``n``-byte buffer contributes ``v`` to
``a`` and ``(n - i) * v`` to ``b``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

MOD = 65521
_NUMPY_MIN = 96
_HDR = struct.Struct("<QI")


@dataclass(frozen=True)
class Adler32State:
    a: int = 1
    b: int = 0

    @classmethod
    def from_sum(cls, value: int) -> "Adler32State":
        return cls(value & 0xFFFF, (value >> 16) & 0xFFFF)

    @property
    def value(self) -> int:
        return (self.b << 16) | self.a


def adler32(data, start: int = 1) -> int:
    return zlib.adler32(data, start)


def adler32_replace(old_sum: int, total_len: int, range_offset: int, old_bytes, new_bytes) -> int:
    """Checksum of the buffer after ``old_bytes`` at ``range_offset`` become ``new_bytes``."""
    n = len(new_bytes)
    if len(old_bytes) != n:
        raise ValueError("old and new ranges differ in length")
    if range_offset < 0 or range_offset + n > total_len:
        raise ValueError("replaced range outside the buffer")
    if n == 0:
        return old_sum
    a = old_sum & 0xFFFF
    b = (old_sum >> 16) & 0xFFFF
    if n < _NUMPY_MIN:
        da = db = 0
        w = total_len - range_offset
        for o, v in zip(old_bytes, new_bytes):
            d = v - o
            if d:
                da += d
                db += w * d
            w -= 1
    else:
        d = np.frombuffer(new_bytes, dtype=np.uint8).astype(np.int64)
        d -= np.frombuffer(old_bytes, dtype=np.uint8)
        # weights reduced first so products stay far below 2**63
        w = np.arange(total_len - range_offset, total_len - range_offset - n, -1, dtype=np.int64) % MOD
        da = int(d.sum())
        db = int(np.dot(w, d))
    a = (a + da) % MOD
    b = (b + db) % MOD
    return (b << 16) | a


OBJ_CHECKSUM_PREFIX = 12  # size (u64) + type_id (u32); the u32 checksum follows


def object_checksum(size: int, type_id: int, payload) -> int:
    """Adler32 over (size, type_id, payload); the checksum field is not part of it."""
    return zlib.adler32(payload, zlib.adler32(_HDR.pack(size, type_id)))


def object_checksum_from_image(image) -> int:
    """Checksum of a raw object image laid out as header (16 B) + payload."""
    mv = memoryview(image)
    return zlib.adler32(mv[16:], zlib.adler32(mv[:OBJ_CHECKSUM_PREFIX]))
