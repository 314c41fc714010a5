"""Transaction-private shadow copies of objects.

A shadow is laid out as ``[canary][object header][payload][canary]``.  Both
canaries carry the same per-process random 64-bit value; a write that runs
past either end of the object is caught when the transaction commits.

Modified ranges are tracked relative to the start of the object header and
kept sorted and coalesced.
"""

from __future__ import annotations

import bisect
import secrets
import struct

import numpy as np

from .checksum import adler32_replace, object_checksum_from_image
from .zone import OBJ_HDR, OBJ_HEADER_SIZE, ObjectRef

CANARY_SIZE = 8
CANARY = secrets.token_bytes(CANARY_SIZE)
_CSUM = struct.Struct("<I")
CHECKSUM_FIELD = (12, 16)


class MicroBuffer:
    __slots__ = ("ref", "offset", "size", "raw", "orig", "allocated", "_starts", "_ends", "freed")

    def __init__(self, ref: ObjectRef, image, allocated: bool = False):
        self.ref = ref
        self.offset = ref.offset
        self.size = len(image)
        self.raw = bytearray(CANARY) + bytearray(image) + bytearray(CANARY)
        # committed image, used for checksum deltas and for diffing detached buffers
        self.orig = bytes(image)
        self.allocated = allocated
        self.freed = False
        self._starts: list[int] = []
        self._ends: list[int] = []
        if allocated:
            self._add(0, self.size)

    # -- views -------------------------------------------------------------------
    @property
    def payload_size(self) -> int:
        return self.size - OBJ_HEADER_SIZE

    @property
    def data(self) -> memoryview:
        """Writable view of the payload, bounds-checked like any memoryview."""
        lo = CANARY_SIZE + OBJ_HEADER_SIZE
        return memoryview(self.raw)[lo:lo + self.payload_size]

    def pointer(self) -> memoryview:
        """View from the payload start to the end of the shadow.

        It models a raw pointer: the trailing canary is reachable through it,
        so an overrun corrupts the canary instead of raising.
        """
        return memoryview(self.raw)[CANARY_SIZE + OBJ_HEADER_SIZE:]

    @property
    def type_id(self) -> int:
        return OBJ_HDR.unpack_from(self.raw, CANARY_SIZE)[1]

    @property
    def stored_checksum(self) -> int:
        return OBJ_HDR.unpack_from(self.raw, CANARY_SIZE)[2]

    def image(self) -> bytes:
        return bytes(self.raw[CANARY_SIZE:CANARY_SIZE + self.size])

    def canary_ok(self) -> bool:
        return (self.raw[:CANARY_SIZE] == CANARY
                and self.raw[CANARY_SIZE + self.size:] == CANARY)

    # -- modified ranges ---------------------------------------------------------------
    @property
    def modified(self) -> bool:
        return bool(self._starts)

    @property
    def ranges(self) -> list[tuple[int, int]]:
        """Coalesced modified ranges as ``(start, end)`` relative to the header."""
        return list(zip(self._starts, self._ends))

    def add_range(self, off: int, n: int) -> memoryview:
        """Mark payload bytes ``[off, off+n)`` as modified and return a view of them."""
        if off < 0 or n < 0 or off + n > self.payload_size:
            raise IndexError(f"range [{off}, {off + n}) outside a {self.payload_size}-byte payload")
        if n:
            self._add(OBJ_HEADER_SIZE + off, OBJ_HEADER_SIZE + off + n)
        return self.data[off:off + n]

    def _add(self, s: int, e: int) -> None:
        starts, ends = self._starts, self._ends
        i = bisect.bisect_left(ends, s)
        j = bisect.bisect_right(starts, e)
        if i < j:
            s = min(s, starts[i])
            e = max(e, ends[j - 1])
        starts[i:j] = [s]
        ends[i:j] = [e]

    def mark_diff(self, bridge: int = 8) -> int:
        """Mark every payload byte that differs from the committed image; returns bytes marked."""
        lo = CANARY_SIZE + OBJ_HEADER_SIZE
        cur = np.frombuffer(self.raw, dtype=np.uint8)[lo:lo + self.payload_size]
        orig = np.frombuffer(self.orig, dtype=np.uint8)[OBJ_HEADER_SIZE:]
        idx = np.flatnonzero(cur != orig)
        if idx.size == 0:
            return 0
        # equal gaps shorter than ``bridge`` are absorbed so scattered edits log as one entry
        breaks = np.flatnonzero(np.diff(idx) > bridge)
        starts = np.concatenate(([idx[0]], idx[breaks + 1]))
        ends = np.concatenate((idx[breaks], [idx[-1]])) + 1
        for s, e in zip(starts.tolist(), ends.tolist()):
            self._add(OBJ_HEADER_SIZE + s, OBJ_HEADER_SIZE + e)
        return int(idx.size)

    # -- checksum ------------------------------------------------------------------
    def refresh_checksum(self) -> None:
        """Bring the header checksum up to date with the shadow contents."""
        base = CANARY_SIZE
        if self.allocated:
            value = object_checksum_from_image(memoryview(self.raw)[base:base + self.size])
        else:
            value = OBJ_HDR.unpack_from(self.orig, 0)[2]
            total = self.size - 4  # the checksummed stream omits the 4-byte field
            raw = self.raw
            orig = self.orig
            for s, e in zip(self._starts, self._ends):
                # map object offsets to stream offsets by skipping [12, 16)
                for a, b in ((s, min(e, 12)), (max(s, 16), e)):
                    if a < b:
                        so = a if a < 12 else a - 4
                        value = adler32_replace(value, total, so, orig[a:b], raw[base + a:base + b])
        _CSUM.pack_into(self.raw, CANARY_SIZE + 12, value)
        self._add(*CHECKSUM_FIELD)

    def checksum_consistent(self) -> bool:
        return self.stored_checksum == object_checksum_from_image(self.image())


class TxBufferIndex:
    """Offset-keyed index of the micro-buffers opened by one transaction."""

    __slots__ = ("_by_off",)

    def __init__(self):
        self._by_off: dict[int, MicroBuffer] = {}

    def get(self, off: int) -> MicroBuffer | None:
        return self._by_off.get(off)

    def put(self, buf: MicroBuffer) -> None:
        self._by_off[buf.offset] = buf

    def pop(self, off: int) -> MicroBuffer | None:
        return self._by_off.pop(off, None)

    def __iter__(self):
        return iter(list(self._by_off.values()))

    def __len__(self) -> int:
        return len(self._by_off)

    def clear(self) -> None:
        self._by_off.clear()
