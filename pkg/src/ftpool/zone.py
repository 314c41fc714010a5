"""Zone geometry, object references and the persistent allocator.

A zone is a stack of ``rows`` chunk rows.  Rows ``0 .. rows-2`` hold data and
the last row holds parity.  Data chunks are numbered contiguously across data
rows, so a large object may wrap from one row into the next.  The first
``meta_chunks`` chunks of row 0 hold one fixed-size :class:`ChunkMeta` record
per data chunk; those records are ordinary data-row bytes and are therefore
covered by parity.

The allocator keeps a volatile mirror of the committed chunk records plus
per-transaction reservations.  Nothing here writes to the store: commits turn
allocation intents into record images that the transaction layer logs and
applies.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from functools import cached_property
from enum import IntEnum
from typing import NamedTuple

from .checksum import adler32
from .errors import InvalidObject, LayoutError, OutOfSpace

OBJ_HEADER_SIZE = 16
OBJ_HDR = struct.Struct("<QII")  # size, type_id, checksum
MIN_CLASS = 64
_CM_HEAD = struct.Struct("<IIII")  # state, slot_size, run, reserved
_U32 = struct.Struct("<I")


class ObjectRef(NamedTuple):
    """Durable object identifier: low 64 bits of the pool uuid + header offset."""

    pool_uuid_lo: int
    offset: int

    SIZE = 16

    def pack(self) -> bytes:
        return struct.pack("<QQ", self.pool_uuid_lo, self.offset)

    @classmethod
    def unpack(cls, data, at: int = 0) -> "ObjectRef":
        return cls(*struct.unpack_from("<QQ", data, at))

    @property
    def is_null(self) -> bool:
        return self.offset == 0


NULL_REF = ObjectRef(0, 0)


class ChunkState(IntEnum):
    FREE = 0
    RUN = 1
    LARGE_LEAD = 2
    LARGE_CONT = 3
    RESERVED = 4


def size_class(size: int) -> int:
    """Payload capacity handed out for a request of ``size`` bytes."""
    c = MIN_CLASS
    while c < size:
        c <<= 1
    return c


def _align8(n: int) -> int:
    return (n + 7) & ~7


def chunk_record_size(chunk_size: int) -> int:
    max_slots = chunk_size // (MIN_CLASS + OBJ_HEADER_SIZE)
    return _align8(_CM_HEAD.size + (max_slots + 7) // 8 + 8)


@dataclass(frozen=True)
class ZoneGeometry:
    zone_id: int
    base: int
    rows: int
    chunks_per_row: int
    chunk_size: int

    def __post_init__(self):
        if self.rows < 2:
            raise LayoutError("a zone needs at least one data row plus the parity row")
        if self.chunk_size % 4096 or self.base % 4096:
            raise LayoutError("zone base and chunk size must be page aligned")
        if self.meta_chunks >= self.data_chunks:
            raise LayoutError("zone too small to hold its own chunk metadata")

    @cached_property
    def row_size(self) -> int:
        return self.chunks_per_row * self.chunk_size

    @cached_property
    def size(self) -> int:
        return self.rows * self.row_size

    @cached_property
    def end(self) -> int:
        return self.base + self.size

    @cached_property
    def data_rows(self) -> int:
        return self.rows - 1

    @cached_property
    def data_end(self) -> int:
        return self.base + self.data_rows * self.row_size

    @cached_property
    def parity_base(self) -> int:
        return self.data_end

    @cached_property
    def data_chunks(self) -> int:
        return self.data_rows * self.chunks_per_row

    @cached_property
    def record_size(self) -> int:
        return chunk_record_size(self.chunk_size)

    @cached_property
    def meta_chunks(self) -> int:
        return -(-self.data_chunks * self.record_size // self.chunk_size)

    @cached_property
    def bitmap_bytes(self) -> int:
        return self.record_size - _CM_HEAD.size - 8

    def contains(self, off: int) -> bool:
        return self.base <= off < self.end

    def in_data(self, off: int) -> bool:
        return self.base <= off < self.data_end

    def row_of(self, off: int) -> int:
        return (off - self.base) // self.row_size

    def column_of(self, off: int) -> int:
        return (off - self.base) % self.row_size

    def parity_offset(self, off: int) -> int:
        return self.parity_base + (off - self.base) % self.row_size

    def chunk_offset(self, idx: int) -> int:
        return self.base + idx * self.chunk_size

    def chunk_index(self, off: int) -> int:
        return (off - self.base) // self.chunk_size

    def record_offset(self, idx: int) -> int:
        return self.base + idx * self.record_size

    def split_rows(self, off: int, n: int):
        """Split ``[off, off+n)`` into pieces that never cross a row boundary."""
        out = []
        while n > 0:
            room = self.row_size - (off - self.base) % self.row_size
            k = min(room, n)
            out.append((off, k))
            off += k
            n -= k
        return out

    def page_column(self, off: int) -> list[int]:
        """Offsets of every page (data rows then parity) in ``off``'s page column."""
        col = self.column_of(off) & ~4095
        return [self.base + r * self.row_size + col for r in range(self.rows)]


def locate(zones, ref: ObjectRef, pool_size: int):
    """Map a reference to its store offset; ``None`` for the null reference."""
    if ref.is_null:
        return None
    if not 0 < ref.offset < pool_size:
        raise InvalidObject(f"offset 0x{ref.offset:x} outside the pool")
    for z in zones:
        if z.contains(ref.offset):
            if not z.in_data(ref.offset):
                raise InvalidObject(f"offset 0x{ref.offset:x} lies in zone {z.zone_id}'s parity row")
            return ref.offset
    raise InvalidObject(f"offset 0x{ref.offset:x} is not inside any zone")


@dataclass
class ChunkMeta:
    state: ChunkState = ChunkState.FREE
    slot_size: int = 0
    run: int = 0
    bits: int = 0

    def pack(self, record_size: int) -> bytes:
        nbm = record_size - _CM_HEAD.size - 8
        body = _CM_HEAD.pack(self.state, self.slot_size, self.run, 0) + self.bits.to_bytes(nbm, "little")
        return body + _U32.pack(adler32(body)) + b"\0\0\0\0"

    @classmethod
    def unpack(cls, rec) -> "ChunkMeta":
        state, slot, run, _ = _CM_HEAD.unpack_from(rec, 0)
        bits = int.from_bytes(rec[_CM_HEAD.size:len(rec) - 8], "little")
        return cls(ChunkState(state), slot, run, bits)

    @staticmethod
    def valid(rec) -> bool:
        body = rec[:len(rec) - 8]
        return _U32.unpack_from(rec, len(rec) - 8)[0] == adler32(body) and rec[0] <= ChunkState.RESERVED


class _Chunk:
    __slots__ = ("meta", "reserved", "claimed", "pending_slot")

    def __init__(self, meta: ChunkMeta):
        self.meta = meta
        self.reserved = 0          # slot bits held by uncommitted transactions
        self.claimed = False       # whole chunk held by an uncommitted large alloc or log extent
        self.pending_slot = 0      # slot size of a run being formed by uncommitted allocations


@dataclass(frozen=True)
class AllocIntent:
    kind: str        # "slot", "free_slot", "large", "free_large"
    chunk: int
    bit: int = 0
    slot_size: int = 0
    count: int = 1


class ZoneAllocator:
    """Volatile allocator state for one zone, rebuilt from chunk records at open."""

    def __init__(self, geom: ZoneGeometry, records: list[ChunkMeta]):
        self.geom = geom
        self.lock = threading.RLock()
        self.chunks = [_Chunk(m) for m in records]
        # per slot size: chunks that may still have a free slot (dict as ordered set)
        self._avail: dict[int, dict[int, None]] = {}
        self._free_cursor = geom.meta_chunks
        for i, c in enumerate(self.chunks):
            if c.meta.state == ChunkState.RUN:
                self._avail.setdefault(c.meta.slot_size, {})[i] = None

    @staticmethod
    def initial_records(geom: ZoneGeometry) -> list[ChunkMeta]:
        return [ChunkMeta(ChunkState.RESERVED) if i < geom.meta_chunks else ChunkMeta()
                for i in range(geom.data_chunks)]

    # -- queries ---------------------------------------------------------------
    def slot_size_at(self, off: int) -> int | None:
        """Slot size if ``off`` is the header offset of a live object, else None."""
        g = self.geom
        if not g.in_data(off):
            return None
        idx = g.chunk_index(off)
        m = self.chunks[idx].meta
        rel = off - g.chunk_offset(idx)
        if m.state == ChunkState.RUN:
            if rel % m.slot_size == 0 and (m.bits >> (rel // m.slot_size)) & 1:
                return m.slot_size
        elif m.state == ChunkState.LARGE_LEAD and rel == 0 and m.bits & 1:
            return m.run * g.chunk_size
        return None

    def live_objects(self):
        """Yield ``(offset, slot_size)`` of every committed live object."""
        g = self.geom
        for i, c in enumerate(self.chunks):
            m = c.meta
            if m.state == ChunkState.RUN and m.bits:
                base = g.chunk_offset(i)
                bits = m.bits
                while bits:
                    low = bits & -bits
                    yield base + (low.bit_length() - 1) * m.slot_size, m.slot_size
                    bits ^= low
            elif m.state == ChunkState.LARGE_LEAD and m.bits & 1:
                yield g.chunk_offset(i), m.run * g.chunk_size

    def usage(self) -> dict:
        g = self.geom
        live = free = meta = 0
        for c in self.chunks:
            m = c.meta
            if m.state == ChunkState.RESERVED:
                meta += g.chunk_size
            elif m.state == ChunkState.RUN:
                used = bin(m.bits).count("1") * m.slot_size
                live += used
                free += g.chunk_size - used
            elif m.state in (ChunkState.LARGE_LEAD, ChunkState.LARGE_CONT):
                live += g.chunk_size
            else:
                free += g.chunk_size
        return {"meta_bytes": meta, "live_bytes": live, "free_bytes": free,
                "data_capacity": g.data_rows * g.row_size}

    # -- reservation -------------------------------------------------------------
    def _idle(self, c: _Chunk) -> bool:
        m = c.meta
        if c.claimed or c.reserved or c.pending_slot:
            return False
        return m.state == ChunkState.FREE or (m.state == ChunkState.RUN and m.bits == 0)

    def _serves(self, c: _Chunk, slot: int) -> bool:
        if c.claimed:
            return False
        if c.pending_slot:
            return c.pending_slot == slot
        return c.meta.state == ChunkState.RUN and c.meta.slot_size == slot

    def reserve(self, size: int) -> tuple[int, int, AllocIntent]:
        """Reserve space for ``size`` payload bytes: (offset, slot_size, intent)."""
        slot = size_class(size) + OBJ_HEADER_SIZE
        with self.lock:
            if slot <= self.geom.chunk_size:
                return self._reserve_slot(slot)
            return self._reserve_large(-(-(size + OBJ_HEADER_SIZE) // self.geom.chunk_size))

    def _reserve_slot(self, slot: int):
        g = self.geom
        full = (1 << (g.chunk_size // slot)) - 1
        avail = self._avail.setdefault(slot, {})
        stale = []
        hit = None
        for idx in avail:
            c = self.chunks[idx]
            if self._serves(c, slot):
                free = full & ~(c.meta.bits | c.reserved)
                if free:
                    hit = idx, (free & -free).bit_length() - 1
                    break
            stale.append(idx)
        for idx in stale:
            del avail[idx]
        if hit is None:
            idx = self._find_idle(1)
            c = self.chunks[idx]
            if c.meta.state == ChunkState.RUN:
                self._avail.get(c.meta.slot_size, {}).pop(idx, None)
            c.pending_slot = slot
            avail[idx] = None
            hit = idx, 0
        idx, bit = hit
        self.chunks[idx].reserved |= 1 << bit
        return g.chunk_offset(idx) + bit * slot, slot, AllocIntent("slot", idx, bit, slot)

    def _find_idle(self, n: int) -> int:
        total = len(self.chunks)
        lo = self.geom.meta_chunks
        start = min(max(self._free_cursor, lo), total)
        for a, b in ((start, total), (lo, min(start + n - 1, total))):
            i = a
            while i + n <= b:
                k = 0
                while k < n and self._idle(self.chunks[i + k]):
                    k += 1
                if k == n:
                    self._free_cursor = i + n
                    return i
                i += k + 1
        raise OutOfSpace(f"zone {self.geom.zone_id}: no run of {n} free chunks")

    def _claim(self, idx: int) -> None:
        c = self.chunks[idx]
        if c.meta.state == ChunkState.RUN:
            self._avail.get(c.meta.slot_size, {}).pop(idx, None)
        c.claimed = True

    def _reserve_large(self, n: int):
        idx = self._find_idle(n)
        for k in range(n):
            self._claim(idx + k)
        return self.geom.chunk_offset(idx), n * self.geom.chunk_size, AllocIntent("large", idx, 0, 0, n)

    def claim_extent(self, nbytes: int) -> tuple[int, int]:
        """Claim contiguous idle chunks for an overflow log extent."""
        n = -(-nbytes // self.geom.chunk_size)
        with self.lock:
            idx = self._find_idle(n)
            for k in range(n):
                self._claim(idx + k)
        return self.geom.chunk_offset(idx), n * self.geom.chunk_size

    def release_extent(self, off: int, length: int) -> None:
        with self.lock:
            i0 = self.geom.chunk_index(off)
            for i in range(i0, i0 + length // self.geom.chunk_size):
                self._unclaim(i)

    def _unclaim(self, i: int) -> None:
        c = self.chunks[i]
        c.claimed = False
        if c.meta.state == ChunkState.RUN:
            self._avail.setdefault(c.meta.slot_size, {})[i] = None

    def free_intent(self, off: int) -> AllocIntent:
        g = self.geom
        with self.lock:
            slot = self.slot_size_at(off)
            if slot is None:
                raise InvalidObject(f"0x{off:x} is not a live object")
            idx = g.chunk_index(off)
            m = self.chunks[idx].meta
            if m.state == ChunkState.LARGE_LEAD:
                return AllocIntent("free_large", idx, 0, 0, m.run)
            return AllocIntent("free_slot", idx, (off - g.chunk_offset(idx)) // m.slot_size, m.slot_size)

    def release(self, intents) -> None:
        """Drop the reservations of an aborted transaction."""
        with self.lock:
            for it in intents:
                if it.kind == "slot":
                    c = self.chunks[it.chunk]
                    c.reserved &= ~(1 << it.bit)
                    if not c.reserved and c.pending_slot:
                        c.pending_slot = 0
                        if not (c.meta.state == ChunkState.RUN and c.meta.slot_size == it.slot_size):
                            self._avail.get(it.slot_size, {}).pop(it.chunk, None)
                        if c.meta.state == ChunkState.RUN:
                            self._avail.setdefault(c.meta.slot_size, {})[it.chunk] = None
                elif it.kind == "large":
                    for k in range(it.count):
                        self._unclaim(it.chunk + k)

    # -- commit ------------------------------------------------------------------
    def stage(self, intents) -> dict[int, ChunkMeta]:
        """New chunk records implied by ``intents``; call with ``self.lock`` held."""
        staged: dict[int, ChunkMeta] = {}
        mine: dict[int, int] = {}

        def get(i):
            m = staged.get(i)
            if m is None:
                cm = self.chunks[i].meta
                m = staged[i] = ChunkMeta(cm.state, cm.slot_size, cm.run, cm.bits)
            return m

        for it in intents:
            if it.kind == "slot":
                m = get(it.chunk)
                if m.state != ChunkState.RUN or m.slot_size != it.slot_size:
                    m.state, m.slot_size, m.run, m.bits = ChunkState.RUN, it.slot_size, 0, 0
                m.bits |= 1 << it.bit
                mine[it.chunk] = mine.get(it.chunk, 0) | (1 << it.bit)
            elif it.kind == "free_slot":
                m = get(it.chunk)
                m.bits &= ~(1 << it.bit)
            elif it.kind == "large":
                for k in range(it.count):
                    m = get(it.chunk + k)
                    if k == 0:
                        m.state, m.slot_size, m.run, m.bits = ChunkState.LARGE_LEAD, 0, it.count, 1
                    else:
                        m.state, m.slot_size, m.run, m.bits = ChunkState.LARGE_CONT, 0, k, 0
            elif it.kind == "free_large":
                for k in range(it.count):
                    m = get(it.chunk + k)
                    m.state, m.slot_size, m.run, m.bits = ChunkState.FREE, 0, 0, 0
        for i, m in staged.items():
            c = self.chunks[i]
            others = c.reserved & ~mine.get(i, 0)
            if m.state == ChunkState.RUN and m.bits == 0 and not others and not c.pending_slot:
                m.state, m.slot_size = ChunkState.FREE, 0
        return staged

    def records_changed(self, staged: dict[int, ChunkMeta]):
        """Yield ``(record_offset, old_bytes, new_bytes)`` for each staged chunk."""
        rs = self.geom.record_size
        for i in sorted(staged):
            yield self.geom.record_offset(i), self.chunks[i].meta.pack(rs), staged[i].pack(rs)

    def apply_staged(self, staged: dict[int, ChunkMeta], intents) -> None:
        """Adopt committed records into the mirror and drop the committed reservations."""
        for it in intents:
            if it.kind == "slot":
                self.chunks[it.chunk].reserved &= ~(1 << it.bit)
            elif it.kind == "large":
                for k in range(it.count):
                    self.chunks[it.chunk + k].claimed = False
        for i, m in staged.items():
            c = self.chunks[i]
            old = c.meta
            if old.state == ChunkState.RUN and (m.state != ChunkState.RUN or m.slot_size != old.slot_size):
                self._avail.get(old.slot_size, {}).pop(i, None)
            c.meta = m
            if m.state == ChunkState.RUN:
                if c.pending_slot == m.slot_size and not c.reserved:
                    c.pending_slot = 0
                if not c.pending_slot:
                    self._avail.setdefault(m.slot_size, {})[i] = None
            elif not c.reserved:
                c.pending_slot = 0
