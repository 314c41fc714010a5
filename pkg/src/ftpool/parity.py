"""Row parity for one zone.

The parity row holds, at every column ``c``, the XOR of byte ``c`` of every
data row.  Commits keep it current with deltas (``old ^ new``) because XOR
commutes: two transactions touching ranges that share a column can apply
their deltas in either order.

Small deltas (below ``threshold`` bytes) take the granule locks shared and
XOR word by word under a tiny per-granule mutex that stands in for the CPU's
atomic fetch-xor.  Large deltas take the granule locks exclusively and XOR the
whole piece at once.  Granules are visited in ascending order and only one is
held at a time.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .errors import MediaError, UnrecoverableCorruption
from .pmem import PAGE_SIZE, PersistentStore
from .zone import ZoneGeometry

DEFAULT_GRANULE = 8192
DEFAULT_THRESHOLD = 8192


def xor_bytes(a, b) -> bytes:
    n = len(a)
    if len(b) != n:
        raise ValueError("XOR operands differ in length")
    if n < 512:
        return (int.from_bytes(a, "little") ^ int.from_bytes(b, "little")).to_bytes(n, "little")
    return (np.frombuffer(a, dtype=np.uint8) ^ np.frombuffer(b, dtype=np.uint8)).tobytes()


@dataclass(frozen=True)
class RangeDelta:
    column: int
    delta: bytes

    def __len__(self) -> int:
        return len(self.delta)


def delta_compute(old, new, column: int = 0) -> RangeDelta:
    if len(old) != len(new):
        raise ValueError("old and new ranges differ in length")
    return RangeDelta(column, xor_bytes(old, new))


@dataclass(frozen=True)
class ParityGeometry:
    zone_base: int
    row_size: int
    data_rows: int
    parity_base: int
    lock_granule: int = DEFAULT_GRANULE

    @classmethod
    def for_zone(cls, z: ZoneGeometry, granule: int = DEFAULT_GRANULE) -> "ParityGeometry":
        return cls(z.base, z.row_size, z.data_rows, z.parity_base, granule)

    @property
    def lock_count(self) -> int:
        return -(-self.row_size // self.lock_granule)

    def column_of(self, off: int) -> int:
        return (off - self.zone_base) % self.row_size

    def parity_offset(self, off: int) -> int:
        return self.parity_base + self.column_of(off)


class RangeLock:
    """Shared/exclusive lock for one parity granule.

    ``atomic`` serialises the read-modify-write of shared holders; it models
    the indivisibility of a hardware atomic XOR, not mutual exclusion.
    """

    __slots__ = ("_cond", "_readers", "_writer", "atomic")

    def __init__(self):
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False
        self.atomic = threading.Lock()

    def acquire_shared(self) -> None:
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1

    def release_shared(self) -> None:
        with self._cond:
            self._readers -= 1
            if not self._readers:
                self._cond.notify_all()

    def acquire_exclusive(self) -> None:
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True

    def release_exclusive(self) -> None:
        with self._cond:
            self._writer = False
            self._cond.notify_all()


class ZoneParity:
    """Parity maintenance, checking and reconstruction for one zone."""

    def __init__(self, store: PersistentStore, geom: ZoneGeometry,
                 granule: int = DEFAULT_GRANULE, threshold: int = DEFAULT_THRESHOLD):
        self.store = store
        self.zone = geom
        self.geom = ParityGeometry.for_zone(geom, granule)
        self.threshold = threshold
        self.locks = [RangeLock() for _ in range(self.geom.lock_count)]
        self.shared_applies = 0
        self.exclusive_applies = 0
        # pool ranges holding overflow log entries; parity treats them as zeros
        self.exempt: dict[int, int] = {}

    # -- delta application -----------------------------------------------------
    def apply(self, delta: RangeDelta) -> None:
        """XOR ``delta`` into the parity row at its column and persist it."""
        col, d = delta.column, delta.delta
        n = len(d)
        if n == 0:
            return
        if col < 0 or col + n > self.geom.row_size:
            raise ValueError(f"parity delta [{col}, {col + n}) outside the column range")
        g = self.geom.lock_granule
        base = self.geom.parity_base
        shared = n < self.threshold
        store = self.store
        pos = col
        end = col + n
        while pos < end:
            gi = pos // g
            stop = min(end, (gi + 1) * g)
            piece = d[pos - col:stop - col]
            lock = self.locks[gi]
            if shared:
                lock.acquire_shared()
                try:
                    with lock.atomic:
                        store.xor(base + pos, piece)
                finally:
                    lock.release_shared()
            else:
                lock.acquire_exclusive()
                try:
                    store.xor(base + pos, piece)
                finally:
                    lock.release_exclusive()
            pos = stop
        if shared:
            self.shared_applies += 1
        else:
            self.exclusive_applies += 1
        store.persist(base + col, n)

    def apply_data_delta(self, off: int, delta) -> None:
        """Apply a delta for data bytes at pool offset ``off`` (may span rows)."""
        z = self.zone
        pos = 0
        for piece_off, k in z.split_rows(off, len(delta)):
            self.apply(RangeDelta(z.column_of(piece_off), delta[pos:pos + k]))
            pos += k

    # -- whole-column arithmetic ----------------------------------------------------
    def _row_base(self, r: int) -> int:
        return self.zone.base + r * self.zone.row_size

    def _exempt_in(self, row: int, col: int, n: int):
        """Exempt pieces of ``row`` intersecting columns [col, col+n): (col, pool_off, len)."""
        rb = self._row_base(row)
        lo, hi = rb + col, rb + col + n
        for off, ln in self.exempt.items():
            a, b = max(lo, off), min(hi, off + ln)
            if a < b:
                yield a - rb, a, b - a

    def column_xor(self, col: int, n: int, skip_row: int | None = None,
                   include_parity: bool = True) -> np.ndarray:
        """XOR of bytes ``[col, col+n)`` across rows, exempt ranges read as zero.

        Reads of poisoned pages raise :class:`MediaError`.
        """
        rows = range(self.zone.rows if include_parity else self.zone.data_rows)
        acc = np.zeros(n, dtype=np.uint8)
        for r in rows:
            if r == skip_row:
                continue
            acc ^= self.store.array(self._row_base(r) + col, n)
            for c, off, ln in self._exempt_in(r, col, n):
                acc[c - col:c - col + ln] ^= self.store.array(off, ln)
        return acc

    def syndrome(self) -> np.ndarray:
        """XOR of every row including parity; zero wherever the zone is consistent."""
        return self.column_xor(0, self.zone.row_size)

    def check(self) -> list[tuple[int, int]]:
        """Column ranges ``(column, length)`` whose rows do not XOR to zero."""
        return nonzero_runs(self.syndrome())

    def recompute(self, col: int, n: int) -> None:
        """Rewrite parity ``[col, col+n)`` from the data rows and persist it."""
        if n <= 0:
            return
        fresh = self.column_xor(col, n, include_parity=False)
        self.store.write(self.geom.parity_base + col, fresh.tobytes())
        self.store.persist(self.geom.parity_base + col, n)

    def recompute_range(self, off: int, n: int) -> None:
        """Recompute the parity columns covered by pool range ``[off, off+n)``."""
        for piece, k in self.zone.split_rows(off, n):
            self.recompute(self.zone.column_of(piece), k)

    def rebuild(self) -> None:
        """Recompute the whole parity row, one granule-sized slab at a time."""
        step = 1 << 20
        for col in range(0, self.zone.row_size, step):
            self.recompute(col, min(step, self.zone.row_size - col))

    def reconstruct_page(self, page_off: int) -> bytes:
        """Rebuild one page from the other members of its page column.

        Writes the result back (clearing the emulated poison) and persists it.
        Raises :class:`UnrecoverableCorruption` if another member of the
        column is unreadable.
        """
        z = self.zone
        if page_off % PAGE_SIZE or not z.contains(page_off):
            raise ValueError(f"0x{page_off:x} is not a page of zone {z.zone_id}")
        row = z.row_of(page_off)
        col = z.column_of(page_off)
        try:
            data = self.column_xor(col, PAGE_SIZE, skip_row=row)
        except MediaError as e:
            raise UnrecoverableCorruption(
                f"page column of 0x{page_off:x} has a second bad page at 0x{e.page_offset:x}",
                [page_off, e.page_offset]) from e
        # the lost page's own exempt bytes are not covered by parity; keep them zero
        for c, off, ln in self._exempt_in(row, col, PAGE_SIZE):
            data[c - col:c - col + ln] = 0
        out = data.tobytes()
        self.store.unpoison(page_off)
        self.store.write(page_off, out)
        self.store.persist(page_off, PAGE_SIZE)
        return out


def nonzero_runs(arr: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of nonzero bytes as ``(start, length)``."""
    idx = np.flatnonzero(arr)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate(([idx[0]], idx[breaks + 1]))
    ends = np.concatenate((idx[breaks], [idx[-1]])) + 1
    return [(int(s), int(e - s)) for s, e in zip(starts, ends)]


def column_reconstruct(zp: ZoneParity, page_offset: int) -> bytes:
    return zp.reconstruct_page(page_offset)


def parity_check_zone(zp: ZoneParity) -> list[tuple[int, int]]:
    return zp.check()
