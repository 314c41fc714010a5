"""Pool layout, lifecycle and the non-transactional access paths.

File layout (all integers little-endian, offsets also recorded in the header)::

    [0, 4K)            header
    [4K, 8K)           header replica
    [8K, ...)          zone-metadata table, then its replica (whole pages each)
    next page          bad-page record, then its replica page
    next               log region: 1 MiB per zone, split into log slots
    next               zones, each ``rows * chunks_per_row * chunk_size`` bytes
    remainder          unused tail (less than one zone-row granule per zone)
"""

from __future__ import annotations

import os
import struct
import threading
import uuid as uuidlib
from contextlib import contextmanager
from dataclasses import dataclass, field, fields

from .checksum import adler32, object_checksum_from_image
from .errors import (InvalidObject, LayoutError, MediaError, PoolCrashed, PoolError, PoolFrozen,
                     TransactionAborted, UnrecoverableCorruption, UnrecoverablePool)
from .parity import DEFAULT_GRANULE, DEFAULT_THRESHOLD, ZoneParity
from .pmem import PAGE_SIZE, FileStore, PersistentStore, map_pool
from .zone import (OBJ_HDR, OBJ_HEADER_SIZE, ChunkMeta, ObjectRef, ZoneAllocator, ZoneGeometry,
                   locate)

MAGIC = 0x314C4F4F50544654
VERSION = 1
MiB = 1 << 20
GiB = 1 << 30
MAX_ZONE_SIZE = 16 * GiB
LOG_BYTES_PER_ZONE = MiB
DEFAULT_LOG_SLOTS = 16
ZONE_META_SIZE = 64
BADPAGE_ENTRY = struct.Struct("<QQ")
_BADPAGE_HEAD = struct.Struct("<II")
BADPAGE_CAPACITY = (PAGE_SIZE - _BADPAGE_HEAD.size) // BADPAGE_ENTRY.size

FLAG_PARITY_STALE = 1
FLAG_CHECKSUMS_STALE = 2

HEADER_OFF = 0
HEADER_REPLICA_OFF = PAGE_SIZE
ZONE_META_OFF = 2 * PAGE_SIZE


# -- header -----------------------------------------------------------------------

_HEADER = struct.Struct("<Q16sIIQIIQQQQQQQQQIIQQ")
_U32 = struct.Struct("<I")


@dataclass
class PoolHeader:
    magic: int
    uuid: bytes
    version: int
    flags: int
    pool_size: int
    zone_count: int
    rows_per_zone: int
    chunk_size: int
    chunks_per_row: int
    root_offset: int
    zone_meta_off: int
    zone_meta_replica_off: int
    badpage_off: int
    badpage_replica_off: int
    log_off: int
    log_size: int
    log_slots: int
    log_slot_size: int
    zones_off: int
    zone_size: int

    SIZE = _HEADER.size + 4

    def pack(self) -> bytes:
        body = _HEADER.pack(*(getattr(self, f.name) for f in fields(self)))
        return body + _U32.pack(adler32(body))

    @classmethod
    def unpack(cls, raw) -> "PoolHeader | None":
        """Decode ``raw``; ``None`` if magic or checksum do not validate."""
        body = bytes(raw[:_HEADER.size])
        if _U32.unpack_from(raw, _HEADER.size)[0] != adler32(body):
            return None
        h = cls(*_HEADER.unpack(body))
        return h if h.magic == MAGIC else None

    @property
    def uuid_lo(self) -> int:
        return int.from_bytes(self.uuid[:8], "little")


_ZONE_META = struct.Struct("<IIQQQIIQ")


def pack_zone_meta(z: ZoneGeometry) -> bytes:
    body = _ZONE_META.pack(z.zone_id, z.rows, z.base, z.chunks_per_row, z.chunk_size,
                           z.meta_chunks, z.data_chunks, z.size)
    rec = body + _U32.pack(adler32(body))
    return rec + bytes(ZONE_META_SIZE - len(rec))


def zone_meta_valid(rec, z: ZoneGeometry) -> bool:
    return bytes(rec) == pack_zone_meta(z)


def pack_badpages(entries) -> bytes:
    body = b"".join(BADPAGE_ENTRY.pack(p, s) for p, s in entries)
    head = _BADPAGE_HEAD.pack(len(entries), adler32(body, adler32(struct.pack("<I", len(entries)))))
    return head + body


def unpack_badpages(raw) -> list[tuple[int, int]] | None:
    n, csum = _BADPAGE_HEAD.unpack_from(raw, 0)
    if n > BADPAGE_CAPACITY:
        return None
    body = bytes(raw[_BADPAGE_HEAD.size:_BADPAGE_HEAD.size + n * BADPAGE_ENTRY.size])
    if csum != adler32(body, adler32(struct.pack("<I", n))):
        return None
    return [BADPAGE_ENTRY.unpack_from(body, i * BADPAGE_ENTRY.size) for i in range(n)]


# -- layout -----------------------------------------------------------------------------

def _pages(n: int) -> int:
    return -(-n // PAGE_SIZE)


@dataclass(frozen=True)
class Layout:
    pool_size: int
    zone_count: int
    rows: int
    chunk_size: int
    chunks_per_row: int
    zone_meta_off: int
    zone_meta_replica_off: int
    badpage_off: int
    badpage_replica_off: int
    log_off: int
    log_size: int
    log_slots: int
    log_slot_size: int
    zones_off: int
    zone_size: int

    @property
    def row_size(self) -> int:
        return self.chunks_per_row * self.chunk_size

    @property
    def tail(self) -> int:
        return self.pool_size - self.zones_off - self.zone_count * self.zone_size

    def zones(self) -> list[ZoneGeometry]:
        return [ZoneGeometry(i, self.zones_off + i * self.zone_size, self.rows,
                             self.chunks_per_row, self.chunk_size)
                for i in range(self.zone_count)]

    def regions(self) -> list[tuple[str, int, int]]:
        """Every region as ``(name, offset, length)``, in file order, tiling the file."""
        out = [("header", HEADER_OFF, PAGE_SIZE), ("header_replica", HEADER_REPLICA_OFF, PAGE_SIZE),
               ("zone_meta", self.zone_meta_off, self.zone_meta_replica_off - self.zone_meta_off),
               ("zone_meta_replica", self.zone_meta_replica_off,
                self.badpage_off - self.zone_meta_replica_off),
               ("badpage", self.badpage_off, PAGE_SIZE),
               ("badpage_replica", self.badpage_replica_off, PAGE_SIZE),
               ("log", self.log_off, self.log_size)]
        for z in self.zones():
            out.append((f"zone{z.zone_id}", z.base, z.size))
        out.append(("tail", self.zones_off + self.zone_count * self.zone_size, self.tail))
        return out

    def accounting(self) -> dict:
        """Byte counts by category; the categories sum to ``pool_size``."""
        zs = self.zones()
        parity = sum(z.row_size for z in zs)
        chunk_meta = sum(z.meta_chunks * z.chunk_size for z in zs)
        meta = self.log_off
        user = sum(z.data_rows * z.row_size for z in zs) - chunk_meta
        out = {"pool_size": self.pool_size, "metadata": meta, "log": self.log_size,
               "chunk_metadata": chunk_meta, "parity": parity, "user_data": user, "tail": self.tail}
        out["overhead"] = meta + self.log_size + chunk_meta + parity
        out["overhead_ratio"] = out["overhead"] / self.pool_size
        return out

    @classmethod
    def from_header(cls, h: PoolHeader) -> "Layout":
        return cls(h.pool_size, h.zone_count, h.rows_per_zone, h.chunk_size, h.chunks_per_row,
                   h.zone_meta_off, h.zone_meta_replica_off, h.badpage_off, h.badpage_replica_off,
                   h.log_off, h.log_size, h.log_slots, h.log_slot_size, h.zones_off, h.zone_size)


def compute_layout(pool_size: int, rows_per_zone: int = 100, chunk_size: int = 256 * 1024,
                   log_slots: int = DEFAULT_LOG_SLOTS) -> Layout:
    if pool_size % PAGE_SIZE:
        raise LayoutError("pool size must be a multiple of 4096")
    if rows_per_zone < 2:
        raise LayoutError("rows_per_zone must be at least 2")
    if chunk_size % PAGE_SIZE or chunk_size <= 0:
        raise LayoutError("chunk size must be a positive multiple of 4096")
    k = 1
    while True:
        table = _pages(k * ZONE_META_SIZE) * PAGE_SIZE
        meta = 2 * PAGE_SIZE + 2 * table + 2 * PAGE_SIZE
        log_size = k * LOG_BYTES_PER_ZONE
        avail = pool_size - meta - log_size
        cpr = avail // k // (rows_per_zone * chunk_size) if avail > 0 else 0
        if cpr < 1:
            raise LayoutError(f"pool of {pool_size} bytes cannot hold {k} zone(s) of "
                              f"{rows_per_zone} rows of {chunk_size}-byte chunks")
        zone_size = rows_per_zone * cpr * chunk_size
        if zone_size <= MAX_ZONE_SIZE:
            break
        k += 1
    slot_size = log_size // log_slots // PAGE_SIZE * PAGE_SIZE
    if slot_size < 4 * PAGE_SIZE:
        raise LayoutError("log slots too small; use fewer slots")
    zm = ZONE_META_OFF
    lay = Layout(pool_size, k, rows_per_zone, chunk_size, cpr,
                 zm, zm + table, zm + 2 * table, zm + 2 * table + PAGE_SIZE,
                 meta, log_size, log_slots, slot_size, meta + log_size, zone_size)
    lay.zones()  # validates each zone's geometry
    return lay


# -- modes and statistics ------------------------------------------------------------------

@dataclass(frozen=True)
class Mode:
    name: str
    replicate: bool = True
    parity: bool = True
    checksums: bool = True
    verify_get: bool = False
    scrub_interval: int = 0

    @classmethod
    def parse(cls, text: str, scrub_interval: int | None = None) -> "Mode":
        t = text.strip().lower()
        if t == "baseline":
            return cls("baseline", False, False, False)
        if t == "ml":
            return cls("ml", True, False, False)
        if t == "mlp":
            return cls("mlp", True, True, False)
        if t in ("mlpc", "default"):
            if scrub_interval:
                return cls(f"scrub:{scrub_interval}", scrub_interval=scrub_interval)
            return cls("mlpc")
        if t == "conservative":
            return cls("conservative", verify_get=True)
        if t.startswith("scrub"):
            _, _, n = t.partition(":")
            n = n.strip().upper()
            mult = 1
            if n.endswith("K"):
                n, mult = n[:-1], 1000
            elif n.endswith("M"):
                n, mult = n[:-1], 1000000
            interval = int(n) * mult if n else (scrub_interval or 100000)
            if interval <= 0:
                raise ValueError("scrub interval must be positive")
            return cls(f"scrub:{interval}", scrub_interval=interval)
        raise ValueError(f"unknown mode {text!r}")


@dataclass
class PoolStats:
    """Counters kept by the access and commit paths (reset with :meth:`reset`)."""

    accessed_bytes: int = 0
    unverified_bytes: int = 0
    window_bytes: int = 0
    windows: list = field(default_factory=list)
    commits: int = 0
    aborts: int = 0
    tx_objects: int = 0
    tx_alloc_bytes: int = 0
    tx_allocs: int = 0
    tx_modified_bytes: int = 0
    tx_frees: int = 0
    log_bytes: int = 0
    repairs: list = field(default_factory=list)
    scrubs: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def access(self, n: int, verified: bool) -> None:
        with self.lock:
            self.accessed_bytes += n
            if not verified:
                self.unverified_bytes += n
                self.window_bytes += n

    def close_window(self) -> None:
        with self.lock:
            self.windows.append(self.window_bytes)
            self.window_bytes = 0

    def reset(self) -> None:
        with self.lock:
            for f in fields(self):
                if f.name != "lock":
                    setattr(self, f.name, [] if f.name in ("windows", "repairs") else 0)

    def summary(self) -> dict:
        w = self.windows
        return {"accessed_bytes": self.accessed_bytes, "unverified_bytes": self.unverified_bytes,
                "scrub_windows": len(w), "window_max": max(w) if w else self.window_bytes,
                "window_mean": sum(w) / len(w) if w else float(self.window_bytes),
                "commits": self.commits, "aborts": self.aborts,
                "avg_objects_per_tx": self.tx_objects / self.commits if self.commits else 0.0,
                "avg_alloc_bytes_per_tx": self.tx_alloc_bytes / self.commits if self.commits else 0.0,
                "avg_allocs_per_tx": self.tx_allocs / self.commits if self.commits else 0.0,
                "avg_modified_bytes_per_tx": self.tx_modified_bytes / self.commits if self.commits else 0.0,
                "avg_frees_per_tx": self.tx_frees / self.commits if self.commits else 0.0,
                "log_bytes": self.log_bytes, "scrubs": self.scrubs,
                "repairs": len(self.repairs),
                "repair_mean_us": 1e6 * sum(self.repairs) / len(self.repairs) if self.repairs else 0.0}


# -- the pool ---------------------------------------------------------------------------------

class Pool:
    """An open pool.  Use :meth:`create`, :meth:`open` or :meth:`attach`."""

    def __init__(self, store: PersistentStore, *, mode: Mode | str = "mlpc",
                 freeze_policy: str = "block", lock_granule: int = DEFAULT_GRANULE,
                 parity_threshold: int = DEFAULT_THRESHOLD, scrub_async: bool = True):
        from .recovery import Recovery
        from .tx import LogManager

        if freeze_policy not in ("block", "fail"):
            raise ValueError("freeze_policy must be 'block' or 'fail'")
        self.store = store
        self.mode = Mode.parse(mode) if isinstance(mode, str) else mode
        self.freeze_policy = freeze_policy
        self.stats = PoolStats()
        self._tls = threading.local()
        self._gate = threading.Condition()
        self._frozen = 0
        self._frozen_by: int | None = None
        self._in_flight: set[int] = set()
        self._header_lock = threading.Lock()
        self._crashed: BaseException | None = None
        self._closed = False
        self._zone_rr = 0
        self._scrubber = None
        self._scrub_async = scrub_async
        self._granule = lock_granule
        self._threshold = parity_threshold

        self.header = self._load_header()
        self.layout = Layout.from_header(self.header)
        self.zones = self.layout.zones()
        self.parity = [ZoneParity(store, z, lock_granule, parity_threshold) for z in self.zones]
        self._check_zone_meta()
        self.recovery = Recovery(self)
        self.logs = LogManager(self)
        self.recovery.replay_logs()
        self.allocators = [ZoneAllocator(z, self._load_chunk_records(z)) for z in self.zones]
        self.recovery.resume_bad_pages()
        self._reconcile_mode()
        if self.mode.scrub_interval and scrub_async:
            from .recovery import Scrubber
            self._scrubber = Scrubber(self)
            self._scrubber.start()

    # -- construction ----------------------------------------------------------------
    @classmethod
    def create(cls, path=None, pool_size: int = 64 * MiB, rows_per_zone: int = 100,
               chunk_size: int = 256 * 1024, *, backend: str = "file",
               log_slots: int = DEFAULT_LOG_SLOTS, sync: bool = False, **opts) -> "Pool":
        lay = compute_layout(pool_size, rows_per_zone, chunk_size, log_slots)
        store = map_pool(path, pool_size, create=True, backend=backend, sync=sync)
        cls.format(store, lay)
        return cls(store, **opts)

    @staticmethod
    def format(store: PersistentStore, lay: Layout) -> PoolHeader:
        """Write headers, zone table and chunk records onto a zeroed store."""
        h = PoolHeader(MAGIC, uuidlib.uuid4().bytes, VERSION, 0, lay.pool_size, lay.zone_count,
                       lay.rows, lay.chunk_size, lay.chunks_per_row, 0, lay.zone_meta_off,
                       lay.zone_meta_replica_off, lay.badpage_off, lay.badpage_replica_off,
                       lay.log_off, lay.log_size, lay.log_slots, lay.log_slot_size,
                       lay.zones_off, lay.zone_size)
        raw = h.pack()
        bp = pack_badpages([])
        for off in (HEADER_OFF, HEADER_REPLICA_OFF):
            store.write(off, raw)
        for base in (lay.zone_meta_off, lay.zone_meta_replica_off):
            for z in lay.zones():
                store.write(base + z.zone_id * ZONE_META_SIZE, pack_zone_meta(z))
        for off in (lay.badpage_off, lay.badpage_replica_off):
            store.write(off, bp)
        for z in lay.zones():
            rs = z.record_size
            recs = b"".join(m.pack(rs) for m in ZoneAllocator.initial_records(z))
            store.write(z.base, recs)
            zp = ZoneParity(store, z)
            zp.rebuild()
        store.persist(0, lay.zones_off)
        for z in lay.zones():
            store.persist(z.base, z.size)
        return h

    @classmethod
    def open(cls, path, *, sync: bool = False, **opts) -> "Pool":
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        return cls(FileStore(path, sync=sync), **opts)

    @classmethod
    def attach(cls, store: PersistentStore, **opts) -> "Pool":
        """Open a pool on an already-mapped store (runs crash recovery)."""
        return cls(store, **opts)

    def close(self) -> None:
        if self._closed:
            return
        if self._scrubber is not None:
            self._scrubber.stop()
            self._scrubber = None
        self._closed = True
        self.store.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- header and metadata ----------------------------------------------------------
    def _read_copy(self, off: int, n: int) -> bytes | None:
        try:
            return self.store.read(off, n)
        except MediaError:
            return None

    def _load_header(self) -> PoolHeader:
        n = PoolHeader.SIZE
        raw = [self._read_copy(HEADER_OFF, n), self._read_copy(HEADER_REPLICA_OFF, n)]
        hs = [PoolHeader.unpack(r) if r is not None else None for r in raw]
        good = next((i for i in (0, 1) if hs[i] is not None), None)
        if good is None:
            raise UnrecoverablePool("both header copies are invalid")
        h = hs[good]
        if h.pool_size != self.store.length:
            raise UnrecoverablePool(f"header says {h.pool_size} bytes, file has {self.store.length}")
        for i, off in ((0, HEADER_OFF), (1, HEADER_REPLICA_OFF)):
            if raw[i] != raw[good]:
                self._rewrite_page(off, raw[good])
        return h

    def _rewrite_page(self, off: int, data: bytes) -> None:
        """Restore a replicated metadata page (clearing emulated poison)."""
        if self.store.is_poisoned(off):
            self.store.unpoison(off)
            self.store.fill(off, PAGE_SIZE, 0)
        self.store.write(off, data)
        self.store.persist(off, PAGE_SIZE)

    def _check_zone_meta(self) -> None:
        lay = self.layout
        for z in self.zones:
            want = pack_zone_meta(z)
            recs = []
            for base in (lay.zone_meta_off, lay.zone_meta_replica_off):
                recs.append(self._read_copy(base + z.zone_id * ZONE_META_SIZE, ZONE_META_SIZE))
            if not any(r == want for r in recs):
                raise UnrecoverablePool(f"zone {z.zone_id} metadata: both copies invalid")
            self.repair_zone_meta(z)

    def repair_zone_meta(self, z: ZoneGeometry) -> int:
        """Rewrite any zone-metadata copy that does not match; returns copies fixed."""
        lay = self.layout
        want = pack_zone_meta(z)
        fixed = 0
        for base, twin in ((lay.zone_meta_off, lay.zone_meta_replica_off),
                           (lay.zone_meta_replica_off, lay.zone_meta_off)):
            off = base + z.zone_id * ZONE_META_SIZE
            if self._read_copy(off, ZONE_META_SIZE) != want:
                page = off - off % PAGE_SIZE
                if self.store.is_poisoned(page):
                    twin_page = twin + (page - base)
                    self._rewrite_page(page, self.store.read(twin_page, PAGE_SIZE))
                self.store.write(off, want)
                self.store.persist(off, ZONE_META_SIZE)
                fixed += 1
        return fixed

    def repair_header(self) -> int:
        """Make both header copies valid and identical; returns copies fixed."""
        n = PoolHeader.SIZE
        want = self.header.pack()
        fixed = 0
        for off in (HEADER_OFF, HEADER_REPLICA_OFF):
            if self._read_copy(off, n) != want:
                self._rewrite_page(off, want)
                fixed += 1
        return fixed

    def _load_chunk_records(self, z: ZoneGeometry) -> list[ChunkMeta]:
        rs = z.record_size
        recs = []
        for i in range(z.data_chunks):
            off = z.record_offset(i)
            raw = self.recovery.read_repairing(off, rs, ChunkMeta.valid)
            recs.append(ChunkMeta.unpack(raw))
        return recs

    def write_header(self, h: PoolHeader) -> None:
        raw = h.pack()
        for off in (HEADER_OFF, HEADER_REPLICA_OFF):
            self.store.write(off, raw)
            self.store.persist(off, len(raw))
        self.header = h

    def _set_flags(self, flags: int) -> None:
        if flags != self.header.flags:
            h = PoolHeader(**{f.name: getattr(self.header, f.name) for f in fields(PoolHeader)})
            h.flags = flags
            self.write_header(h)

    def _reconcile_mode(self) -> None:
        """Mark what a weak mode stops maintaining; rebuild it when a full mode reopens."""
        flags = self.header.flags
        m = self.mode
        if m.checksums and flags & FLAG_CHECKSUMS_STALE:
            self.recovery.refresh_all_checksums()
            flags &= ~FLAG_CHECKSUMS_STALE
            flags |= FLAG_PARITY_STALE
        if m.parity and flags & FLAG_PARITY_STALE:
            for zp in self.parity:
                zp.rebuild()
            flags &= ~FLAG_PARITY_STALE
        if not m.parity:
            flags |= FLAG_PARITY_STALE
        if not m.checksums:
            flags |= FLAG_CHECKSUMS_STALE
        self._set_flags(flags)

    @property
    def uuid_lo(self) -> int:
        return self.header.uuid_lo

    @property
    def root_offset(self) -> int:
        return self.header.root_offset

    # -- bad-page record ---------------------------------------------------------------------
    def read_badpages(self) -> list[tuple[int, int]]:
        lay = self.layout
        for off in (lay.badpage_off, lay.badpage_replica_off):
            raw = self._read_copy(off, PAGE_SIZE)
            if raw is not None:
                ent = unpack_badpages(raw)
                if ent is not None:
                    return ent
        return []

    def write_badpages(self, entries) -> None:
        if len(entries) > BADPAGE_CAPACITY:
            raise PoolError("too many bad pages for one record")
        # whole page, so a shrinking record leaves no stale entries behind
        raw = pack_badpages(entries).ljust(PAGE_SIZE, b"\0")
        for off in (self.layout.badpage_off, self.layout.badpage_replica_off):
            self.store.unpoison(off)
            self.store.write(off, raw)
            self.store.persist(off, PAGE_SIZE)

    # -- zones and references ---------------------------------------------------------------
    def zone_index(self, off: int) -> int | None:
        lay = self.layout
        rel = off - lay.zones_off
        if rel < 0:
            return None
        i = rel // lay.zone_size
        return i if i < lay.zone_count else None

    def locate(self, ref: ObjectRef) -> int | None:
        return locate(self.zones, ref, self.layout.pool_size)

    def ref(self, offset: int) -> ObjectRef:
        return ObjectRef(self.uuid_lo, offset)

    def slot_size(self, off: int) -> int:
        return self.resolve(ObjectRef(0, off))[1]

    def live_objects(self):
        for a in self.allocators:
            yield from a.live_objects()

    def object_count(self) -> int:
        return sum(1 for _ in self.live_objects())

    def pick_zone(self) -> int:
        self._zone_rr = (self._zone_rr + 1) % len(self.zones)
        return self._zone_rr

    # -- freeze gate ------------------------------------------------------------------------------
    @property
    def frozen(self) -> bool:
        return self._frozen > 0

    def freeze(self) -> None:
        """Stop new transactions and wait for the others in flight to finish."""
        me = threading.get_ident()
        with self._gate:
            while self._frozen and self._frozen_by != me:
                self._gate.wait()
            self._frozen += 1
            self._frozen_by = me
            while self._in_flight - {me}:
                self._gate.wait()

    def thaw(self) -> None:
        with self._gate:
            if self._frozen <= 0:
                return
            self._frozen -= 1
            if not self._frozen:
                self._frozen_by = None
                self._gate.notify_all()

    @contextmanager
    def frozen_pool(self):
        self.freeze()
        try:
            yield self
        finally:
            self.thaw()

    def _tx_enter(self) -> None:
        me = threading.get_ident()
        with self._gate:
            while self._frozen and self._frozen_by != me:
                if self.freeze_policy == "fail":
                    raise PoolFrozen("pool is frozen for recovery")
                self._gate.wait()
            self._in_flight.add(me)

    def _tx_exit(self) -> None:
        with self._gate:
            self._in_flight.discard(threading.get_ident())
            self._gate.notify_all()

    def in_flight(self, thread_id: int | None = None) -> bool:
        return (thread_id or threading.get_ident()) in self._in_flight

    def mark_crashed(self, exc: BaseException) -> None:
        self._crashed = exc

    def check_alive(self) -> None:
        if self._crashed is not None:
            raise PoolCrashed(f"pool must be reopened after a failed commit: {self._crashed}")
        if self._closed:
            raise PoolError("pool is closed")

    # -- transactions ---------------------------------------------------------------------------
    def current_transaction(self):
        return getattr(self._tls, "tx", None)

    def begin(self):
        """Begin (or nest into) this thread's transaction; pair with :meth:`end`."""
        from .tx import Transaction

        tx = self.current_transaction()
        if tx is not None:
            tx.depth += 1
            return tx
        self.check_alive()
        self._tx_enter()
        try:
            tx = Transaction(self)
        except BaseException:
            self._tx_exit()
            raise
        self._tls.tx = tx
        return tx

    def end(self, exc: BaseException | None = None) -> None:
        """Leave one nesting level; the outermost level commits or aborts."""
        tx = self.current_transaction()
        if tx is None:
            raise PoolError("no transaction in progress")
        try:
            if exc is not None:
                tx.abort_quiet()
            tx.depth -= 1
            if tx.depth == 0 and exc is None:
                if tx.state == "active":
                    tx.commit()
                elif tx.state == "aborted" and not tx.explicit_abort:
                    raise TransactionAborted("transaction was aborted in a nested scope")
        finally:
            if tx.depth <= 0:
                self._tls.tx = None
                tx.finish()
                self._tx_exit()
                self._after_tx(tx)

    @contextmanager
    def transaction(self):
        """Transaction scope; an explicit ``tx.abort()`` is swallowed at the outermost level."""
        tx = self.begin()
        try:
            yield tx
        except BaseException as e:
            outermost = tx.depth == 1
            self.end(e)
            if outermost and getattr(e, "explicit", False):
                return
            raise
        else:
            self.end()

    def _after_tx(self, tx) -> None:
        if tx.state != "done" or not tx.wrote:
            return
        iv = self.mode.scrub_interval
        if iv and self.stats.commits % iv == 0:
            if self._scrubber is not None:
                self._scrubber.request()
            else:
                self.scrub(scheduled=True)

    # -- reads outside micro-buffers ---------------------------------------------------------------
    def get(self, ref: ObjectRef):
        """Object payload: the shadow inside a transaction that opened it, else a bytes copy."""
        tx = self.current_transaction()
        if tx is not None:
            return tx.get(ref)
        return self.read_payload(ref)

    def read(self, ref: ObjectRef, off: int, n: int) -> bytes:
        tx = self.current_transaction()
        if tx is not None:
            return tx.read(ref, off, n)
        return self.read_payload(ref, off, n)

    def resolve(self, ref: ObjectRef) -> tuple[int, int]:
        """``(offset, slot_size)`` of the live object named by ``ref``."""
        o = ref.offset
        lay = self.layout
        rel = o - lay.zones_off
        if o and 0 <= rel < lay.zone_count * lay.zone_size:
            size = self.allocators[rel // lay.zone_size].slot_size_at(o)
            if size is not None:
                return o, size
        if self.locate(ref) is None:
            raise InvalidObject("null reference")
        raise InvalidObject(f"no live object at 0x{o:x}")

    def read_payload(self, ref: ObjectRef, off: int = 0, n: int | None = None) -> bytes:
        o, size = self.resolve(ref)
        plen = size - OBJ_HEADER_SIZE
        if n is None:
            n = plen - off
        if off < 0 or n < 0 or off + n > plen:
            raise IndexError(f"range [{off}, {off + n}) outside a {plen}-byte payload")
        if self.mode.verify_get:
            img = self.read_object(o, size, verify=True)
            self.stats.access(n, True)
            return img[OBJ_HEADER_SIZE + off:OBJ_HEADER_SIZE + off + n]
        while True:
            try:
                data = self.store.read(o + OBJ_HEADER_SIZE + off, n)
                break
            except MediaError as e:
                self.recovery.on_media_error(e)
        self.stats.access(n, False)
        return data

    def read_object(self, o: int, size: int, verify: bool) -> bytes:
        """Whole object image (header + payload), repairing it first if needed."""
        for _ in range(3):
            try:
                img = self.store.read(o, size)
            except MediaError as e:
                self.recovery.on_media_error(e)
                continue
            if not verify or object_ok(img, size):
                return img
            self.recovery.on_checksum_mismatch(o, size)
        img = self.store.read(o, size)
        if verify and not object_ok(img, size):
            raise UnrecoverableCorruption(f"object at 0x{o:x} failed verification after repair", [o])
        return img

    # -- root ------------------------------------------------------------------------------------
    def root(self, size: int | None = None, type_id: int = 0) -> ObjectRef:
        """The root object, allocated (zeroed) on first use when ``size`` is given."""
        if self.header.root_offset:
            return self.ref(self.header.root_offset)
        if size is None:
            raise InvalidObject("pool has no root object")
        with self.transaction() as tx:
            r = tx.alloc(size, type_id)
            tx.set_root(r)
        return r

    # -- pass-throughs to recovery ----------------------------------------------------------------
    def scrub(self, scheduled: bool = False):
        return self.recovery.scrub(scheduled=scheduled)

    def check(self):
        return self.recovery.check()

    def inject_fault(self, kind: str, target: str = "object", seed: int = 0, **kw) -> dict:
        return self.recovery.inject_fault(kind, target, seed, **kw)

    # -- micro-buffer convenience (auto transaction) ------------------------------------------------
    def open_object(self, ref: ObjectRef):
        """A verified private copy of ``ref`` for :meth:`commit_object`."""
        from .mbuf import MicroBuffer

        o, size = self.resolve(ref)
        img = self.read_object(o, size, verify=self.mode.checksums)
        return MicroBuffer(ref, img)

    def commit_object(self, buf) -> None:
        """Commit every payload byte of ``buf`` that differs from its opened image."""
        from .errors import CanaryViolation

        if not buf.canary_ok():
            self.stats.aborts += 1
            raise CanaryViolation(buf.ref)
        if not buf.mark_diff() and not buf.modified:
            return
        with self.transaction() as tx:
            tx.adopt(buf)

    def info(self) -> dict:
        lay = self.layout
        usage = [a.usage() for a in self.allocators]
        return {"uuid": self.header.uuid.hex(), "version": self.header.version,
                "mode": self.mode.name, "flags": self.header.flags,
                "pool_size": lay.pool_size, "zone_count": lay.zone_count,
                "rows_per_zone": lay.rows, "chunk_size": lay.chunk_size,
                "chunks_per_row": lay.chunks_per_row, "row_size": lay.row_size,
                "zone_size": lay.zone_size, "log_slots": lay.log_slots,
                "regions": [{"name": n, "offset": o, "length": ln} for n, o, ln in lay.regions()],
                "accounting": lay.accounting(),
                "objects": self.object_count(),
                "live_bytes": sum(u["live_bytes"] for u in usage),
                "free_bytes": sum(u["free_bytes"] for u in usage),
                "root_offset": self.header.root_offset,
                "poisoned_pages": self.store.poisoned_pages,
                "init_seconds": self.store.init_seconds}


def object_ok(img, size: int) -> bool:
    s, _, csum = OBJ_HDR.unpack_from(img, 0)
    return s == size and csum == object_checksum_from_image(img)


__all__ = ["Pool", "PoolHeader", "Layout", "Mode", "PoolStats", "compute_layout", "object_ok"]
