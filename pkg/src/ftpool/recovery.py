"""Online repair, crash recovery, scrubbing and fault injection."""

from __future__ import annotations

import enum
import random
import threading
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConcurrentFault, MediaError, PoolError, UnrecoverableCorruption,
                     UnrecoverablePool)
from .parity import nonzero_runs
from .pmem import PAGE_SIZE, page_floor
from .pool import (FLAG_PARITY_STALE, HEADER_OFF, HEADER_REPLICA_OFF, ZONE_META_SIZE, object_ok,
                   pack_badpages, pack_zone_meta)
from .tx import MARK_DONE, MARK_EMPTY, MARK_LOGS_COMPLETE, pack_slot_record, replay_slot
from .zone import OBJ_HDR, ChunkMeta

BAD_MEDIA = 1
BAD_SYNDROME = 2


class FaultKind(enum.Enum):
    MEDIA_PAGE = "media-page"
    CHECKSUM_MISMATCH = "checksum-mismatch"
    METADATA_MISMATCH = "metadata-mismatch"


@dataclass
class FaultEvent:
    kind: FaultKind
    offset: int
    length: int = 0
    thread: int = field(default_factory=threading.get_ident)

    def __post_init__(self):
        if self.kind is FaultKind.MEDIA_PAGE:
            self.offset = page_floor(self.offset)
            self.length = PAGE_SIZE


@dataclass
class ScrubReport:
    objects_scanned: int = 0
    mismatches: int = 0
    repaired: int = 0
    metadata_checked: int = 0
    metadata_repaired: int = 0
    media_repaired: int = 0
    parity_ranges_fixed: int = 0
    unrecoverable: list = field(default_factory=list)
    seconds: float = 0.0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class Recovery:
    def __init__(self, pool):
        self.pool = pool
        self._lock = threading.RLock()
        self._owner: int | None = None

    # -- ownership ---------------------------------------------------------------------
    def _acquire(self) -> bool:
        """Take recovery ownership; False if this thread already owns it."""
        me = threading.get_ident()
        if self._owner == me:
            return False
        if not self._lock.acquire(blocking=False):
            if self.pool.in_flight(me):
                # waiting here could deadlock the owner's freeze on this transaction
                raise ConcurrentFault("a second fault was detected while recovery was in progress")
            self._lock.acquire()
        self._owner = me
        return True

    def _release(self) -> None:
        self._owner = None
        self._lock.release()

    # -- entry points from the access paths -------------------------------------------------
    def on_media_error(self, err: MediaError) -> None:
        if not self.handle_fault(FaultEvent(FaultKind.MEDIA_PAGE, err.page_offset)):
            raise UnrecoverableCorruption(f"page 0x{err.page_offset:x} could not be rebuilt",
                                          [err.page_offset])

    def on_checksum_mismatch(self, off: int, size: int) -> None:
        if not self.handle_fault(FaultEvent(FaultKind.CHECKSUM_MISMATCH, off, size)):
            raise UnrecoverableCorruption(f"object at 0x{off:x} could not be repaired", [off])

    def handle_fault(self, ev: FaultEvent) -> bool:
        """Freeze the pool, repair the damage named by ``ev``, thaw; True on success."""
        pool = self.pool
        outer = self._acquire()
        try:
            if outer and self._already_fixed(ev):
                return True
            pool.freeze()
            try:
                return self._repair(ev)
            finally:
                pool.thaw()
        finally:
            if outer:
                self._release()

    def _already_fixed(self, ev: FaultEvent) -> bool:
        store = self.pool.store
        try:
            if ev.kind is FaultKind.MEDIA_PAGE:
                return not store.is_poisoned(ev.offset)
            img = store.read(ev.offset, ev.length)
        except MediaError:
            return False
        if ev.kind is FaultKind.CHECKSUM_MISMATCH:
            return object_ok(img, ev.length)
        return ChunkMeta.valid(img)

    def _repair(self, ev: FaultEvent) -> bool:
        t0 = time.perf_counter()
        if ev.kind is FaultKind.MEDIA_PAGE:
            self._record([(ev.offset, BAD_MEDIA)])
            try:
                ok = self.repair_page(ev.offset)
            finally:
                self._record([])
            self.pool.stats.repairs.append(time.perf_counter() - t0)
            return ok
        validator = ((lambda img: object_ok(img, ev.length))
                     if ev.kind is FaultKind.CHECKSUM_MISMATCH else ChunkMeta.valid)
        ok = self.syndrome_repair(ev.offset, ev.length, validator)
        self.pool.stats.repairs.append(time.perf_counter() - t0)
        return ok

    def _record(self, entries) -> None:
        self.pool.write_badpages(entries)

    # -- page repair ------------------------------------------------------------------------
    def repair_page(self, page: int) -> bool:
        """Rebuild one lost page from redundancy; False if it cannot be rebuilt."""
        pool = self.pool
        store = pool.store
        lay = pool.layout
        page = page_floor(page)
        zi = pool.zone_index(page)
        if zi is not None and page < lay.zones_off + lay.zone_count * lay.zone_size:
            try:
                pool.parity[zi].reconstruct_page(page)
            except UnrecoverableCorruption:
                return False
            return True
        if page < lay.log_off:
            self._rebuild_metadata_page(page)
            return True
        if page < lay.zones_off:
            return self._repair_log_page(page)
        store.unpoison(page)
        store.fill(page, PAGE_SIZE, 0)
        store.persist(page, PAGE_SIZE)
        return True

    def _rebuild_metadata_page(self, page: int) -> None:
        """Regenerate a header, zone-table or bad-page-record page from volatile state."""
        pool = self.pool
        lay = pool.layout
        img = bytearray(PAGE_SIZE)
        if page in (HEADER_OFF, HEADER_REPLICA_OFF):
            raw = pool.header.pack()
            img[:len(raw)] = raw
        elif page in (lay.badpage_off, lay.badpage_replica_off):
            raw = pack_badpages(pool.read_badpages())
            img[:len(raw)] = raw
        else:
            for base in (lay.zone_meta_off, lay.zone_meta_replica_off):
                for z in pool.zones:
                    off = base + z.zone_id * ZONE_META_SIZE
                    if page <= off < page + PAGE_SIZE:
                        img[off - page:off - page + ZONE_META_SIZE] = pack_zone_meta(z)
        pool._rewrite_page(page, bytes(img))

    def _repair_log_page(self, page: int) -> bool:
        pool = self.pool
        store = pool.store
        twin = None
        lo = 0
        for slot in pool.logs.slots:
            if slot.base <= page < slot.base + pool.layout.log_slot_size:
                rel = page - slot.base
                if rel < 2 * PAGE_SIZE:
                    twin = slot.base + (PAGE_SIZE - rel)
                else:
                    a0, a1 = slot.area_offs
                    twin = page + (a1 - a0) if page < a1 else page - (a1 - a0)
                lo = slot.base
                break
        data = bytes(PAGE_SIZE)
        if twin is not None and lo <= twin and page_floor(twin) == twin:
            try:
                data = store.read(twin, PAGE_SIZE)
            except MediaError:
                pass
        pool._rewrite_page(page, data)
        return True

    # -- syndrome repair --------------------------------------------------------------------------
    def syndrome_repair(self, off: int, n: int, validator) -> bool:
        """Undo corruption inside ``[off, off+n)`` using the column syndromes.

        A candidate is accepted only if ``validator`` approves it; otherwise the
        range is left untouched.
        """
        pool = self.pool
        store = pool.store
        zi = pool.zone_index(off)
        if zi is None or not pool.zones[zi].in_data(off):
            return False
        z = pool.zones[zi]
        zp = pool.parity[zi]
        pieces = z.split_rows(off, n)
        for _ in range(z.rows + 1):
            try:
                cur = bytearray(store.read(off, n))
                syn = [zp.column_xor(z.column_of(p), k) for p, k in pieces]
                break
            except MediaError as e:
                if not self.repair_page(e.page_offset):
                    return False
        else:
            return False
        if validator(cur):
            return True
        hot = [i for i, s in enumerate(syn) if s.any()]
        if not hot:
            return False
        tries = [[i] for i in hot] + ([hot] if len(hot) > 1 else [])
        for choice in tries:
            cand = bytearray(cur)
            pos = 0
            starts = []
            for p, k in pieces:
                starts.append(pos)
                pos += k
            for i in choice:
                s = starts[i]
                k = pieces[i][1]
                cand[s:s + k] = (np.frombuffer(cur, dtype=np.uint8, count=k, offset=s) ^ syn[i]).tobytes()
            if validator(cand):
                self._record([(page_floor(off + s), BAD_SYNDROME) for s in range(0, n, PAGE_SIZE)])
                try:
                    store.write(off, bytes(cand))
                    store.persist(off, n)
                finally:
                    self._record([])
                return True
        return False

    def read_repairing(self, off: int, n: int, validator) -> bytes:
        """Read a checksummed range at open time, repairing it from parity if needed."""
        for _ in range(8):
            try:
                raw = self.pool.store.read(off, n)
            except MediaError as e:
                if not self.repair_page(e.page_offset):
                    break
                continue
            if validator(raw):
                return raw
            if not self.syndrome_repair(off, n, validator):
                break
        raise UnrecoverablePool(f"metadata at 0x{off:x} is corrupt and cannot be rebuilt")

    # -- crash recovery ------------------------------------------------------------------------------
    def replay_logs(self) -> list[int]:
        """Finish or discard every interrupted commit; returns the slots replayed."""
        pool = self.pool
        store = pool.store
        replayed = []
        dirty: list[tuple[int, int]] = []
        for slot in pool.logs.slots:
            marker = slot.read_marker()
            rec = slot.read_record()
            if marker == MARK_LOGS_COMPLETE:
                dirty += replay_slot(pool, slot)
                replayed.append(slot.index)
            if rec is not None and rec[3]:
                _, _, _, ext_p, ext_r, ext_len = rec
                for e in (ext_p, ext_r):
                    if e:
                        store.unpoison(e)
                        store.fill(e, ext_len, 0)
                        store.persist(e, ext_len)
                        dirty.append((e, ext_len))
            if marker not in (MARK_EMPTY, None) or (rec is not None and rec[3]):
                if marker == MARK_LOGS_COMPLETE:
                    slot.set_marker(MARK_DONE)
                slot.write_record(pack_slot_record(0, 0, 0))
                slot.set_marker(MARK_EMPTY)
        if dirty and not pool.header.flags & FLAG_PARITY_STALE:
            for off, n in dirty:
                zi = pool.zone_index(off)
                if zi is None:
                    continue
                z = pool.zones[zi]
                lo, hi = max(off, z.base), min(off + n, z.data_end)
                if lo < hi:
                    pool.parity[zi].recompute_range(lo, hi - lo)
        return replayed

    def resume_bad_pages(self) -> None:
        """Re-run a repair that a crash interrupted (repairs are idempotent)."""
        pool = self.pool
        entries = pool.read_badpages()
        if not entries:
            lay = pool.layout
            copies = {pool._read_copy(o, PAGE_SIZE) for o in (lay.badpage_off, lay.badpage_replica_off)}
            if len(copies) > 1:  # a crash between the two copies of a clear
                pool.write_badpages([])
            return
        zones = set()
        for page, state in entries:
            if state == BAD_MEDIA:
                self.repair_page(page)
            else:
                zi = pool.zone_index(page)
                if zi is not None:
                    zones.add(zi)
        pool.write_badpages([])
        if zones and pool.mode.checksums:
            self.scrub(zones=sorted(zones))

    def refresh_all_checksums(self) -> int:
        """Recompute every live object's stored checksum (after a checksum-free mode)."""
        pool = self.pool
        store = pool.store
        n = 0
        for off, size in pool.live_objects():
            img = bytearray(store.read(off, size))
            s, t, c = OBJ_HDR.unpack_from(img, 0)
            want = zlib.adler32(memoryview(img)[16:], zlib.adler32(bytes(img[:12])))
            if s != size or c != want:
                OBJ_HDR.pack_into(img, 0, size, t, 0)
                want = zlib.adler32(memoryview(img)[16:], zlib.adler32(bytes(img[:12])))
                OBJ_HDR.pack_into(img, 0, size, t, want)
                store.write(off, bytes(img[:16]))
                store.persist(off, 16)
                n += 1
        return n

    def recover_all(self) -> dict:
        """Repair every poisoned page, then scrub; used by the offline ``recover`` command."""
        pool = self.pool
        fixed, lost = [], []
        for page in pool.store.poisoned_pages:
            (fixed if self.repair_page(page) else lost).append(page)
        out = {"media_repaired": fixed, "media_unrecoverable": lost}
        if pool.mode.checksums:
            out["scrub"] = self.scrub().as_dict()
        return out

    # -- scrubbing ---------------------------------------------------------------------------------
    def scrub(self, zones=None, scheduled: bool = False) -> ScrubReport:
        """Verify and repair metadata, objects and parity, one frozen zone at a time."""
        pool = self.pool
        if not pool.mode.checksums:
            raise PoolError(f"scrubbing needs object checksums; mode {pool.mode.name} has none")
        if scheduled:
            pool.stats.close_window()
        rep = ScrubReport()
        t0 = time.perf_counter()
        first = True
        for zi in (range(len(pool.zones)) if zones is None else zones):
            outer = self._acquire()
            try:
                pool.freeze()
                try:
                    if first:
                        rep.metadata_checked += 2
                        rep.metadata_repaired += pool.repair_header()
                        first = False
                    rep.metadata_checked += 2
                    rep.metadata_repaired += pool.repair_zone_meta(pool.zones[zi])
                    self._scrub_zone(zi, rep)
                finally:
                    pool.thaw()
            finally:
                if outer:
                    self._release()
        rep.seconds = time.perf_counter() - t0
        with pool.stats.lock:
            pool.stats.scrubs += 1
        return rep

    def _scrub_zone(self, zi: int, rep: ScrubReport) -> None:
        pool = self.pool
        store = pool.store
        z = pool.zones[zi]
        zp = pool.parity[zi]
        alloc = pool.allocators[zi]
        for page in store.poisoned_pages:
            if z.contains(page):
                if self.repair_page(page):
                    rep.media_repaired += 1
                else:
                    rep.unrecoverable.append(page)
        if any(z.contains(p) for p in store.poisoned_pages):
            return
        data = store.array(z.base, z.data_rows * z.row_size)
        base = z.base
        rs = z.record_size
        bad_meta = []
        for i in range(z.data_chunks):
            r = z.record_offset(i) - base
            rep.metadata_checked += 1
            if not ChunkMeta.valid(data[r:r + rs].tobytes()):
                bad_meta.append(z.record_offset(i))
        mv = memoryview(data)
        bad_obj = []
        adler = zlib.adler32
        hdr = OBJ_HDR
        for off, size in alloc.live_objects():
            r = off - base
            rep.objects_scanned += 1
            s, _, c = hdr.unpack_from(mv, r)
            if s != size or c != adler(mv[r + 16:r + size], adler(mv[r:r + 12])):
                bad_obj.append((off, size))
        del mv, data
        rep.mismatches += len(bad_obj) + len(bad_meta)
        failed = []
        for off in bad_meta:
            if self.syndrome_repair(off, rs, ChunkMeta.valid):
                rep.metadata_repaired += 1
            else:
                failed.append((off, rs))
        for off, size in bad_obj:
            if self.syndrome_repair(off, size, lambda img, size=size: object_ok(img, size)):
                rep.repaired += 1
            else:
                failed.append((off, size))
        rep.unrecoverable += [off for off, _ in failed]
        # whatever syndrome remains lies in free space or parity: data wins, parity is fixed
        syn = zp.syndrome()
        protected = np.zeros(z.row_size, dtype=bool)
        for off, size in failed:
            for p, k in z.split_rows(off, size):
                c = z.column_of(p)
                protected[c:c + k] = True
        for col, k in nonzero_runs(syn):
            piece = syn[col:col + k].copy()
            piece[protected[col:col + k]] = 0
            if piece.any():
                store.xor(z.parity_base + col, piece.tobytes())
                store.persist(z.parity_base + col, k)
                rep.parity_ranges_fixed += 1

    # -- read-only check -----------------------------------------------------------------------
    def check(self) -> dict:
        """Report inconsistencies without repairing anything."""
        pool = self.pool
        store = pool.store
        out = {"poisoned_pages": store.poisoned_pages, "zones": [], "header_ok": True}
        try:
            raw = [store.read(o, PAGE_SIZE) for o in (HEADER_OFF, HEADER_REPLICA_OFF)]
            out["header_ok"] = raw[0] == raw[1]
        except MediaError:
            out["header_ok"] = False
        problems = len(out["poisoned_pages"]) + (not out["header_ok"])
        pending = [s.index for s in pool.logs.slots if s.read_marker() not in (MARK_EMPTY,)]
        out["pending_logs"] = pending
        problems += len(pending)
        out["bad_page_record"] = pool.read_badpages()
        problems += len(out["bad_page_record"])
        for zi, z in enumerate(pool.zones):
            zr = {"zone": zi, "parity_ranges": [], "checksum_mismatches": [], "metadata_mismatches": [],
                  "unreadable": [], "objects": 0}
            try:
                zm = [store.read(b + zi * ZONE_META_SIZE, ZONE_META_SIZE)
                      for b in (pool.layout.zone_meta_off, pool.layout.zone_meta_replica_off)]
                if any(r != pack_zone_meta(z) for r in zm):
                    zr["metadata_mismatches"].append("zone_meta")
            except MediaError as e:
                zr["unreadable"].append(e.page_offset)
            if not pool.header.flags & FLAG_PARITY_STALE:
                try:
                    zr["parity_ranges"] = pool.parity[zi].check()
                except MediaError as e:
                    zr["unreadable"].append(e.page_offset)
            rs = z.record_size
            for i in range(z.data_chunks):
                try:
                    if not ChunkMeta.valid(store.read(z.record_offset(i), rs)):
                        zr["metadata_mismatches"].append(z.record_offset(i))
                except MediaError as e:
                    zr["unreadable"].append(e.page_offset)
            if pool.mode.checksums:
                for off, size in pool.allocators[zi].live_objects():
                    zr["objects"] += 1
                    try:
                        if not object_ok(store.read(off, size), size):
                            zr["checksum_mismatches"].append(off)
                    except MediaError as e:
                        zr["unreadable"].append(e.page_offset)
            zr["unreadable"] = sorted(set(zr["unreadable"]))
            problems += (len(zr["parity_ranges"]) + len(zr["checksum_mismatches"])
                         + len(zr["metadata_mismatches"]) + len(zr["unreadable"]))
            out["zones"].append(zr)
        out["problems"] = problems
        out["ok"] = problems == 0
        return out

    # -- fault injection -----------------------------------------------------------------------------
    def inject_fault(self, kind: str, target: str = "object", seed: int = 0,
                     size: int | None = None, offset: int | None = None) -> dict:
        """Damage the pool out of band.

        ``kind`` is ``media`` (erase a page and poison it so the next load
        faults) or ``scribble`` (XOR random nonzero bytes into a range confined
        to one chunk row).  ``target`` picks where: object, data, parity, page,
        free or metadata; ``offset`` overrides the choice.
        """
        pool = self.pool
        store = pool.store
        rng = random.Random(seed)
        if kind not in ("media", "scribble"):
            raise ValueError(f"unknown fault kind {kind!r}")
        if offset is None:
            offset = self._pick_target(rng, kind, target, size)
        if kind == "media":
            page = page_floor(offset)
            store.fill(page, PAGE_SIZE, 0)
            store.persist(page, PAGE_SIZE)
            store.poison(page)
            return {"kind": "media", "target": target, "offset": page, "length": PAGE_SIZE, "seed": seed}
        zi = pool.zone_index(offset)
        n = size or rng.randint(1, PAGE_SIZE)
        if zi is not None:
            z = pool.zones[zi]
            n = min(n, z.row_size)
            row_end = z.base + (z.row_of(offset) + 1) * z.row_size
            offset = min(offset, row_end - n)
        n = min(n, pool.layout.pool_size - offset)
        old = np.frombuffer(store.read(offset, n), dtype=np.uint8)
        noise = np.frombuffer(rng.randbytes(n), dtype=np.uint8) | 1
        store.write(offset, (old ^ noise).tobytes())
        store.persist(offset, n)
        return {"kind": "scribble", "target": target, "offset": offset, "length": n, "seed": seed}

    def _pick_target(self, rng: random.Random, kind: str, target: str, size) -> int:
        pool = self.pool
        zones = pool.zones
        z = zones[rng.randrange(len(zones))]
        if target == "object":
            objs = sorted(pool.live_objects())
            if not objs:
                raise PoolError("no live objects to target")
            off, sz = objs[rng.randrange(len(objs))]
            return off + rng.randrange(sz)
        if target == "parity":
            return z.parity_base + rng.randrange(z.row_size)
        if target == "data":
            return z.base + rng.randrange(z.data_rows * z.row_size)
        if target == "page":
            return z.base + rng.randrange(z.size)
        if target == "metadata":
            if kind == "media":
                lay = pool.layout
                choices = [HEADER_OFF, HEADER_REPLICA_OFF, lay.zone_meta_off, lay.zone_meta_replica_off]
                choices += [z.base + p * PAGE_SIZE
                            for p in range(-(-z.data_chunks * z.record_size // PAGE_SIZE))]
                return rng.choice(choices)
            return z.record_offset(rng.randrange(z.data_chunks)) + rng.randrange(z.record_size)
        if target == "free":
            used = np.zeros(z.data_rows * z.row_size // PAGE_SIZE, dtype=bool)
            meta_pages = -(-z.data_chunks * z.record_size // PAGE_SIZE)
            used[:meta_pages] = True
            for off, sz in pool.allocators[z.zone_id].live_objects():
                used[(off - z.base) // PAGE_SIZE:(off - z.base + sz - 1) // PAGE_SIZE + 1] = True
            free = np.flatnonzero(~used)
            if free.size == 0:
                raise PoolError("no free page to target")
            return z.base + int(free[rng.randrange(free.size)]) * PAGE_SIZE
        raise ValueError(f"unknown target {target!r}")


class Scrubber(threading.Thread):
    """Background worker that scrubs whenever the commit path asks it to."""

    def __init__(self, pool):
        super().__init__(name="pool-scrubber", daemon=True)
        self.pool = pool
        self._event = threading.Event()
        self._halt = False
        self.errors: list[BaseException] = []
        self.reports: list[ScrubReport] = []

    def request(self) -> None:
        self._event.set()

    def run(self) -> None:
        while True:
            self._event.wait()
            self._event.clear()
            if self._halt:
                return
            try:
                self.reports.append(self.pool.recovery.scrub(scheduled=True))
            except Exception as e:  # keep the worker alive; errors surface via .errors
                self.errors.append(e)

    def stop(self) -> None:
        self._halt = True
        self._event.set()
        self.join()
