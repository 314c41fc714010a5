"""Redo-logged transactions over micro-buffers.

Each log slot is ``[header page][header replica page][primary area][replica area]``.
The first 8 bytes of each header page are the commit marker, changed only by
an atomic 64-bit store followed by a persist.  The rest of the header names
the entry stream: its entry count and length and, when the stream did not fit
the slot's area, the overflow extents borrowed from a zone's idle chunks.

Commit, in order:

1. check every micro-buffer's canaries;
2. refresh object checksums from the modified ranges;
3. read the bytes about to be overwritten (their XOR with the new bytes is
   the parity delta);
4. write and persist the entries, their replicas and the header, then set the
   marker to ``LOGS_COMPLETE``;
5. write the new bytes in place and persist;
6. XOR the deltas into parity and persist;
7. set the marker to ``DONE``, release overflow extents, set it to ``EMPTY``.
"""

from __future__ import annotations

import functools
import queue
import re
import struct
import threading
from dataclasses import replace

from .checksum import adler32
from .errors import (CanaryViolation, DoubleFree, InvalidObject, MediaError, PoolError,
                     TransactionAborted, UnrecoverablePool)
from .mbuf import MicroBuffer, TxBufferIndex
from .parity import xor_bytes
from .pmem import PAGE_SIZE
from .pool import HEADER_OFF, HEADER_REPLICA_OFF
from .zone import OBJ_HDR, OBJ_HEADER_SIZE, ObjectRef

MARK_EMPTY = 0
MARK_LOGS_COMPLETE = 0x4554454C504D4F43
MARK_DONE = 0x454E4F44474F4C00

ENTRY_HDR = struct.Struct("<QQI")
_ENTRY_KEY = struct.Struct("<QQ")
SLOT_REC = struct.Struct("<QQQQQQ")  # seq, n_entries, stream_len, ext_primary, ext_replica, ext_len
_U32 = struct.Struct("<I")
SLOT_REC_OFF = 8
SLOT_REC_SIZE = SLOT_REC.size + 4


def _align8(n: int) -> int:
    return (n + 7) & ~7


def entry_checksum(target: int, payload) -> int:
    return adler32(payload, adler32(_ENTRY_KEY.pack(target, len(payload))))


def encode_entries(entries) -> bytes:
    out = bytearray()
    for target, data in entries:
        out += ENTRY_HDR.pack(target, len(data), entry_checksum(target, data))
        out += data
        pad = _align8(len(out)) - len(out)
        if pad:
            out += bytes(pad)
    return bytes(out)


def decode_entries(stream, n_entries: int):
    """Yield ``(target, payload, valid, start)`` for each entry of a stream."""
    pos = 0
    end = len(stream)
    for _ in range(n_entries):
        if pos + ENTRY_HDR.size > end:
            yield None, b"", False, pos
            return
        target, ln, csum = ENTRY_HDR.unpack_from(stream, pos)
        body = pos + ENTRY_HDR.size
        if body + ln > end:
            yield target, b"", False, pos
            return
        payload = bytes(stream[body:body + ln])
        yield target, payload, entry_checksum(target, payload) == csum, pos
        pos = _align8(body + ln)


def pack_slot_record(seq, n_entries, stream_len, ext_primary=0, ext_replica=0, ext_len=0) -> bytes:
    body = SLOT_REC.pack(seq, n_entries, stream_len, ext_primary, ext_replica, ext_len)
    return body + _U32.pack(adler32(body))


def unpack_slot_record(raw):
    body = bytes(raw[:SLOT_REC.size])
    if _U32.unpack_from(raw, SLOT_REC.size)[0] != adler32(body):
        return None
    return SLOT_REC.unpack(body)


@functools.lru_cache(maxsize=None)
def _span_pattern(bridge: int) -> re.Pattern:
    if bridge <= 0:
        return re.compile(rb"[^\x00]+")
    return re.compile(rb"[^\x00]+(?:\x00{1,%d}[^\x00]+)*" % bridge)


def diff_spans(old, new, bridge: int = 8):
    """Ranges ``(start, end)`` where ``old`` and ``new`` differ, equal gaps up to ``bridge`` bridged."""
    n = len(old)
    x = (int.from_bytes(old, "little") ^ int.from_bytes(new, "little")).to_bytes(n, "little")
    return [m.span() for m in _span_pattern(bridge).finditer(x)]


class LogSlot:
    def __init__(self, pool, index: int):
        lay = pool.layout
        self.pool = pool
        self.index = index
        self.base = lay.log_off + index * lay.log_slot_size
        self.header_offs = (self.base, self.base + PAGE_SIZE)
        self.area_size = (lay.log_slot_size - 2 * PAGE_SIZE) // 2 // 8 * 8
        self.area_offs = (self.base + 2 * PAGE_SIZE, self.base + 2 * PAGE_SIZE + self.area_size)
        self.seq = 0
        self.extents: list[tuple[int, int, int]] = []  # (zone, offset, length)

    # -- marker and record ---------------------------------------------------------------------
    def set_marker(self, value: int) -> None:
        store = self.pool.store
        for off in self.header_offs:
            store.atomic_store64(off, value)
            store.persist(off, 8)

    def read_marker(self) -> int | None:
        for off in self.header_offs:
            try:
                return self.pool.store.load64(off)
            except MediaError:
                continue
        return None

    def write_record(self, rec: bytes) -> None:
        store = self.pool.store
        for off in self.header_offs:
            store.write(off + SLOT_REC_OFF, rec)
            store.persist(off + SLOT_REC_OFF, len(rec))

    def read_record(self):
        for off in self.header_offs:
            try:
                raw = self.pool.store.read(off + SLOT_REC_OFF, SLOT_REC_SIZE)
            except MediaError:
                continue
            rec = unpack_slot_record(raw)
            if rec is not None:
                return rec
        return None

    # -- entry stream ------------------------------------------------------------------------------
    def write_stream(self, stream: bytes, n_entries: int) -> None:
        pool = self.pool
        store = pool.store
        replicate = pool.mode.replicate
        self.seq += 1
        if len(stream) <= self.area_size:
            self.write_record(pack_slot_record(self.seq, n_entries, len(stream)))
            targets = self.area_offs if replicate else self.area_offs[:1]
        else:
            targets = self._borrow_extents(len(stream), 2 if replicate else 1, n_entries)
        for off in targets:
            store.write(off, stream)
            store.persist(off, len(stream))
        pool.stats.log_bytes += len(stream) * len(targets)

    def _borrow_extents(self, nbytes: int, copies: int, n_entries: int) -> list[int]:
        """Claim overflow extents, register them, and make parity treat them as zeros."""
        pool = self.pool
        got = []
        try:
            for _ in range(copies):
                zi = pool.pick_zone()
                for k in range(len(pool.zones)):
                    z = (zi + k) % len(pool.zones)
                    try:
                        off, ln = pool.allocators[z].claim_extent(nbytes)
                    except PoolError:
                        continue
                    got.append((z, off, ln))
                    break
                else:
                    from .errors import OutOfSpace
                    raise OutOfSpace(f"no space for a {nbytes}-byte overflow log")
        except BaseException:
            for z, off, ln in got:
                pool.allocators[z].release_extent(off, ln)
            raise
        self.extents = got
        prim = got[0][1]
        repl = got[1][1] if len(got) > 1 else 0
        self.write_record(pack_slot_record(self.seq, n_entries, nbytes, prim, repl, got[0][2]))
        for z, off, ln in got:
            zp = pool.parity[z]
            zp.exempt[off] = ln
            if pool.mode.parity:
                zp.apply_data_delta(off, pool.store.read(off, ln))
        return [off for _, off, _ in got]

    def release_extents(self) -> None:
        pool = self.pool
        if not self.extents:
            return
        for z, off, ln in self.extents:
            pool.store.fill(off, ln, 0)
            pool.store.persist(off, ln)
            pool.parity[z].exempt.pop(off, None)
        self.write_record(pack_slot_record(self.seq, 0, 0))
        for z, off, ln in self.extents:
            pool.allocators[z].release_extent(off, ln)
        self.extents = []

    def finish(self) -> None:
        self.set_marker(MARK_DONE)
        self.release_extents()
        self.set_marker(MARK_EMPTY)


class LogManager:
    """Hands each committing transaction a free log slot."""

    def __init__(self, pool):
        self.pool = pool
        self.slots = [LogSlot(pool, i) for i in range(pool.layout.log_slots)]
        self._free: queue.SimpleQueue = queue.SimpleQueue()
        for s in self.slots:
            self._free.put(s)

    def acquire(self) -> LogSlot:
        return self._free.get()

    def release(self, slot: LogSlot) -> None:
        self._free.put(slot)


class Transaction:
    """One thread's (possibly nested) transaction; obtain with ``pool.transaction()``."""

    def __init__(self, pool):
        self.pool = pool
        self.depth = 1
        self.state = "active"
        self.thread = threading.get_ident()
        self.index = TxBufferIndex()
        self.intents: dict[int, list] = {}
        self.allocated: dict[int, tuple] = {}
        self.freed: dict[int, tuple] = {}
        self.alloc_bytes = 0
        self.new_root: int | None = None
        self.wrote = False
        self.explicit_abort = False

    # -- state ---------------------------------------------------------------------------------------
    def _active(self) -> None:
        if self.state != "active":
            raise TransactionAborted(f"transaction is {self.state}")
        if threading.get_ident() != self.thread:
            raise PoolError("transaction used from a thread that does not own it")

    # -- object access -----------------------------------------------------------------------------
    def open(self, ref: ObjectRef, verify: bool = True) -> MicroBuffer:
        """The transaction's micro-buffer for ``ref``, created on first use."""
        self._active()
        pool = self.pool
        buf = self.index.get(ref.offset)
        if buf is not None:
            return buf
        if ref.offset in self.freed:
            raise InvalidObject(f"object at 0x{ref.offset:x} was freed in this transaction")
        o, size = pool.resolve(ref)
        check = verify and pool.mode.checksums
        img = pool.read_object(o, size, verify=check)
        pool.stats.access(size - OBJ_HEADER_SIZE, check)
        buf = MicroBuffer(ref, img)
        self.index.put(buf)
        return buf

    def add_range(self, ref: ObjectRef, off: int, n: int) -> memoryview:
        return self.open(ref).add_range(off, n)

    def write(self, ref: ObjectRef, off: int, data) -> None:
        self.add_range(ref, off, len(data))[:] = data

    def get(self, ref: ObjectRef):
        """Shadow payload if this transaction opened ``ref``, else a bytes copy."""
        self._active()
        buf = self.index.get(ref.offset)
        if buf is not None:
            return buf.data
        return self.pool.read_payload(ref)

    def read(self, ref: ObjectRef, off: int, n: int) -> bytes:
        self._active()
        buf = self.index.get(ref.offset)
        if buf is not None:
            if off < 0 or n < 0 or off + n > buf.payload_size:
                raise IndexError("read outside the payload")
            return bytes(buf.data[off:off + n])
        return self.pool.read_payload(ref, off, n)

    def adopt(self, buf: MicroBuffer) -> None:
        """Take ownership of a detached buffer so it commits with this transaction."""
        self._active()
        if self.index.get(buf.offset) is not None:
            raise PoolError("object already open in this transaction")
        self.pool.slot_size(buf.offset)
        self.index.put(buf)

    # -- allocation -------------------------------------------------------------------------------------
    def alloc(self, size: int, type_id: int = 0) -> ObjectRef:
        """Reserve a zeroed object; it becomes live only if the transaction commits."""
        self._active()
        if size <= 0:
            raise ValueError("allocation size must be positive")
        pool = self.pool
        zi = pool.pick_zone()
        last = None
        for k in range(len(pool.zones)):
            z = (zi + k) % len(pool.zones)
            try:
                off, slot, intent = pool.allocators[z].reserve(size)
                break
            except PoolError as e:
                last = e
        else:
            raise last
        self.intents.setdefault(z, []).append(intent)
        self.allocated[off] = (z, intent)
        self.alloc_bytes += size
        ref = pool.ref(off)
        img = bytearray(slot)
        OBJ_HDR.pack_into(img, 0, slot, type_id & 0xFFFFFFFF, 0)
        self.index.put(MicroBuffer(ref, img, allocated=True))
        return ref

    def free(self, ref: ObjectRef) -> None:
        self._active()
        pool = self.pool
        o = pool.locate(ref)
        if o is None:
            raise InvalidObject("cannot free the null reference")
        if o in self.allocated:
            z, intent = self.allocated.pop(o)
            self.intents[z].remove(intent)
            pool.allocators[z].release([intent])
            self.index.pop(o)
            return
        if o in self.freed:
            raise DoubleFree(f"object at 0x{o:x} freed twice in one transaction")
        zi = pool.zone_index(o)
        try:
            intent = pool.allocators[zi].free_intent(o)
        except InvalidObject as e:
            raise DoubleFree(f"object at 0x{o:x} is not live") from e
        self.intents.setdefault(zi, []).append(intent)
        self.freed[o] = (zi, intent)
        self.index.pop(o)

    def set_root(self, ref: ObjectRef) -> None:
        self._active()
        self.new_root = self.pool.locate(ref) or 0

    # -- termination ------------------------------------------------------------------------------------
    def abort(self, reason: str = "aborted by caller"):
        """Discard everything; raises so the enclosing ``with`` unwinds."""
        self.explicit_abort = True
        self.abort_quiet()
        e = TransactionAborted(reason)
        e.explicit = True
        raise e

    def abort_quiet(self) -> None:
        if self.state not in ("active", "committing"):
            return
        self.state = "aborted"
        self.pool.stats.aborts += 1
        for z, ints in self.intents.items():
            reserve = [i for i in ints if i.kind in ("slot", "large")]
            if reserve:
                self.pool.allocators[z].release(reserve)
        self.intents.clear()
        self.index.clear()

    def finish(self) -> None:
        if self.state == "active":
            self.abort_quiet()
        self.index.clear()

    def commit(self) -> None:
        """Commit now; only the outermost level commits, inner levels return."""
        if self.depth > 1:
            return
        self._active()
        pool = self.pool
        self.state = "committing"
        try:
            self._commit()
        except BaseException:
            if self.state == "committing":
                self.abort_quiet()
            raise
        self.state = "done"
        self.index.clear()

    def _commit(self) -> None:
        pool = self.pool
        mode = pool.mode
        for b in self.index:
            if not b.canary_ok():
                raise CanaryViolation(b.ref)
        bufs = sorted((b for b in self.index if b.modified), key=lambda b: b.offset)
        obj_entries: list[tuple[int, bytes]] = []
        modified = 0
        for b in bufs:
            if not b.allocated:
                modified += sum(e - s for s, e in b.ranges)
            if mode.checksums:
                b.refresh_checksum()
            raw = b.raw
            for s, e in b.ranges:
                obj_entries.append((b.offset + s, bytes(raw[8 + s:8 + e])))
        locked = sorted(z for z, ints in self.intents.items() if ints)
        while True:
            obj_olds = self._old_bytes(obj_entries) if mode.parity else None
            fault = None
            for z in locked:
                pool.allocators[z].lock.acquire()
            header_lock = self.new_root is not None
            if header_lock:
                pool._header_lock.acquire()
            try:
                entries = list(obj_entries)
                staged = {}
                for z in locked:
                    a = pool.allocators[z]
                    staged[z] = a.stage(self.intents[z])
                    for rec_off, old, new in a.records_changed(staged[z]):
                        for s, e in diff_spans(old, new):
                            entries.append((rec_off + s, new[s:e]))
                if header_lock:
                    h = replace(pool.header, root_offset=self.new_root)
                    raw = h.pack()
                    entries.append((HEADER_OFF, raw))
                    entries.append((HEADER_REPLICA_OFF, raw))
                olds = None
                if mode.parity:
                    try:
                        olds = obj_olds + [pool.store.read(t, len(d)) for t, d in entries[len(obj_entries):]]
                    except MediaError as e:
                        # repair needs the pool frozen; never wait for it while holding locks
                        fault = e
                if fault is None:
                    if entries:
                        self._write_through(entries, olds)
                        self.wrote = True
                    if header_lock:
                        pool.header = h
                    for z in locked:
                        pool.allocators[z].apply_staged(staged[z], self.intents[z])
                    self.intents.clear()
            finally:
                if header_lock:
                    pool._header_lock.release()
                for z in reversed(locked):
                    pool.allocators[z].lock.release()
            if fault is None:
                break
            pool.recovery.on_media_error(fault)
        st = pool.stats
        with st.lock:
            if self.wrote:
                st.commits += 1
                st.tx_objects += len(bufs)
                st.tx_alloc_bytes += self.alloc_bytes
                st.tx_allocs += len(self.allocated)
                st.tx_modified_bytes += modified
                st.tx_frees += len(self.freed)

    def _old_bytes(self, entries) -> list[bytes]:
        pool = self.pool
        olds = []
        for target, data in entries:
            while True:
                try:
                    olds.append(pool.store.read(target, len(data)))
                    break
                except MediaError as e:
                    pool.recovery.on_media_error(e)
        return olds

    def _write_through(self, entries, olds) -> None:
        pool = self.pool
        store = pool.store
        parity = olds is not None
        stream = encode_entries(entries)
        slot = pool.logs.acquire()
        try:
            slot.write_stream(stream, len(entries))
            try:
                for off in slot.header_offs:
                    store.atomic_store64(off, MARK_LOGS_COMPLETE)
                    store.persist(off, 8)
                    # the first durable copy commits: from here only crash recovery may finish it
                    self.state = "durable"
                for target, data in entries:
                    store.write(target, data)
                    store.persist(target, len(data))
                if parity:
                    for (target, data), old in zip(entries, olds):
                        zi = pool.zone_index(target)
                        if zi is not None and pool.zones[zi].in_data(target):
                            pool.parity[zi].apply_data_delta(target, xor_bytes(old, data))
                slot.finish()
            except BaseException as e:
                if self.state == "durable":
                    pool.mark_crashed(e)
                raise
        finally:
            pool.logs.release(slot)


def replay_slot(pool, slot: LogSlot) -> list[tuple[int, int]]:
    """Re-apply a complete log; returns the ``(offset, length)`` ranges written."""
    rec = slot.read_record()
    if rec is None:
        raise UnrecoverablePool(f"log slot {slot.index}: marker complete but header unreadable")
    _, n_entries, stream_len, ext_p, ext_r, _ = rec
    if ext_p:
        areas = [ext_p] + ([ext_r] if ext_r else [])
    else:
        areas = list(slot.area_offs)
    streams = []
    for off in areas:
        try:
            streams.append(pool.store.read(off, stream_len))
        except MediaError:
            streams.append(None)
    decoded = [list(decode_entries(s, n_entries)) if s is not None else None for s in streams]
    written = []
    for i in range(n_entries):
        chosen = None
        for d in decoded:
            if d is not None and i < len(d) and d[i][2]:
                chosen = d[i]
                break
        if chosen is None:
            raise UnrecoverablePool(f"log slot {slot.index}: entry {i} invalid in every copy")
        target, payload = chosen[0], chosen[1]
        if target in (0, PAGE_SIZE) and pool.store.is_poisoned(target):
            pool.store.unpoison(target)
        pool.store.write(target, payload)
        pool.store.persist(target, len(payload))
        written.append((target, len(payload)))
    return written


__all__ = ["Transaction", "LogManager", "LogSlot", "replay_slot", "encode_entries", "decode_entries",
           "MARK_EMPTY", "MARK_LOGS_COMPLETE", "MARK_DONE"]
