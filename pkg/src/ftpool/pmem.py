"""Persistence layer: a pool file mapped into the process plus a crash simulator.

Two backends share one interface:

* :class:`FileStore` maps a regular file with ``mmap``.  Stores land in the
  page cache, which already survives a process crash; ``persist`` additionally
  issues ``msync`` when the store was opened with ``sync=True``.
* :class:`SimStore` keeps a volatile image and a durable image.  Every 8-byte
  unit written since its last ``persist`` is pending; :meth:`SimStore.crash_image`
  independently keeps or drops each pending unit.

Media errors are emulated with a poisoned-page set: any read that touches a
poisoned page raises :class:`~ftpool.errors.MediaError`.  CPython cannot resume
after a real ``SIGSEGV`` so page protection is enforced in software here.
"""

from __future__ import annotations

import itertools
import json
import mmap
import os
import threading
import time
from pathlib import Path

import numpy as np

from .errors import LayoutError, MediaError, SimulatedCrash

PAGE_SIZE = 4096
_NUMPY_XOR_MIN = 256


def page_floor(off: int) -> int:
    return off - off % PAGE_SIZE


class PersistentStore:
    backend = "abstract"

    def __init__(self, length: int):
        if length <= 0 or length % PAGE_SIZE:
            raise LayoutError(f"store length {length} is not a positive multiple of {PAGE_SIZE}")
        self.length = length
        self.page_size = PAGE_SIZE
        self._poisoned: set[int] = set()
        self.init_seconds = 0.0
        self.bytes_written = 0  # every mutating call, durable or not

    # -- bounds and poison -------------------------------------------------
    def _check(self, off: int, n: int) -> None:
        if off < 0 or n < 0 or off + n > self.length:
            raise ValueError(f"range [{off}, {off + n}) outside store of {self.length} bytes")

    def _check_poison(self, off: int, n: int) -> None:
        if n <= 0:
            return
        lo = page_floor(off)
        hi = off + n
        for page in sorted(self._poisoned):
            if lo <= page < hi:
                raise MediaError(page)

    @property
    def poisoned_pages(self) -> list[int]:
        return sorted(self._poisoned)

    def is_poisoned(self, page_off: int) -> bool:
        return page_floor(page_off) in self._poisoned

    def poison(self, page_off: int) -> None:
        if page_off % PAGE_SIZE:
            raise ValueError("poison target must be page aligned")
        self._check(page_off, PAGE_SIZE)
        self._poisoned.add(page_off)
        self._poison_changed()

    def unpoison(self, page_off: int) -> None:
        self._poisoned.discard(page_floor(page_off))
        self._poison_changed()

    def _poison_changed(self) -> None:
        pass

    # -- reads ---------------------------------------------------------------
    def read(self, off: int, n: int) -> bytes:
        self._check(off, n)
        if self._poisoned:
            self._check_poison(off, n)
        return bytes(self._mem[off:off + n])

    def array(self, off: int, n: int) -> np.ndarray:
        """Read-only uint8 view of ``[off, off+n)``; do not hold it across close()."""
        self._check(off, n)
        if self._poisoned:
            self._check_poison(off, n)
        view = self._arr[off:off + n]
        view.flags.writeable = False
        return view

    def load64(self, off: int) -> int:
        if off % 8:
            raise ValueError("64-bit load must be 8-byte aligned")
        self._check(off, 8)
        if self._poisoned:
            self._check_poison(off, 8)
        return int(self._u64[off >> 3])

    def snapshot(self) -> bytes:
        """Whole image, ignoring poison (test oracle / inspection only)."""
        return bytes(self._mem[:self.length])

    # -- writes --------------------------------------------------------------
    def write(self, off: int, data) -> None:
        n = len(data)
        self._check(off, n)
        self._mem[off:off + n] = data
        self.bytes_written += n

    def fill(self, off: int, n: int, byte: int = 0) -> None:
        self._check(off, n)
        self._arr[off:off + n] = byte
        self.bytes_written += n

    def xor(self, off: int, delta) -> None:
        """XOR ``delta`` into ``[off, off+len(delta))``."""
        n = len(delta)
        self._check(off, n)
        self.bytes_written += n
        if n >= _NUMPY_XOR_MIN or isinstance(delta, np.ndarray):
            d = delta if isinstance(delta, np.ndarray) else np.frombuffer(delta, dtype=np.uint8)
            self._arr[off:off + n] ^= d
        else:
            cur = int.from_bytes(self._mem[off:off + n], "little")
            self._mem[off:off + n] = (cur ^ int.from_bytes(delta, "little")).to_bytes(n, "little")

    def atomic_store64(self, off: int, value: int) -> None:
        if off % 8:
            raise ValueError("atomic 64-bit store must be 8-byte aligned")
        self._check(off, 8)
        self._u64[off >> 3] = value
        self.bytes_written += 8

    def persist(self, off: int, n: int) -> None:
        self._check(off, n)

    def close(self) -> None:
        pass


class FileStore(PersistentStore):
    """A pool file mapped with ``mmap``.

    The emulated poison list is kept in a ``<pool>.poison`` sidecar so that a
    poisoned page stays poisoned across process restarts, as real media would.
    """

    backend = "file"

    def __init__(self, path, length: int | None = None, create: bool = False, sync: bool = False):
        path = Path(path)
        if create:
            if length is None:
                raise LayoutError("length is required to create a pool file")
            super().__init__(length)
            t0 = time.perf_counter()
            zeros = bytes(1 << 20)
            with open(path, "wb") as f:
                left = length
                while left:
                    k = min(left, len(zeros))
                    f.write(zeros[:k])
                    left -= k
                f.flush()
                os.fsync(f.fileno())
            self.init_seconds = time.perf_counter() - t0
        else:
            size = path.stat().st_size
            if length is not None and length != size:
                raise LayoutError(f"{path} is {size} bytes, expected {length}")
            super().__init__(size)
        self.path = path
        self.sync = sync
        self._fd = os.open(path, os.O_RDWR)
        self._mem = mmap.mmap(self._fd, self.length, access=mmap.ACCESS_WRITE)
        self._arr = np.frombuffer(self._mem, dtype=np.uint8)
        self._u64 = self._arr.view(np.uint64)
        self._sidecar = path.with_name(path.name + ".poison")
        if create and self._sidecar.exists():
            self._sidecar.unlink()
        if self._sidecar.exists():
            self._poisoned = set(json.loads(self._sidecar.read_text()))

    def _poison_changed(self) -> None:
        if self._poisoned:
            self._sidecar.write_text(json.dumps(sorted(self._poisoned)))
        elif self._sidecar.exists():
            self._sidecar.unlink()

    def persist(self, off: int, n: int) -> None:
        self._check(off, n)
        if self.sync and n:
            lo = off - off % mmap.ALLOCATIONGRANULARITY
            self._mem.flush(lo, off + n - lo)

    def close(self) -> None:
        if self._mem is None:
            return
        del self._u64
        del self._arr
        self._mem.close()
        os.close(self._fd)
        self._mem = None


class SimStore(PersistentStore):
    """In-memory store that models which stores are durable at a crash.

    ``crash_after(k)`` arms a crash point: the k-th subsequent mutating call
    (write, fill, xor, atomic_store64, persist) raises
    :class:`~ftpool.errors.SimulatedCrash` instead of executing.
    """

    backend = "sim"

    def __init__(self, length: int, image: bytes | None = None):
        super().__init__(length)
        if image is not None and len(image) != length:
            raise LayoutError("image length does not match store length")
        self._mem = bytearray(image) if image is not None else bytearray(length)
        self._durable = bytearray(self._mem)
        self._arr = np.frombuffer(self._mem, dtype=np.uint8)
        self._u64 = self._arr.view(np.uint64)
        self._dirty = np.zeros(length // 8, dtype=bool)
        self._lock = threading.RLock()
        self.ops = 0
        self._crash_at: int | None = None
        self.crashed = False

    @classmethod
    def from_image(cls, image, poisoned=()) -> "SimStore":
        s = cls(len(image), bytes(image))
        s._poisoned = set(poisoned)
        return s

    def clone(self) -> "SimStore":
        """Independent copy with the same volatile, durable and pending state."""
        with self._lock:
            c = SimStore(self.length, bytes(self._mem))
            c._durable[:] = self._durable
            c._dirty[:] = self._dirty
            c._poisoned = set(self._poisoned)
            return c

    def crash_after(self, k: int | None) -> None:
        self._crash_at = None if k is None else self.ops + k

    def _tick(self) -> None:
        # once crashed the machine is off: cleanup handlers must not reach media
        if self.crashed:
            raise SimulatedCrash("store is down after a simulated crash")
        self.ops += 1
        if self._crash_at is not None and self.ops >= self._crash_at:
            self._crash_at = None
            self.crashed = True
            raise SimulatedCrash(f"simulated crash at op {self.ops}")

    def _mark(self, off: int, n: int) -> None:
        if n:
            self._dirty[off >> 3:(off + n + 7) >> 3] = True

    def write(self, off, data):
        with self._lock:
            self._tick()
            super().write(off, data)
            self._mark(off, len(data))

    def fill(self, off, n, byte=0):
        with self._lock:
            self._tick()
            super().fill(off, n, byte)
            self._mark(off, n)

    def xor(self, off, delta):
        with self._lock:
            self._tick()
            super().xor(off, delta)
            self._mark(off, len(delta))

    def atomic_store64(self, off, value):
        with self._lock:
            self._tick()
            super().atomic_store64(off, value)
            self._mark(off, 8)

    def persist(self, off, n):
        self._check(off, n)
        with self._lock:
            self._tick()
            if not n:
                return
            u0, u1 = off >> 3, (off + n + 7) >> 3
            self._durable[u0 << 3:u1 << 3] = self._mem[u0 << 3:u1 << 3]
            self._dirty[u0:u1] = False

    # -- crash images ----------------------------------------------------------
    @property
    def pending_units(self) -> np.ndarray:
        """Offsets of 8-byte units written but not yet persisted."""
        return np.flatnonzero(self._dirty) * 8

    @property
    def durable_image(self) -> bytes:
        return bytes(self._durable)

    def crash_image(self, rng: np.random.Generator | None = None) -> bytes:
        """One post-crash image: each pending unit kept or dropped with p=1/2."""
        rng = rng if rng is not None else np.random.default_rng()
        with self._lock:
            units = np.flatnonzero(self._dirty)
            keep = units[rng.random(units.size) < 0.5]
            out = np.frombuffer(bytearray(self._durable), dtype=np.uint64)
            out[keep] = self._u64[keep]
            return out.tobytes()

    def all_crash_images(self, limit: int = 10):
        """Yield every post-crash image; refuses more than ``limit`` pending units."""
        with self._lock:
            units = np.flatnonzero(self._dirty)
            if units.size > limit:
                raise ValueError(f"{units.size} pending units exceed enumeration limit {limit}")
            durable = np.frombuffer(bytes(self._durable), dtype=np.uint64)
            cur = self._u64.copy()
        for choice in itertools.product((False, True), repeat=int(units.size)):
            out = durable.copy()
            sel = units[np.array(choice, dtype=bool)] if units.size else units
            out[sel] = cur[sel]
            yield out.tobytes()

    def crash(self, rng: np.random.Generator | None = None) -> "SimStore":
        """Return a fresh store holding one post-crash image (poison survives)."""
        return SimStore.from_image(self.crash_image(rng), self._poisoned)


def map_pool(path=None, length: int | None = None, create: bool = False,
             backend: str = "file", sync: bool = False) -> PersistentStore:
    """Map a pool file (or build a simulated store when ``backend='sim'``)."""
    if length is not None and length % PAGE_SIZE:
        raise LayoutError(f"pool length {length} is not page aligned")
    if backend == "sim":
        if length is None:
            raise LayoutError("simulated store needs a length")
        return SimStore(length)
    if backend != "file":
        raise ValueError(f"unknown backend {backend!r}")
    return FileStore(path, length, create=create, sync=sync)


def crash_and_recover_image(store: PersistentStore, rng=None) -> bytes:
    if not isinstance(store, SimStore):
        raise TypeError("crash images are only available from the simulated backend")
    return store.crash_image(rng)
