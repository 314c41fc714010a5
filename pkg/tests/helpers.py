"""Shared test helpers."""

import random

from ftpool import Pool
from ftpool.pool import MiB


def small_pool(size=8 * MiB, rows=8, chunk=64 * 1024, backend="sim", path=None, **opts):
    """A small pool: the simulated backend unless a path is given."""
    if path is not None:
        backend = "file"
    return Pool.create(path, size, rows, chunk, backend=backend, **opts)


def fill_objects(pool, count, size_range=(8, 2000), seed=0):
    """Allocate ``count`` objects with random payloads; returns {offset: payload}."""
    rng = random.Random(seed)
    out = {}
    for _ in range(count):
        n = rng.randint(*size_range)
        data = rng.randbytes(n)
        with pool.transaction() as tx:
            r = tx.alloc(n, 7)
            tx.write(r, 0, data)
        out[r.offset] = data
    return out


def durable_base(pool):
    """Persist everything so the pool's durable image equals its volatile one."""
    store = pool.store
    for o in range(0, store.length, 1 << 20):
        store.persist(o, min(1 << 20, store.length - o))
    return store


def crash_sweep(store, op, points, rng, images=2):
    """Crash ``op(pool)`` after each op count in ``points`` and reopen every resulting image.

    ``store`` holds a pool whose durable image is complete.  Yields
    ``(k, fired, reached_marker, reopened_pool, is_durable_image)`` per image:
    ``fired`` is False when ``op`` finished before the crash point, and
    ``reached_marker`` tells whether the commit got past its logs-complete marker.
    """
    from ftpool.errors import SimulatedCrash
    from ftpool.pmem import SimStore

    for k in points:
        s = store.clone()
        p = Pool.attach(s, scrub_async=False)
        s.crash_after(k)
        fired = True
        try:
            op(p)
            fired = s.crashed
        except SimulatedCrash:
            pass
        s.crash_after(None)
        reached = not fired or p._crashed is not None
        imgs = [(s.durable_image, True)] + [(s.crash_image(rng), False) for _ in range(images)]
        for img, durable in imgs:
            yield k, fired, reached, Pool.attach(SimStore.from_image(img), scrub_async=False), durable


def op_count(store, op):
    """Store operations ``op(pool)`` performs on a copy of ``store``."""
    s = store.clone()
    p = Pool.attach(s, scrub_async=False)
    o0 = s.ops
    op(p)
    return s.ops - o0
