import threading
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ftpool import Pool
from ftpool.errors import (CanaryViolation, DoubleFree, InvalidObject, PoolCrashed, PoolFrozen,
                           SimulatedCrash, TransactionAborted)
from ftpool.pmem import SimStore
from ftpool.tx import (MARK_EMPTY, decode_entries, diff_spans, encode_entries, pack_slot_record,
                       unpack_slot_record)
from ftpool.zone import OBJ_HEADER_SIZE

from helpers import fill_objects, small_pool


def state(pool):
    """Every live object's bytes plus the root offset: the durable heap contents."""
    return (pool.header.root_offset,
            {off: pool.store.read(off, size) for off, size in sorted(pool.live_objects())})


def test_commit_survives_reopen(tmp_path):
    path = tmp_path / "p"
    with small_pool(path=path) as pool:
        with pool.transaction() as tx:
            r = tx.alloc(100, 5)
            tx.write(r, 10, b"hello")
            tx.set_root(r)
        assert pool.read(r, 10, 5) == b"hello"
    with Pool.open(path) as pool:
        r = pool.root()
        assert pool.read(r, 10, 5) == b"hello"
        assert pool.check()["ok"]


def test_reads_inside_a_transaction_see_its_writes(sim_pool):
    with sim_pool.transaction() as tx:
        r = tx.alloc(16)
        tx.write(r, 0, b"abc")
        assert sim_pool.read(r, 0, 3) == b"abc"
        assert bytes(sim_pool.get(r)[:3]) == b"abc"


def test_explicit_abort_discards_everything(sim_pool):
    objs = fill_objects(sim_pool, 3)
    before = state(sim_pool)
    with sim_pool.transaction() as tx:
        r = tx.alloc(64)
        tx.write(sim_pool.ref(next(iter(objs))), 0, b"zz")
        tx.abort()
    assert state(sim_pool) == before
    assert sim_pool.stats.aborts == 1
    with pytest.raises(InvalidObject):
        sim_pool.read(r, 0, 1)


def test_exception_aborts_and_propagates(sim_pool):
    before = state(sim_pool)
    with pytest.raises(KeyError):
        with sim_pool.transaction() as tx:
            tx.write(tx.alloc(64), 0, b"x")
            raise KeyError("boom")
    assert state(sim_pool) == before
    assert sim_pool.current_transaction() is None


def test_nested_abort_propagates_to_outermost(sim_pool):
    before = state(sim_pool)
    with sim_pool.transaction() as tx:
        tx.alloc(64)
        with sim_pool.transaction() as inner:
            assert inner is tx and tx.depth == 2
            inner.abort()
        pytest.fail("explicit abort must unwind the outer scope too")
    assert state(sim_pool) == before


def test_swallowed_inner_failure_still_aborts_outer(sim_pool):
    before = state(sim_pool)
    with pytest.raises(TransactionAborted):
        with sim_pool.transaction() as tx:
            tx.alloc(64)
            try:
                with sim_pool.transaction():
                    raise RuntimeError("inner")
            except RuntimeError:
                pass
    assert state(sim_pool) == before


def test_double_free(sim_pool):
    with sim_pool.transaction() as tx:
        r = tx.alloc(64)
    with sim_pool.transaction() as tx:
        tx.free(r)
        with pytest.raises(DoubleFree):
            tx.free(r)
    with pytest.raises(DoubleFree):
        with sim_pool.transaction() as tx:
            tx.free(r)


def test_free_of_own_allocation(sim_pool):
    with sim_pool.transaction() as tx:
        r = tx.alloc(64)
        tx.free(r)
    assert sim_pool.object_count() == 0


def test_canary_overrun_aborts(sim_pool):
    objs = fill_objects(sim_pool, 2, (64, 64))
    ref = sim_pool.ref(next(iter(objs)))
    before = sim_pool.store.snapshot()
    with pytest.raises(CanaryViolation):
        with sim_pool.transaction() as tx:
            p = tx.open(ref).pointer()
            p[64:72] = b"\x00" * 8 if bytes(p[64:72]) != bytes(8) else b"\x01" * 8
            tx.add_range(ref, 0, 4)
    assert sim_pool.store.snapshot() == before


def test_large_transaction_uses_overflow_log(sim_pool):
    slot = sim_pool.logs.slots[0]
    n = slot.area_size + 50_000
    with sim_pool.transaction() as tx:
        r = tx.alloc(n)
        tx.write(r, 0, bytes(range(256)) * (n // 256))
    assert sim_pool.check()["ok"]
    assert all(not zp.exempt for zp in sim_pool.parity)
    assert sim_pool.read(r, 0, 256) == bytes(range(256))


def test_freeze_fail_policy():
    pool = small_pool(freeze_policy="fail")
    pool.freeze()
    err = []

    def worker():
        try:
            with pool.transaction() as tx:
                tx.alloc(8)
        except PoolFrozen as e:
            err.append(e)

    t = threading.Thread(target=worker)
    t.start()
    t.join()
    pool.thaw()
    assert err
    with pool.transaction() as tx:
        tx.alloc(8)


def test_freeze_block_policy_waits_for_thaw(sim_pool):
    sim_pool.freeze()
    done = threading.Event()

    def worker():
        with sim_pool.transaction() as tx:
            tx.alloc(8)
        done.set()

    t = threading.Thread(target=worker)
    t.start()
    time.sleep(0.1)
    assert not done.is_set()
    sim_pool.thaw()
    t.join(5)
    assert done.is_set()


@given(st.lists(st.tuples(st.integers(0, 2 ** 40), st.binary(max_size=50)), max_size=8))
def test_log_entries_roundtrip(entries):
    stream = encode_entries(entries)
    assert len(stream) % 8 == 0
    got = list(decode_entries(stream, len(entries)))
    assert [(t, p) for t, p, _, _ in got] == entries
    assert all(ok for _, _, ok, _ in got)


def test_corrupt_entry_is_flagged():
    stream = bytearray(encode_entries([(64, b"abcdef"), (128, b"xyz")]))
    stream[22] ^= 1
    flags = [ok for _, _, ok, _ in decode_entries(bytes(stream), 2)]
    assert flags == [False, True]


def test_slot_record():
    raw = pack_slot_record(3, 4, 5, 6, 7, 8)
    assert unpack_slot_record(raw) == (3, 4, 5, 6, 7, 8)
    bad = bytearray(raw)
    bad[0] ^= 1
    assert unpack_slot_record(bytes(bad)) is None


def brute_spans(old, new, bridge):
    idx = [i for i in range(len(old)) if old[i] != new[i]]
    spans = []
    for i in idx:
        if spans and i - spans[-1][1] <= bridge:
            spans[-1][1] = i + 1
        else:
            spans.append([i, i + 1])
    return [tuple(s) for s in spans]


@given(st.binary(min_size=1, max_size=120), st.data(), st.integers(0, 10))
def test_diff_spans_matches_brute_force(old, data, bridge):
    flips = data.draw(st.lists(st.integers(0, len(old) - 1), max_size=15))
    new = bytearray(old)
    for i in flips:
        new[i] ^= 0x5A
    assert diff_spans(old, bytes(new), bridge) == brute_spans(old, bytes(new), bridge)


def test_media_error_during_commit_is_repaired(sim_pool):
    objs = fill_objects(sim_pool, 20, (3000, 4000), seed=3)
    off = sorted(objs)[5]
    page = off - off % 4096 + 4096
    sim_pool.store.fill(page, 4096, 0)
    sim_pool.store.poison(page)
    with sim_pool.transaction() as tx:
        tx.write(sim_pool.ref(off), 0, b"new")
    assert sim_pool.check()["ok"]
    assert sim_pool.read(sim_pool.ref(off), 0, 3) == b"new"


def test_tx_size_stats(sim_pool):
    with sim_pool.transaction() as tx:
        r = tx.alloc(56)
        tx.write(r, 0, b"a" * 8)
    s = sim_pool.stats.summary()
    assert s["commits"] == 1
    assert s["avg_alloc_bytes_per_tx"] == 56
    assert s["avg_allocs_per_tx"] == 1


def test_lookups_outside_transactions_write_nothing(sim_pool):
    objs = fill_objects(sim_pool, 10)
    w = sim_pool.store.bytes_written
    for off in objs:
        sim_pool.read(sim_pool.ref(off), 0, 4)
    assert sim_pool.store.bytes_written == w


# -- crash sweep -----------------------------------------------------------------------------

def _three_range_tx(pool, refs):
    with pool.transaction() as tx:
        tx.write(refs[0], 0, b"A" * 24)
        tx.write(refs[1], 100, b"B" * 300)
        n = tx.alloc(40)
        tx.write(n, 0, b"C" * 40)
        tx.write(refs[2], 8, n.pack())
        tx.free(refs[3])


def test_crash_at_every_point_of_a_commit_is_atomic():
    base = small_pool(scrub_async=False)
    objs = fill_objects(base, 6, (500, 600), seed=11)
    refs = [base.ref(o) for o in sorted(objs)]
    store = base.store
    for o in range(0, store.length, 1 << 20):  # make everything so far durable
        store.persist(o, min(1 << 20, store.length - o))
    pre = state(base)
    probe = Pool.attach(store.clone(), scrub_async=False)
    ops0 = probe.store.ops
    _three_range_tx(probe, refs)
    total = probe.store.ops - ops0
    post = state(probe)
    assert pre != post
    rng = np.random.default_rng(0)
    outcomes = {"pre": 0, "post": 0}
    for k in range(1, total + 2):
        s = store.clone()
        p = Pool.attach(s, scrub_async=False)
        s.crash_after(k)
        try:
            _three_range_tx(p, refs)
        except SimulatedCrash:
            pass
        images = [s.durable_image] + [s.crash_image(rng) for _ in range(3)]
        for img in images:
            q = Pool.attach(SimStore.from_image(img), scrub_async=False)
            got = state(q)
            assert got in (pre, post), f"torn state after crash point {k}"
            outcomes["pre" if got == pre else "post"] += 1
            rep = q.check()
            assert rep["ok"], rep
            assert all(sl.read_marker() == MARK_EMPTY for sl in q.logs.slots)
    assert outcomes["pre"] and outcomes["post"]


def test_failed_write_through_requires_reopen():
    base = small_pool(scrub_async=False)
    ref = base.ref(next(iter(fill_objects(base, 2))))
    probe = Pool.attach(base.store.clone(), scrub_async=False)
    o0 = probe.store.ops
    with probe.transaction() as tx:
        tx.write(ref, 0, b"q")
    total = probe.store.ops - o0
    after_marker = 0
    for k in range(1, total + 1):
        s = base.store.clone()
        pool = Pool.attach(s, scrub_async=False)
        s.crash_after(k)
        with pytest.raises(SimulatedCrash):
            with pool.transaction() as tx:
                tx.write(ref, 0, b"q")
        if pool._crashed is None:
            continue
        # the log was complete: the handle is dead, the next open finishes the commit
        after_marker += 1
        with pytest.raises(PoolCrashed):
            pool.begin()
        q = Pool.attach(SimStore.from_image(s.durable_image), scrub_async=False)
        assert q.read(ref, 0, 1) == b"q"
        assert q.check()["ok"]
    assert after_marker > 0


def test_payload_offsets(sim_pool):
    with sim_pool.transaction() as tx:
        r = tx.alloc(10)
    assert sim_pool.slot_size(r.offset) == 64 + OBJ_HEADER_SIZE
    with pytest.raises(IndexError):
        sim_pool.read(r, 60, 8)
