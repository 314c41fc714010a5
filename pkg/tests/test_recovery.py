import threading
import time

import pytest

from ftpool import Pool
from ftpool.errors import ConcurrentFault, SimulatedCrash, UnrecoverableCorruption
from ftpool.pmem import PAGE_SIZE, SimStore
from ftpool.pool import HEADER_OFF, HEADER_REPLICA_OFF
from ftpool.recovery import FaultEvent, FaultKind

from helpers import fill_objects, small_pool


@pytest.fixture
def populated():
    pool = small_pool(scrub_async=False)
    objs = fill_objects(pool, 300, (200, 9000), seed=1)
    return pool, objs


def object_bytes(pool):
    return {off: pool.store.read(off, size) for off, size in sorted(pool.live_objects())}


def test_media_events_are_page_aligned():
    ev = FaultEvent(FaultKind.MEDIA_PAGE, PAGE_SIZE + 12)
    assert (ev.offset, ev.length) == (PAGE_SIZE, PAGE_SIZE)


def test_media_error_on_object_page_repaired_on_read(populated):
    pool, objs = populated
    before = pool.store.snapshot()
    d = pool.inject_fault("media", "object", seed=3)
    assert d["offset"] % PAGE_SIZE == 0
    for off, data in objs.items():
        assert pool.read(pool.ref(off), 0, len(data)) == data
    assert pool.store.snapshot() == before
    assert pool.stats.summary()["repairs"] == 1


def test_media_error_on_parity_page_recomputed(populated):
    pool, _ = populated
    before = pool.store.snapshot()
    pool.inject_fault("media", "parity", seed=4)
    rep = pool.scrub()
    assert rep.media_repaired == 1
    assert pool.store.snapshot() == before


def test_media_error_on_free_page_yields_zeros(populated):
    pool, _ = populated
    d = pool.inject_fault("media", "free", seed=5)
    assert pool.recovery.handle_fault(FaultEvent(FaultKind.MEDIA_PAGE, d["offset"]))
    assert pool.store.read(d["offset"], PAGE_SIZE) == bytes(PAGE_SIZE)


def test_two_bad_pages_in_one_column_unrecoverable(populated):
    pool, objs = populated
    z = pool.zones[0]
    off = sorted(objs)[0]
    page = off - off % PAGE_SIZE
    other = page + z.row_size
    pool.inject_fault("media", offset=page)
    pool.inject_fault("media", offset=other)
    with pytest.raises(UnrecoverableCorruption):
        pool.read(pool.ref(off), 0, 1)
    rep = pool.check()
    assert not rep["ok"]


@pytest.mark.parametrize("which", ["header", "header_replica", "zone_meta", "chunk_records"])
def test_metadata_page_loss_is_repaired(tmp_path, which):
    path = tmp_path / "p"
    pool = small_pool(path=path)
    fill_objects(pool, 50)
    lay = pool.layout
    page = {"header": HEADER_OFF, "header_replica": HEADER_REPLICA_OFF,
            "zone_meta": lay.zone_meta_off, "chunk_records": pool.zones[0].base}[which]
    before = pool.store.snapshot()
    pool.inject_fault("media", offset=page)
    pool.close()
    pool = Pool.open(path)  # mounting reads every metadata page
    pool.scrub()
    assert pool.store.poisoned_pages == []
    assert pool.store.snapshot() == before
    pool.close()


def test_log_page_loss_is_repaired(populated):
    pool, _ = populated
    slot = pool.logs.slots[3]
    before = pool.store.snapshot()
    pool.inject_fault("media", offset=slot.header_offs[0])
    assert pool.recovery.handle_fault(FaultEvent(FaultKind.MEDIA_PAGE, slot.header_offs[0]))
    assert pool.store.snapshot() == before


def test_scrub_clean_pool(populated):
    pool, objs = populated
    rep = pool.scrub()
    assert rep.objects_scanned == len(objs)
    assert rep.mismatches == 0 and rep.repaired == 0


def test_scrub_repairs_scribbled_object(populated):
    pool, _ = populated
    good = object_bytes(pool)
    pool.inject_fault("scribble", "object", seed=8, size=100)
    assert not pool.check()["ok"]
    rep = pool.scrub()
    assert rep.mismatches == 1 and rep.repaired == 1
    assert object_bytes(pool) == good
    assert pool.check()["ok"]


def test_scribbled_chunk_record_repaired(populated):
    pool, _ = populated
    good = object_bytes(pool)
    pool.inject_fault("scribble", "metadata", seed=9, size=16)
    rep = pool.scrub()
    assert rep.metadata_repaired >= 1
    assert object_bytes(pool) == good and pool.check()["ok"]


def test_conservative_mode_repairs_on_access():
    pool = small_pool(mode="conservative", scrub_async=False)
    objs = fill_objects(pool, 40, seed=2)
    d = pool.inject_fault("scribble", "object", seed=1, size=8)
    for off, data in objs.items():
        assert pool.read(pool.ref(off), 0, len(data)) == data
    assert pool.check()["ok"]
    assert d["length"] == 8


def test_repair_touches_only_the_page_and_its_column(populated):
    pool, objs = populated
    d = pool.inject_fault("media", "object", seed=12)
    page = d["offset"]
    z = pool.zones[0]
    allowed = set(z.page_column(page))
    lay = pool.layout
    allowed |= {lay.badpage_off, lay.badpage_replica_off}
    writes = []
    orig = pool.store.write

    def spy(off, data):
        writes.append((off, len(data)))
        orig(off, data)

    pool.store.write = spy
    pool.recovery.handle_fault(FaultEvent(FaultKind.MEDIA_PAGE, page))
    pool.store.write = orig
    assert writes
    for off, n in writes:
        assert off - off % PAGE_SIZE in allowed and (off + n - 1) - (off + n - 1) % PAGE_SIZE in allowed


def test_repair_is_idempotent_under_crash():
    pool = small_pool(scrub_async=False)
    fill_objects(pool, 100, (500, 3000), seed=4)
    d = pool.inject_fault("media", "object", seed=2)
    page = d["offset"]
    clean = pool.store.clone()
    ref_pool = Pool.attach(clean, scrub_async=False)
    ref_pool.recovery.handle_fault(FaultEvent(FaultKind.MEDIA_PAGE, page))
    want = clean.snapshot()
    probe = pool.store.clone()
    p2 = Pool.attach(probe, scrub_async=False)
    o0 = probe.ops
    p2.recovery.handle_fault(FaultEvent(FaultKind.MEDIA_PAGE, page))
    total = probe.ops - o0
    assert total > 2
    for k in range(1, total + 1):
        s = pool.store.clone()
        p = Pool.attach(s, scrub_async=False)
        s.crash_after(k)
        try:
            p.recovery.handle_fault(FaultEvent(FaultKind.MEDIA_PAGE, page))
        except SimulatedCrash:
            pass
        after = SimStore.from_image(s.durable_image, s.poisoned_pages)
        q = Pool.attach(after, scrub_async=False)
        q.recovery.handle_fault(FaultEvent(FaultKind.MEDIA_PAGE, page))
        assert after.snapshot() == want, f"crash point {k}"
        assert q.check()["ok"]


def test_second_fault_from_in_flight_transaction():
    pool = small_pool(scrub_async=False)
    pool.recovery._acquire()
    seen = []

    def worker():
        with pool.transaction():
            try:
                pool.recovery.handle_fault(FaultEvent(FaultKind.MEDIA_PAGE, pool.zones[0].base))
            except ConcurrentFault as e:
                seen.append(e)

    t = threading.Thread(target=worker)
    t.start()
    t.join(5)
    pool.recovery._release()
    assert seen


def test_background_scrubber_runs_on_schedule():
    pool = small_pool(mode="scrub:20")
    for i in range(60):
        with pool.transaction() as tx:
            tx.alloc(16)
    deadline = time.time() + 10
    while pool.stats.scrubs < 1 and time.time() < deadline:
        time.sleep(0.05)
    assert pool.stats.scrubs >= 1
    assert not pool._scrubber.errors
    pool.close()


def test_scrub_requires_checksums():
    pool = small_pool(mode="mlp")
    with pytest.raises(Exception):
        pool.scrub()
