import pytest
from hypothesis import given
from hypothesis import strategies as st

from ftpool import Pool
from ftpool.errors import LayoutError, PoolCrashed, UnrecoverablePool
from ftpool.pmem import PAGE_SIZE, SimStore
from ftpool.pool import (FLAG_CHECKSUMS_STALE, FLAG_PARITY_STALE, GiB, HEADER_OFF, HEADER_REPLICA_OFF, MiB,
                         Mode, PoolHeader, PoolStats, compute_layout, pack_badpages, unpack_badpages)

from helpers import fill_objects, small_pool


@given(st.integers(4, 64).map(lambda m: m * MiB), st.integers(2, 20), st.sampled_from([16, 64, 256]))
def test_regions_tile_the_file(size, rows, chunk_kib):
    try:
        lay = compute_layout(size, rows, chunk_kib * 1024)
    except LayoutError:
        return
    pos = 0
    for name, off, ln in lay.regions():
        assert off == pos, name
        pos += ln
    assert pos == size
    acc = lay.accounting()
    parts = ("metadata", "log", "chunk_metadata", "parity", "user_data", "tail")
    assert sum(acc[k] for k in parts) == size


def test_parity_is_one_percent_of_each_zone_with_100_rows():
    lay = compute_layout(GiB, 100)
    for z in lay.zones():
        assert z.row_size * 100 == z.size
    assert lay.accounting()["parity"] * 100 == lay.zone_count * lay.zone_size


def test_layout_rejects_impossible_geometry():
    with pytest.raises(LayoutError):
        compute_layout(4 * MiB + 1)
    with pytest.raises(LayoutError):
        compute_layout(2 * MiB, rows_per_zone=100)
    with pytest.raises(LayoutError):
        compute_layout(64 * MiB, rows_per_zone=1)


def test_header_roundtrip_and_checksum():
    pool = small_pool()
    raw = pool.header.pack()
    assert PoolHeader.unpack(raw) == pool.header
    bad = bytearray(raw)
    bad[40] ^= 1
    assert PoolHeader.unpack(bytes(bad)) is None


def test_badpage_record_roundtrip():
    ents = [(4096, 1), (8192 * 3, 2)]
    raw = pack_badpages(ents)
    assert unpack_badpages(raw) == ents
    bad = bytearray(raw)
    bad[-1] ^= 4
    assert unpack_badpages(bytes(bad)) is None


def test_header_falls_back_to_replica(tmp_path):
    path = tmp_path / "p"
    pool = small_pool(path=path)
    objs = fill_objects(pool, 5)
    good = pool.store.read(HEADER_OFF, PAGE_SIZE)
    pool.store.write(HEADER_OFF + 30, b"\xee" * 20)
    pool.close()
    with Pool.open(path) as pool:
        assert pool.store.read(HEADER_OFF, PAGE_SIZE) == good
        assert {o: pool.read(pool.ref(o), 0, len(d)) for o, d in objs.items()} == objs


def test_both_headers_lost_is_unrecoverable(tmp_path):
    path = tmp_path / "p"
    pool = small_pool(path=path)
    for off in (HEADER_OFF, HEADER_REPLICA_OFF):
        pool.store.write(off + 30, b"\xee" * 20)
    pool.close()
    with pytest.raises(UnrecoverablePool):
        Pool.open(path)


def test_size_mismatch_is_unrecoverable():
    pool = small_pool()
    img = pool.store.snapshot() + bytes(PAGE_SIZE)
    with pytest.raises(UnrecoverablePool):
        Pool.attach(SimStore.from_image(img))


@pytest.mark.parametrize("text,name,flags", [
    ("baseline", "baseline", (False, False, False, False)),
    ("ML", "ml", (True, False, False, False)),
    ("mlp", "mlp", (True, True, False, False)),
    ("mlpc", "mlpc", (True, True, True, False)),
    ("conservative", "conservative", (True, True, True, True)),
])
def test_mode_parse(text, name, flags):
    m = Mode.parse(text)
    assert m.name == name
    assert (m.replicate, m.parity, m.checksums, m.verify_get) == flags
    assert m.scrub_interval == 0


def test_scrub_modes():
    assert Mode.parse("scrub:50K").scrub_interval == 50_000
    assert Mode.parse("scrub:2M").scrub_interval == 2_000_000
    assert Mode.parse("scrub:100").name == "scrub:100"
    assert Mode.parse("mlpc", scrub_interval=7).scrub_interval == 7
    for bad in ("raid6", "scrub:0", "scrub:x"):
        with pytest.raises(ValueError):
            Mode.parse(bad)


def test_stats_windows():
    s = PoolStats()
    s.access(10, verified=False)
    s.access(5, verified=True)
    s.close_window()
    s.access(3, verified=False)
    out = s.summary()
    assert (out["accessed_bytes"], out["unverified_bytes"]) == (18, 13)
    assert out["scrub_windows"] == 1 and out["window_mean"] == 10
    s.reset()
    assert s.summary()["accessed_bytes"] == 0 and s.windows == []


def test_weak_mode_marks_redundancy_stale_and_full_mode_rebuilds(tmp_path):
    path = tmp_path / "p"
    pool = small_pool(path=path)
    objs = fill_objects(pool, 20, seed=3)
    pool.close()
    with Pool.open(path, mode="baseline") as weak:
        assert weak.header.flags & (FLAG_PARITY_STALE | FLAG_CHECKSUMS_STALE)
        off = sorted(objs)[0]
        with weak.transaction() as tx:
            tx.write(weak.ref(off), 0, b"changed")
        fill_objects(weak, 5, seed=9)
    with Pool.open(path) as full:
        assert full.header.flags == 0
        assert full.check()["ok"]
        assert full.read(full.ref(off), 0, 7) == b"changed"


def test_info_reports_geometry():
    pool = small_pool()
    fill_objects(pool, 3)
    info = pool.info()
    assert info["objects"] == 3
    assert info["rows_per_zone"] == 8 and info["chunk_size"] == 64 * 1024
    assert sum(r["length"] for r in info["regions"]) == info["pool_size"]


def test_root_object_is_created_once():
    pool = small_pool()
    r = pool.root(32, 5)
    assert pool.root() == r
    assert pool.root_offset == r.offset


def test_crashed_handle_refuses_transactions():
    pool = small_pool()
    pool.mark_crashed(RuntimeError("boom"))
    with pytest.raises(PoolCrashed):
        pool.begin()


def test_file_pool_survives_close(file_pool, tmp_path):
    objs = fill_objects(file_pool, 10)
    path = file_pool.store.path
    file_pool.close()
    with Pool.open(path) as p:
        for o, d in objs.items():
            assert p.read(p.ref(o), 0, len(d)) == d
        assert p.check()["ok"]
