import pytest
from hypothesis import given
from hypothesis import strategies as st

from ftpool.errors import InvalidObject, LayoutError, OutOfSpace
from ftpool.zone import (OBJ_HEADER_SIZE, ChunkMeta, ChunkState, ObjectRef, ZoneAllocator,
                         ZoneGeometry, chunk_record_size, locate, size_class)

GEOM = ZoneGeometry(0, 1 << 20, rows=4, chunks_per_row=3, chunk_size=64 * 1024)


@pytest.mark.parametrize("req,cls", [(1, 64), (56, 64), (64, 64), (65, 128), (1000, 1024)])
def test_size_class(req, cls):
    assert size_class(req) == cls


def test_geometry_derived_sizes():
    g = GEOM
    assert g.row_size == 3 * 64 * 1024
    assert g.size == 4 * g.row_size
    assert g.data_rows == 3 and g.data_chunks == 9
    assert g.parity_base == g.base + 3 * g.row_size
    assert g.meta_chunks == 1
    assert g.record_size == chunk_record_size(64 * 1024)
    assert g.record_size % 8 == 0


def test_geometry_rejects_bad_shapes():
    with pytest.raises(LayoutError):
        ZoneGeometry(0, 0, rows=1, chunks_per_row=2, chunk_size=4096)
    with pytest.raises(LayoutError):
        ZoneGeometry(0, 100, rows=2, chunks_per_row=2, chunk_size=4096)


def test_split_rows_and_columns():
    g = GEOM
    off = g.base + g.row_size - 10
    assert g.split_rows(off, 30) == [(off, 10), (g.base + g.row_size, 20)]
    assert g.column_of(g.base + g.row_size + 5) == 5
    assert g.parity_offset(g.base + 2 * g.row_size + 7) == g.parity_base + 7
    col = g.page_column(g.base + g.row_size + 4100)
    assert col == [g.base + r * g.row_size + 4096 for r in range(4)]


def test_locate():
    zones = [GEOM]
    assert locate(zones, ObjectRef(1, 0), 1 << 30) is None
    assert locate(zones, ObjectRef(1, GEOM.base + 64), 1 << 30) == GEOM.base + 64
    with pytest.raises(InvalidObject):
        locate(zones, ObjectRef(1, GEOM.parity_base + 8), 1 << 30)
    with pytest.raises(InvalidObject):
        locate(zones, ObjectRef(1, 5), 1 << 30)
    with pytest.raises(InvalidObject):
        locate(zones, ObjectRef(1, 1 << 31), 1 << 30)


def test_chunk_meta_roundtrip_and_validation():
    rs = GEOM.record_size
    m = ChunkMeta(ChunkState.RUN, 80, 0, (1 << 700) | 5)
    raw = m.pack(rs)
    assert len(raw) == rs
    assert ChunkMeta.valid(raw)
    assert ChunkMeta.unpack(raw) == m
    bad = bytearray(raw)
    bad[20] ^= 1
    assert not ChunkMeta.valid(bytes(bad))


def _commit(a, intents):
    with a.lock:
        staged = a.stage(intents)
        a.apply_staged(staged, intents)


def test_allocator_slots_and_large_runs():
    a = ZoneAllocator(GEOM, ZoneAllocator.initial_records(GEOM))
    off, slot, it = a.reserve(56)
    assert slot == 64 + OBJ_HEADER_SIZE
    assert a.slot_size_at(off) is None  # not live until committed
    _commit(a, [it])
    assert a.slot_size_at(off) == slot
    big, size, it2 = a.reserve(100_000)
    assert size == 2 * GEOM.chunk_size
    _commit(a, [it2])
    assert sorted(a.live_objects()) == sorted([(off, slot), (big, size)])
    _commit(a, [a.free_intent(off), a.free_intent(big)])
    assert list(a.live_objects()) == []
    with pytest.raises(InvalidObject):
        a.free_intent(off)


def test_aborted_reservation_is_reusable():
    a = ZoneAllocator(GEOM, ZoneAllocator.initial_records(GEOM))
    off, _, it = a.reserve(10)
    idx = GEOM.chunk_index(off)
    assert not a._idle(a.chunks[idx])
    a.release([it])
    assert a._idle(a.chunks[idx])


def test_out_of_space():
    a = ZoneAllocator(GEOM, ZoneAllocator.initial_records(GEOM))
    with pytest.raises(OutOfSpace):
        a.reserve(GEOM.data_chunks * GEOM.chunk_size)


@given(st.lists(st.tuples(st.booleans(), st.integers(1, 70_000)), max_size=60))
def test_live_objects_never_overlap(ops):
    a = ZoneAllocator(GEOM, ZoneAllocator.initial_records(GEOM))
    live: dict[int, int] = {}
    for is_alloc, n in ops:
        if is_alloc or not live:
            try:
                off, slot, it = a.reserve(n)
            except OutOfSpace:
                continue
            assert slot >= n + OBJ_HEADER_SIZE
            _commit(a, [it])
            live[off] = slot
        else:
            off = sorted(live)[n % len(live)]
            _commit(a, [a.free_intent(off)])
            del live[off]
    assert dict(a.live_objects()) == live
    spans = sorted(live.items())
    meta_end = GEOM.base + GEOM.meta_chunks * GEOM.chunk_size
    for (o1, s1), (o2, _) in zip(spans, spans[1:]):
        assert o1 + s1 <= o2
    for o, s in spans:
        assert meta_end <= o and o + s <= GEOM.data_end
    # records rebuilt from scratch describe the same heap
    again = ZoneAllocator(GEOM, [c.meta for c in a.chunks])
    assert dict(again.live_objects()) == live
