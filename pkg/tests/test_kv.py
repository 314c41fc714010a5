import random
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ftpool import Pool
from ftpool.errors import PoolError
from ftpool.kv import STRUCTURES, CritBitTree, HashMap, LinkedList, SkipList, open_structure

from helpers import crash_sweep, durable_base, op_count, small_pool

NAMES = sorted(STRUCTURES)


def model_apply(model, name, op, key, value):
    """Reference behaviour: a dict, or a multiset of values for the list."""
    if name == "list":
        if op == "insert":
            model[key] += 1
            return True
        if model[key]:
            model[key] -= 1
            if not model[key]:
                del model[key]
            return True
        return False
    if op == "insert":
        fresh = key not in model
        model[key] = value
        return fresh
    return model.pop(key, None) is not None


ops_strategy = st.lists(st.tuples(st.sampled_from(["insert", "remove"]), st.integers(0, 40),
                                  st.integers(0, 2 ** 64 - 1)), max_size=60)


@pytest.mark.parametrize("name", NAMES)
@given(ops=ops_strategy)
def test_structure_matches_model(name, ops):
    pool = small_pool(scrub_async=False)
    kv = open_structure(pool, name)
    model = Counter() if name == "list" else {}
    for op, key, value in ops:
        got = kv.insert(key, value) if op == "insert" else kv.remove(key)
        assert got == model_apply(model, name, op, key, value)
    assert kv.items() == dict(model)
    for key in range(41):
        want = (key if model.get(key) else None) if name == "list" else model.get(key)
        assert kv.lookup(key) == want
    if name != "list":
        assert len(kv) == len(model)
    assert pool.check()["ok"]


def test_wide_keys_in_ctree():
    pool = small_pool(scrub_async=False)
    t = CritBitTree(pool)
    rng = random.Random(5)
    keys = {rng.getrandbits(64): rng.getrandbits(64) for _ in range(500)}
    for k, v in keys.items():
        t.insert(k, v)
    assert t.items() == keys
    for k in list(keys)[::2]:
        assert t.remove(k)
        del keys[k]
    assert t.items() == keys and len(t) == len(keys)


@pytest.mark.parametrize("cls,size", [(CritBitTree, 56), (SkipList, 88), (HashMap, 40), (LinkedList, 24)])
def test_node_sizes(cls, size):
    pool = small_pool(scrub_async=False)
    kv = cls(pool)
    kv.insert(1, 2)
    pool.stats.reset()
    kv.insert(3, 4)
    s = pool.stats.summary()
    assert s["commits"] == 1 and s["avg_allocs_per_tx"] == 1
    assert s["avg_alloc_bytes_per_tx"] == size


def test_reopen_finds_structure(tmp_path):
    pool = small_pool(path=tmp_path / "p")
    t = open_structure(pool, "skiplist")
    for k in range(20):
        t.insert(k, k * k)
    pool.close()
    pool = Pool.open(tmp_path / "p")
    again = open_structure(pool, "skiplist")
    assert again.items() == {k: k * k for k in range(20)}
    with pytest.raises(PoolError):
        open_structure(pool, "ctree")
    pool.close()


def test_unknown_structure():
    with pytest.raises(ValueError):
        open_structure(small_pool(), "btree")


@pytest.mark.parametrize("name", NAMES)
def test_lookups_write_nothing(name):
    pool = small_pool(scrub_async=False)
    kv = open_structure(pool, name)
    for k in range(50):
        kv.insert(k, k)
    w = pool.store.bytes_written
    for k in range(60):
        kv.lookup(k)
    assert pool.store.bytes_written == w


def test_conservative_mode_has_no_vulnerable_bytes():
    pool = small_pool(mode="conservative", scrub_async=False)
    kv = open_structure(pool, "ctree")
    for k in range(200):
        kv.insert(k * 7919, k)
    for k in range(200):
        assert kv.lookup(k * 7919) == k
    s = pool.stats.summary()
    assert s["accessed_bytes"] > 0 and s["unverified_bytes"] == 0


def test_default_mode_counts_unverified_reads():
    pool = small_pool(scrub_async=False)
    kv = open_structure(pool, "ctree")
    for k in range(50):
        kv.insert(k, k)
    assert pool.stats.summary()["unverified_bytes"] > 0


@pytest.mark.parametrize("name", NAMES)
def test_concurrent_inserts(name):
    import threading

    pool = small_pool(scrub_async=False)
    kv = open_structure(pool, name)

    def work(t):
        for i in range(40):
            kv.insert(t * 1000 + i, i)

    ts = [threading.Thread(target=work, args=(t,)) for t in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    want = {t * 1000 + i: (t * 1000 + i if name == "list" else i) for t in range(4) for i in range(40)}
    if name == "list":
        want = {k: 1 for k in want}
    assert kv.items() == want
    assert pool.check()["ok"]


@pytest.mark.parametrize("name", NAMES)
@pytest.mark.parametrize("op", ["insert", "remove"])
def test_crash_during_mutation_is_all_or_nothing(name, op):
    pool = small_pool(scrub_async=False)
    kv = open_structure(pool, name)
    for k in range(30):
        kv.insert(k * 3, k)
    store = durable_base(pool)
    key = 31 if op == "insert" else 12

    def mutate(p):
        s = open_structure(p, name)
        s.insert(key, 99) if op == "insert" else s.remove(key)

    pre = kv.items()
    post_pool = Pool.attach(store.clone(), scrub_async=False)
    mutate(post_pool)
    post = open_structure(post_pool, name).items()
    assert pre != post
    total = op_count(store, mutate)
    seen = set()
    for k, fired, reached, q, durable in crash_sweep(store, mutate, range(1, total + 1),
                                                      np.random.default_rng(3)):
        got = open_structure(q, name).items()
        assert got in (pre, post), f"torn {op} at crash point {k}"
        if durable:
            assert (got == post) == reached, f"crash point {k}"
        assert q.check()["ok"], f"crash point {k}"
        seen.add(got == post)
    assert seen == {False, True}
