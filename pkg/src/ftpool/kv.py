"""Persistent key-value structures built on pool transactions.

Every insert or remove is exactly one transaction.  Keys and values are
64-bit integers; a value is stored inline as an ObjectRef whose uuid half is
zero, which keeps it distinguishable from a reference to a real node.
"""

from __future__ import annotations

import struct
import threading

from .errors import PoolError
from .zone import NULL_REF, ObjectRef

_U64 = struct.Struct("<Q")
_REF = struct.Struct("<QQ")
_ENTRY = struct.Struct("<QQQ")  # key, ref.uuid, ref.offset
MASK64 = (1 << 64) - 1


def _ref(u: int, o: int) -> ObjectRef:
    return ObjectRef(u, o)


class KVStructure:
    name = ""
    type_id = 0
    root_size = 0

    def __init__(self, pool):
        self.pool = pool
        self.lock = threading.Lock()
        if pool.root_offset:
            self.root = pool.root()
            t = struct.unpack("<I", pool.store.read(self.root.offset + 8, 4))[0]
            if t != self.type_id:
                raise PoolError(f"pool root holds type {t}, not a {self.name}")
        else:
            self.root = pool.root(self.root_size, self.type_id)
            self._init_root()

    def _init_root(self) -> None:
        pass

    def _read(self, ref: ObjectRef, off: int, n: int) -> bytes:
        return self.pool.read(ref, off, n)

    def _u64(self, ref: ObjectRef, off: int) -> int:
        return _U64.unpack(self._read(ref, off, 8))[0]

    def insert(self, key: int, value: int) -> bool:
        raise NotImplementedError

    def remove(self, key: int) -> bool:
        raise NotImplementedError

    def lookup(self, key: int) -> int | None:
        raise NotImplementedError

    def items(self) -> dict[int, int]:
        raise NotImplementedError

    def __len__(self) -> int:
        return self._u64(self.root, 0) if self.name != "list" else self._u64(self.root, 16)

    def node_offsets(self) -> set[int]:
        """Offsets of every object reachable from the root, root included."""
        raise NotImplementedError


# -- singly linked list -----------------------------------------------------------------

class LinkedList(KVStructure):
    """Nodes ``{u64 value, ObjectRef next}`` pushed at the head; the key is the value."""

    name = "list"
    type_id = 0x4C49
    root_size = 24      # head ref, count
    NODE_SIZE = 24
    NODE_TYPE = 0x4C4E

    def insert(self, key: int, value: int | None = None) -> bool:
        pool = self.pool
        with self.lock, pool.transaction() as tx:
            head = _REF.unpack(tx.read(self.root, 0, 16))
            n = tx.alloc(self.NODE_SIZE, self.NODE_TYPE)
            tx.write(n, 0, _U64.pack(key & MASK64) + _REF.pack(*head))
            tx.write(self.root, 0, _REF.pack(*n) + _U64.pack(self._u64(self.root, 16) + 1))
        return True

    def _walk(self):
        ref = _ref(*_REF.unpack(self._read(self.root, 0, 16)))
        prev = None
        while not ref.is_null:
            raw = self._read(ref, 0, 24)
            v = _U64.unpack_from(raw, 0)[0]
            nxt = _ref(*_REF.unpack_from(raw, 8))
            yield prev, ref, v, nxt
            prev = ref
            ref = nxt

    def lookup(self, key: int) -> int | None:
        for _, _, v, _ in self._walk():
            if v == key:
                return v
        return None

    def remove(self, key: int) -> bool:
        pool = self.pool
        with self.lock, pool.transaction() as tx:
            for prev, ref, v, nxt in self._walk():
                if v == key:
                    if prev is None:
                        tx.write(self.root, 0, _REF.pack(*nxt))
                    else:
                        tx.write(prev, 8, _REF.pack(*nxt))
                    tx.write(self.root, 16, _U64.pack(self._u64(self.root, 16) - 1))
                    tx.free(ref)
                    return True
        return False

    def items(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for _, _, v, _ in self._walk():
            out[v] = out.get(v, 0) + 1
        return out

    def node_offsets(self) -> set[int]:
        return {self.root.offset} | {ref.offset for _, ref, _, _ in self._walk()}


# -- crit-bit tree -----------------------------------------------------------------------------

class CritBitTree(KVStructure):
    """Crit-bit tree on 64-bit keys.

    Internal node (56 B): ``{u64 bit; entry[2]}`` with ``entry = {u64 key, ObjectRef slot}``.
    An entry is a leaf when its slot's uuid half is zero (the slot then carries
    the value inline) and points to an internal node otherwise.  The root
    object is ``{u64 count; entry}``.
    """

    name = "ctree"
    type_id = 0xC7EE
    root_size = 32
    NODE_SIZE = 56
    NODE_TYPE = 0xC7E1

    def _node(self, ref: ObjectRef):
        raw = self._read(ref, 0, 56)
        bit = _U64.unpack_from(raw, 0)[0]
        return bit, (_ENTRY.unpack_from(raw, 8), _ENTRY.unpack_from(raw, 32))

    def _root_entry(self):
        raw = self._read(self.root, 0, 32)
        return _U64.unpack_from(raw, 0)[0], _ENTRY.unpack_from(raw, 8)

    def lookup(self, key: int) -> int | None:
        count, (k, u, o) = self._root_entry()
        if not count:
            return None
        while u:
            bit, ents = self._node(_ref(u, o))
            k, u, o = ents[(key >> bit) & 1]
        return o if k == key else None

    def insert(self, key: int, value: int) -> bool:
        pool = self.pool
        key &= MASK64
        with self.lock, pool.transaction() as tx:
            count, e = self._root_entry()
            if not count:
                tx.write(self.root, 0, _U64.pack(1) + _ENTRY.pack(key, 0, value))
                return True
            path = []  # (node, bit, entries) along the search path
            loc = (self.root, 8)
            k, u, o = e
            while u:
                node = _ref(u, o)
                bit, ents = self._node(node)
                path.append((node, bit, ents))
                d = (key >> bit) & 1
                loc = (node, 8 + 24 * d)
                k, u, o = ents[d]
            if k == key:
                tx.write(loc[0], loc[1] + 8, _REF.pack(0, value))
                return False
            diff = (k ^ key).bit_length() - 1
            loc = (self.root, 8)
            k, u, o = e
            for node, bit, ents in path:
                if bit < diff:
                    break
                d = (key >> bit) & 1
                loc = (node, 8 + 24 * d)
                k, u, o = ents[d]
            n = tx.alloc(self.NODE_SIZE, self.NODE_TYPE)
            d = (key >> diff) & 1
            leaf = _ENTRY.pack(key, 0, value)
            old = _ENTRY.pack(k, u, o)
            tx.write(n, 0, _U64.pack(diff) + (old + leaf if d else leaf + old))
            tx.write(loc[0], loc[1], _ENTRY.pack(0, n.pool_uuid_lo, n.offset))
            tx.write(self.root, 0, _U64.pack(count + 1))
        return True

    def remove(self, key: int) -> bool:
        pool = self.pool
        key &= MASK64
        with self.lock, pool.transaction() as tx:
            count, e = self._root_entry()
            if not count:
                return False
            k, u, o = e
            if not u:
                if k != key:
                    return False
                tx.write(self.root, 0, bytes(32))
                return True
            grand = (self.root, 8)
            parent = None
            sibling = None
            while u:
                node = _ref(u, o)
                bit, ents = self._node(node)
                d = (key >> bit) & 1
                if parent is not None:
                    grand = parent_loc
                parent_loc = (node, 8 + 24 * d)
                parent = node
                sibling = ents[1 - d]
                k, u, o = ents[d]
            if k != key:
                return False
            tx.write(grand[0], grand[1], _ENTRY.pack(*sibling))
            tx.write(self.root, 0, _U64.pack(count - 1))
            tx.free(parent)
        return True

    def _leaves(self):
        count, e = self._root_entry()
        if not count:
            return
        stack = [e]
        while stack:
            k, u, o = stack.pop()
            if u:
                _, ents = self._node(_ref(u, o))
                stack.extend(ents)
                yield None, o
            else:
                yield k, o

    def items(self) -> dict[int, int]:
        return {k: v for k, v in self._leaves() if k is not None}

    def node_offsets(self) -> set[int]:
        return {self.root.offset} | {o for k, o in self._leaves() if k is None}


# -- skip list ---------------------------------------------------------------------------------------

class SkipList(KVStructure):
    """Skip list with 4 levels; node = ``{u64 key, ObjectRef value, ObjectRef next[4]}`` (88 B).

    The root object is the head node; its key field holds the element count.
    """

    name = "skiplist"
    type_id = 0x5C1B
    LEVELS = 4
    NODE_SIZE = 8 + 16 + 16 * LEVELS
    root_size = NODE_SIZE
    NODE_TYPE = 0x5C1C

    @staticmethod
    def _level(key: int) -> int:
        h = (key * 0x9E3779B97F4A7C15) & MASK64
        lvl = 1
        while lvl < SkipList.LEVELS and (h >> (63 - lvl)) & 1:
            lvl += 1
        return lvl

    def _next(self, node: ObjectRef, lvl: int) -> ObjectRef:
        return _ref(*_REF.unpack(self._read(node, 24 + 16 * lvl, 16)))

    def _key(self, node: ObjectRef) -> int:
        return self._u64(node, 0)

    def _find(self, key: int):
        preds = [self.root] * self.LEVELS
        node = self.root
        for lvl in range(self.LEVELS - 1, -1, -1):
            while True:
                nxt = self._next(node, lvl)
                if nxt.is_null or self._key(nxt) >= key:
                    break
                node = nxt
            preds[lvl] = node
        cand = self._next(preds[0], 0)
        return preds, cand

    def lookup(self, key: int) -> int | None:
        _, cand = self._find(key)
        if not cand.is_null and self._key(cand) == key:
            return _REF.unpack(self._read(cand, 8, 16))[1]
        return None

    def insert(self, key: int, value: int) -> bool:
        pool = self.pool
        key &= MASK64
        with self.lock, pool.transaction() as tx:
            preds, cand = self._find(key)
            if not cand.is_null and self._key(cand) == key:
                tx.write(cand, 8, _REF.pack(0, value))
                return False
            lvl = self._level(key)
            n = tx.alloc(self.NODE_SIZE, self.NODE_TYPE)
            img = bytearray(self.NODE_SIZE)
            _ENTRY.pack_into(img, 0, key, 0, value)
            for i in range(lvl):
                _REF.pack_into(img, 24 + 16 * i, *self._next(preds[i], i))
            tx.write(n, 0, bytes(img))
            for i in range(lvl):
                tx.write(preds[i], 24 + 16 * i, _REF.pack(*n))
            tx.write(self.root, 0, _U64.pack(self._u64(self.root, 0) + 1))
        return True

    def remove(self, key: int) -> bool:
        pool = self.pool
        key &= MASK64
        with self.lock, pool.transaction() as tx:
            preds, cand = self._find(key)
            if cand.is_null or self._key(cand) != key:
                return False
            for i in range(self.LEVELS):
                if self._next(preds[i], i) == cand:
                    tx.write(preds[i], 24 + 16 * i, _REF.pack(*self._next(cand, i)))
            tx.write(self.root, 0, _U64.pack(self._u64(self.root, 0) - 1))
            tx.free(cand)
        return True

    def _nodes(self):
        node = self._next(self.root, 0)
        while not node.is_null:
            yield node
            node = self._next(node, 0)

    def items(self) -> dict[int, int]:
        out = {}
        for n in self._nodes():
            k, _, v = _ENTRY.unpack(self._read(n, 0, 24))
            out[k] = v
        return out

    def node_offsets(self) -> set[int]:
        return {self.root.offset} | {n.offset for n in self._nodes()}


# -- hash map -----------------------------------------------------------------------------------------

class HashMap(KVStructure):
    """Chained hash map with a growing bucket table.

    Entry (40 B): ``{u64 key, ObjectRef value, ObjectRef next}``.  Table:
    ``{u64 nbuckets, ObjectRef bucket[nbuckets]}``.  Root: ``{u64 count,
    u64 reserved, ObjectRef table}``.  The table doubles when the count
    exceeds twice the bucket count.
    """

    name = "hashmap"
    type_id = 0x4A5B
    root_size = 32
    ENTRY_SIZE = 40
    ENTRY_TYPE = 0x4A5C
    TABLE_TYPE = 0x4A5D
    INITIAL_BUCKETS = 16

    def _init_root(self) -> None:
        with self.lock, self.pool.transaction() as tx:
            t = self._new_table(tx, self.INITIAL_BUCKETS, [NULL_REF] * self.INITIAL_BUCKETS)
            tx.write(self.root, 16, _REF.pack(*t))

    def _new_table(self, tx, n: int, heads) -> ObjectRef:
        t = tx.alloc(8 + 16 * n, self.TABLE_TYPE)
        tx.write(t, 0, _U64.pack(n) + b"".join(_REF.pack(*h) for h in heads))
        return t

    @staticmethod
    def _hash(key: int, n: int) -> int:
        return (((key * 0x9E3779B97F4A7C15) & MASK64) >> 17) % n

    def _table(self):
        t = _ref(*_REF.unpack(self._read(self.root, 16, 16)))
        return t, self._u64(t, 0)

    def _bucket(self, t: ObjectRef, i: int) -> ObjectRef:
        return _ref(*_REF.unpack(self._read(t, 8 + 16 * i, 16)))

    def _chain(self, head: ObjectRef):
        prev = None
        e = head
        while not e.is_null:
            raw = self._read(e, 0, 40)
            k, _, v = _ENTRY.unpack_from(raw, 0)
            nxt = _ref(*_REF.unpack_from(raw, 24))
            yield prev, e, k, v, nxt
            prev = e
            e = nxt

    def lookup(self, key: int) -> int | None:
        t, n = self._table()
        for _, _, k, v, _ in self._chain(self._bucket(t, self._hash(key, n))):
            if k == key:
                return v
        return None

    def insert(self, key: int, value: int) -> bool:
        pool = self.pool
        key &= MASK64
        with self.lock, pool.transaction() as tx:
            t, n = self._table()
            b = self._hash(key, n)
            head = self._bucket(t, b)
            for _, e, k, _, _ in self._chain(head):
                if k == key:
                    tx.write(e, 8, _REF.pack(0, value))
                    return False
            e = tx.alloc(self.ENTRY_SIZE, self.ENTRY_TYPE)
            tx.write(e, 0, _ENTRY.pack(key, 0, value) + _REF.pack(*head))
            tx.write(t, 8 + 16 * b, _REF.pack(*e))
            count = self._u64(self.root, 0) + 1
            tx.write(self.root, 0, _U64.pack(count))
            if count > 2 * n:
                self._rehash(tx, t, n)
        return True

    def _rehash(self, tx, t: ObjectRef, n: int) -> None:
        n2 = 2 * n
        heads = [NULL_REF] * n2
        for i in range(n):
            for _, e, k, _, _ in list(self._chain(self._bucket(t, i))):
                j = self._hash(k, n2)
                tx.write(e, 24, _REF.pack(*heads[j]))
                heads[j] = e
        t2 = self._new_table(tx, n2, heads)
        tx.write(self.root, 16, _REF.pack(*t2))
        tx.free(t)

    def remove(self, key: int) -> bool:
        pool = self.pool
        key &= MASK64
        with self.lock, pool.transaction() as tx:
            t, n = self._table()
            b = self._hash(key, n)
            for prev, e, k, _, nxt in self._chain(self._bucket(t, b)):
                if k == key:
                    if prev is None:
                        tx.write(t, 8 + 16 * b, _REF.pack(*nxt))
                    else:
                        tx.write(prev, 24, _REF.pack(*nxt))
                    tx.write(self.root, 0, _U64.pack(self._u64(self.root, 0) - 1))
                    tx.free(e)
                    return True
        return False

    def _entries(self):
        t, n = self._table()
        for i in range(n):
            yield from self._chain(self._bucket(t, i))

    def items(self) -> dict[int, int]:
        return {k: v for _, _, k, v, _ in self._entries()}

    def node_offsets(self) -> set[int]:
        t, _ = self._table()
        return {self.root.offset, t.offset} | {e.offset for _, e, _, _, _ in self._entries()}


STRUCTURES = {cls.name: cls for cls in (LinkedList, CritBitTree, SkipList, HashMap)}


def open_structure(pool, name: str) -> KVStructure:
    try:
        return STRUCTURES[name](pool)
    except KeyError:
        raise ValueError(f"unknown structure {name!r}; choose from {sorted(STRUCTURES)}") from None
