"""Fault-tolerant persistent object pool.

Objects live in a memory-mapped pool file protected by row parity, per-object
Adler32 checksums and replicated redo logs.  Transactions stage writes in
private micro-buffers and publish them atomically.
"""

from .errors import (CanaryViolation, ConcurrentFault, DoubleFree, InvalidObject, LayoutError,
                     MediaError, OutOfSpace, PoolCrashed, PoolError, PoolFrozen, SimulatedCrash,
                     TransactionAborted, UnrecoverableCorruption, UnrecoverablePool)
from .pmem import FileStore, SimStore, map_pool
from .pool import Layout, Mode, Pool, compute_layout
from .zone import NULL_REF, ObjectRef

__all__ = [
    "Pool", "Mode", "Layout", "compute_layout", "ObjectRef", "NULL_REF",
    "FileStore", "SimStore", "map_pool",
    "PoolError", "MediaError", "SimulatedCrash", "LayoutError", "UnrecoverablePool",
    "UnrecoverableCorruption", "ConcurrentFault", "PoolCrashed", "PoolFrozen", "OutOfSpace",
    "TransactionAborted", "CanaryViolation", "DoubleFree", "InvalidObject",
]
