"""Exception hierarchy shared by every layer of the pool."""


class PoolError(Exception):
    """Base class for all pool errors."""


class MediaError(PoolError):
    """A load touched a poisoned page (the SIGBUS analogue).

    ``page_offset`` is the pool offset of the 4 KiB page that faulted.
    """

    def __init__(self, page_offset: int):
        super().__init__(f"media error on page at 0x{page_offset:x}")
        self.page_offset = page_offset


class SimulatedCrash(PoolError):
    """Raised by the simulated backend when an armed crash point is hit."""


class LayoutError(PoolError):
    """Pool geometry is impossible (undersized pool, bad alignment...)."""


class UnrecoverablePool(PoolError):
    """Both copies of a replicated structure are invalid."""


class UnrecoverableCorruption(PoolError):
    """Corruption could not be repaired, e.g. overlapping bad pages in one column."""

    def __init__(self, msg: str, offsets=()):
        super().__init__(msg)
        self.offsets = list(offsets)


class ConcurrentFault(PoolError):
    """A second fault was detected while another recovery owned the pool."""


class PoolCrashed(PoolError):
    """The pool hit a fault mid-commit; it must be reopened to run crash recovery."""


class PoolFrozen(PoolError):
    """A transaction was refused because the pool is frozen for recovery."""


class OutOfSpace(PoolError):
    pass


class TransactionAborted(PoolError):
    """The current transaction was aborted; nothing reached persistent memory."""


class CanaryViolation(TransactionAborted):
    def __init__(self, ref):
        super().__init__(f"micro-buffer canary damaged for object at 0x{ref.offset:x}")
        self.ref = ref


class DoubleFree(TransactionAborted):
    pass


class InvalidObject(PoolError):
    """An ObjectRef does not name a live object (or points into parity/metadata)."""
