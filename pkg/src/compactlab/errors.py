"""Exception hierarchy shared by every layer of the lab."""


class CompactLabError(Exception):
    """Base class for all errors raised by compactlab."""


# record encoding
class RecordError(CompactLabError, ValueError):
    pass


class KeyTooLong(RecordError):
    pass


class ValueTooLong(RecordError):
    pass


class RecordTooLargeForBlock(RecordError):
    pass


class TruncatedRecord(RecordError):
    pass


class ZeroKeyLength(RecordError):
    pass


# sstable
class SSTableError(CompactLabError):
    pass


class OutOfOrderRecord(SSTableError, ValueError):
    pass


class EmptyTable(SSTableError, ValueError):
    pass


class BadMagic(SSTableError):
    pass


class CorruptIndex(SSTableError):
    pass


class IoFailure(CompactLabError, OSError):
    pass


# sstmap
class TooManyInputs(CompactLabError, ValueError):
    pass


class EmptyInputSet(CompactLabError, ValueError):
    pass


# blockio
class OutOfRangeRead(CompactLabError, ValueError):
    pass


class BatchTooLarge(CompactLabError, ValueError):
    pass


class BatchReadError(IoFailure):
    """Some slots of a batch failed. ``results`` holds ``None`` at ``failed``."""

    def __init__(self, failed, results, causes):
        super().__init__(f"{len(failed)} of {len(results)} batched reads failed: slots {failed}")
        self.failed = failed
        self.results = results
        self.causes = causes


# merge
class CorruptRecord(CompactLabError):
    pass


class HeapCorrupt(CompactLabError):
    pass


class BufferTooSmall(CompactLabError, ValueError):
    """A single record is larger than the whole write buffer."""
