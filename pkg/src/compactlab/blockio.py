"""Block-read backends with user/kernel boundary-crossing accounting.

A *crossing* is counted at this module's API boundary, never by inspecting the
real system calls underneath.  :class:`SyncBackend` charges one crossing per
block (the ``pread()``-per-block iterator); :class:`BatchedBackend` charges one
crossing per batch, or one per :meth:`BatchedBackend.crossing` scope when a
controller issues several batches from inside a single entry.
"""

from __future__ import annotations

import contextlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import BatchReadError, BatchTooLarge, IoFailure, OutOfRangeRead
from .sstable import SSTableMeta

DEFAULT_QUEUE_DEPTH = 256
# file-system share of one pread(), in microseconds
BENCH_CROSSING_DELAY_US = 110.0


@dataclass
class CrossingStats:
    read_crossings: int = 0
    write_crossings: int = 0
    blocks_read: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    injected_delay_total: float = 0.0  # microseconds
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    _FIELDS = (
        "read_crossings",
        "write_crossings",
        "blocks_read",
        "bytes_read",
        "bytes_written",
        "injected_delay_total",
    )

    def add(self, **deltas) -> None:
        with self._lock:
            for name, d in deltas.items():
                setattr(self, name, getattr(self, name) + d)

    def merge(self, other: "CrossingStats") -> None:
        self.add(**other.to_dict())

    def to_dict(self) -> dict:
        with self._lock:
            return {name: getattr(self, name) for name in self._FIELDS}


@dataclass(frozen=True)
class CrossingCostModel:
    per_crossing_delay: float = 0.0  # microseconds

    def __post_init__(self):
        if self.per_crossing_delay < 0:
            raise ValueError("per_crossing_delay must be >= 0")

    def pay(self) -> float:
        d = self.per_crossing_delay
        if d:
            time.sleep(d / 1e6)
        return d


@dataclass(frozen=True, slots=True)
class BlockReadReq:
    file_id: str
    offset: int
    length: int
    slot: int = 0


@dataclass(frozen=True, slots=True)
class ReadLogEntry:
    file_id: str
    offset: int
    batch_seq: int


class _OpenFile:
    __slots__ = ("fd", "block_size", "data_end")

    def __init__(self, fd: int, block_size: int, data_end: int):
        self.fd = fd
        self.block_size = block_size
        self.data_end = data_end


class _Backend:
    def __init__(self, stats: CrossingStats | None = None, cost: CrossingCostModel | None = None):
        self.stats = stats if stats is not None else CrossingStats()
        self.cost = cost if cost is not None else CrossingCostModel()
        self.read_log: list[ReadLogEntry] = []
        self._files: dict[str, _OpenFile] = {}
        self._batch_seq = 0
        self._log_lock = threading.Lock()

    # files
    def register(self, meta: SSTableMeta) -> None:
        if meta.file_id in self._files:
            return
        flags = os.O_RDONLY | getattr(os, "O_CLOEXEC", 0)
        try:
            fd = os.open(meta.path, flags)
        except OSError as exc:
            raise IoFailure(f"{meta.path}: {exc}") from exc
        self._files[meta.file_id] = _OpenFile(fd, meta.block_size, meta.index_offset)

    def close(self) -> None:
        for f in self._files.values():
            os.close(f.fd)
        self._files.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def request(self, meta_or_id, offset: int, slot: int = 0) -> BlockReadReq:
        file_id = meta_or_id if isinstance(meta_or_id, str) else meta_or_id.file_id
        return BlockReadReq(file_id, offset, self._files[file_id].block_size, slot)

    # accounting
    def _charge(self, kind: str) -> None:
        d = self.cost.pay()
        self.stats.add(**{kind: 1, "injected_delay_total": d})

    def _next_batch_seq(self) -> int:
        with self._log_lock:
            seq = self._batch_seq
            self._batch_seq += 1
            return seq

    def _pread(self, req: BlockReadReq) -> bytes:
        try:
            f = self._files[req.file_id]
        except KeyError:
            raise IoFailure(f"file {req.file_id!r} not registered with backend") from None
        if req.length != f.block_size or req.offset % f.block_size:
            raise ValueError(f"request {req} is not one aligned block of {f.block_size} bytes")
        if req.offset < 0 or req.offset + req.length > f.data_end:
            raise OutOfRangeRead(f"offset {req.offset} outside data region of {req.file_id!r} ({f.data_end} bytes)")
        try:
            data = os.pread(f.fd, req.length, req.offset)
        except OSError as exc:
            raise IoFailure(f"pread {req.file_id!r}@{req.offset}: {exc}") from exc
        if len(data) != req.length:
            raise IoFailure(f"short read of {len(data)} bytes at {req.file_id!r}@{req.offset}")
        return data

    def _log(self, reqs, batch_seq: int) -> None:
        with self._log_lock:
            self.read_log.extend(ReadLogEntry(r.file_id, r.offset, batch_seq) for r in reqs)

    # writes
    def write_buffer_out(self, stream, data) -> None:
        """Append ``data`` to ``stream``; one write crossing per non-empty call."""
        if not data:
            return
        try:
            stream.write(data)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        self.stats.add(bytes_written=len(data))
        self._charge("write_crossings")

    # exports
    def read_log_jsonl(self) -> str:
        return "".join(
            json.dumps({"file_id": e.file_id, "offset": e.offset, "batch_seq": e.batch_seq}) + "\n"
            for e in self.read_log
        )

    def stats_json(self) -> str:
        return json.dumps(self.stats.to_dict())


class SyncBackend(_Backend):
    """One crossing per block read, like a ``pread()`` per block."""

    def read_one(self, req: BlockReadReq) -> bytes:
        data = self._pread(req)
        self._log((req,), self._next_batch_seq())
        self.stats.add(blocks_read=1, bytes_read=len(data))
        self._charge("read_crossings")
        return data


class BatchedBackend(_Backend):
    """Submits whole batches of block reads behind a single crossing."""

    def __init__(
        self,
        stats: CrossingStats | None = None,
        cost: CrossingCostModel | None = None,
        queue_depth: int = DEFAULT_QUEUE_DEPTH,
        workers: int | None = None,
    ):
        super().__init__(stats, cost)
        if queue_depth < 1:
            raise ValueError("queue_depth must be >= 1")
        self.queue_depth = queue_depth
        self.workers = min(4, os.cpu_count() or 1) if workers is None else workers
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        self._inside = 0

    def close(self) -> None:
        super().close()
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    @contextlib.contextmanager
    def crossing(self):
        """Scope that counts as one read crossing however many batches it submits."""
        if self._inside == 0:
            self._charge("read_crossings")
        self._inside += 1
        try:
            yield self
        finally:
            self._inside -= 1

    def _try_read(self, req):
        try:
            return self._pread(req), None
        except (IoFailure, OutOfRangeRead, ValueError) as exc:
            return None, exc

    def submit_batch(self, reqs: list[BlockReadReq]) -> list[bytes]:
        if not reqs:
            raise ValueError("empty batch")
        if len(reqs) > self.queue_depth:
            raise BatchTooLarge(f"{len(reqs)} requests exceed queue depth {self.queue_depth}")
        if self._pool is not None and len(reqs) > 1:
            outcomes = list(self._pool.map(self._try_read, reqs))
        else:
            outcomes = [self._try_read(r) for r in reqs]
        results = [data for data, _ in outcomes]
        failed = [i for i, (_, exc) in enumerate(outcomes) if exc is not None]
        ok = [r for r, data in zip(reqs, results) if data is not None]
        self._log(ok, self._next_batch_seq())
        self.stats.add(blocks_read=len(ok), bytes_read=sum(r.length for r in ok))
        if self._inside == 0:
            self._charge("read_crossings")
        if failed:
            raise BatchReadError(failed, results, [outcomes[i][1] for i in failed])
        return results


class AccountedWriter:
    """File sink that groups writes and pushes them through ``write_buffer_out``.

    ``flush_bytes`` equal to the block size gives one write crossing per sealed
    block; larger values model a buffered writable file.
    """

    def __init__(self, path, backend: _Backend, flush_bytes: int):
        if flush_bytes < 1:
            raise ValueError("flush_bytes must be >= 1")
        try:
            self._f = open(path, "wb", buffering=0)
        except OSError as exc:
            raise IoFailure(f"{path}: {exc}") from exc
        self._backend = backend
        self._flush_bytes = flush_bytes
        self._buf = bytearray()

    def write(self, data) -> None:
        self._buf += data
        if len(self._buf) >= self._flush_bytes:
            self.flush()

    def flush(self) -> None:
        if self._buf:
            self._backend.write_buffer_out(self._f, bytes(self._buf))
            self._buf.clear()

    def close(self) -> None:
        self.flush()
        self._f.close()
