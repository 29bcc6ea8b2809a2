"""End-to-end compaction: the per-block baseline iterator and the offload controller.

Both engines share the merge engines and :class:`OutputWriter`, so for the
same inputs and config they write byte-identical output tables.  They differ
only in how blocks reach memory and therefore in how many read crossings they
are charged:

* baseline: one :meth:`SyncBackend.read_one` per block, so
  ``read_crossings == sum(num_blocks)``.
* offload: one crossing per :meth:`OffloadController.read_next_kv` call; the
  initial load and every refill are batches issued inside that call.  With
  ``F`` non-empty buffer returns, ``read_crossings == read_next_kv_calls == F + 1``
  (the trailing call that returns 0).  Because a record is only deferred when
  it cannot fit, ``F`` equals the number of bins a greedy first-fit packing of
  the emitted record sizes into capacity ``T`` needs (:func:`greedy_fills`).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from collections import deque
from dataclasses import asdict, dataclass, field

from . import kv
from .blockio import AccountedWriter, BatchedBackend, CrossingCostModel, CrossingStats, SyncBackend
from .merge import (
    DEFAULT_ALGO_THRESHOLD,
    DEFAULT_WRITE_BUFFER,
    ENGINES,
    Algo,
    MergeState,
    Step,
    WriteBuffer,
    select_algorithm,
)
from .sstable import DEFAULT_BLOCK_SIZE, DEFAULT_TARGET_SST_SIZE, SSTableBuilder, SSTableMeta, open_sstable
from .sstmap import DEFAULT_MAX_INPUTS, build_sstmap

DEFAULT_WRITE_FLUSH = 1 << 20


@dataclass
class JobConfig:
    inputs: list[str]
    output_dir: str
    block_size: int = DEFAULT_BLOCK_SIZE
    write_buffer_threshold: int = DEFAULT_WRITE_BUFFER
    target_sst_size: int = DEFAULT_TARGET_SST_SIZE
    merge_algo: str = "auto"
    algo_threshold: int = DEFAULT_ALGO_THRESHOLD
    drop_tombstones: bool = False
    per_crossing_delay_us: float = 0.0
    queue_depth: int = 256
    prefetch_depth: int = 1
    write_flush_bytes: int = DEFAULT_WRITE_FLUSH
    max_inputs: int = DEFAULT_MAX_INPUTS
    output_prefix: str = "out"

    def __post_init__(self):
        self.inputs = [os.fspath(p) for p in self.inputs]
        self.output_dir = os.fspath(self.output_dir)
        if self.write_buffer_threshold < self.block_size:
            raise ValueError("write_buffer_threshold must be >= block_size")
        if self.target_sst_size < self.block_size:
            raise ValueError("target_sst_size must be >= block_size")
        if self.merge_algo not in ("auto", "linear", "minheap"):
            raise ValueError(f"unknown merge_algo {self.merge_algo!r}")
        if self.prefetch_depth < 1 or self.queue_depth < 1 or self.write_flush_bytes < 1:
            raise ValueError("prefetch_depth, queue_depth and write_flush_bytes must be >= 1")

    def resolve_algo(self, n_inputs: int) -> Algo:
        if self.merge_algo == "auto":
            return select_algorithm(n_inputs, self.algo_threshold)
        return Algo(self.merge_algo)

    @property
    def cost(self) -> CrossingCostModel:
        return CrossingCostModel(self.per_crossing_delay_us)


@dataclass
class CompactionReport:
    engine: str
    merge_algo: str
    n_inputs: int
    input_records: int
    records_merged: int
    records_dropped: int
    read_next_kv_calls: int | None
    comparisons: int
    selections: int
    output_files: list[str]
    output_bytes: int
    output_sha256: str
    wall_ms: float
    stats: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


class OutputWriter:
    """The WriteKV side: decodes merged records into rolling output tables."""

    def __init__(self, cfg: JobConfig, backend):
        self.cfg = cfg
        self.backend = backend
        self.metas: list[SSTableMeta] = []
        self._builder: SSTableBuilder | None = None
        self._target_blocks = max(1, cfg.target_sst_size // cfg.block_size)
        os.makedirs(cfg.output_dir, exist_ok=True)

    def _open_next(self) -> SSTableBuilder:
        path = os.path.join(self.cfg.output_dir, f"{self.cfg.output_prefix}_{len(self.metas):06d}.sst")
        sink = AccountedWriter(path, self.backend, self.cfg.write_flush_bytes)
        return SSTableBuilder(path, self.cfg.block_size, sink=sink)

    def write_kv(self, buf) -> int:
        """Persist a buffer of whole encoded records; returns bytes consumed."""
        view = memoryview(buf)
        end = len(view)
        off = 0
        while off < end:
            klen, _, seq, vlen = kv.decode_header(view, off, end)
            total = kv.HEADER_SIZE + klen + vlen
            key = bytes(view[off + kv.HEADER_SIZE : off + kv.HEADER_SIZE + klen])
            b = self._builder
            if b is None:
                b = self._builder = self._open_next()
            elif b.needs_new_block(total) and b.blocks_started >= self._target_blocks:
                self.metas.append(b.finish())
                b = self._builder = self._open_next()
            b.add_encoded(key, seq, view[off : off + total])
            off += total
        return end

    def finish(self) -> list[SSTableMeta]:
        if self._builder is not None:
            self.metas.append(self._builder.finish())
            self._builder = None
        return self.metas


def greedy_fills(record_sizes, threshold: int) -> int:
    """Number of buffers a first-fit-in-order packing of ``record_sizes`` fills."""
    fills = 0
    used = 0
    for n in record_sizes:
        if used + n > threshold:
            fills += 1
            used = 0
        used += n
    return fills + (1 if used else 0)


def _hash_outputs(metas) -> tuple[str, int]:
    h = hashlib.sha256()
    total = 0
    for m in metas:
        with open(m.path, "rb") as f:
            data = f.read()
        h.update(data)
        total += len(data)
    return h.hexdigest(), total


def _open_inputs(cfg: JobConfig) -> list[SSTableMeta]:
    return [open_sstable(p) for p in cfg.inputs]


class OffloadController:
    """Batched-read controller driving a merge engine inside ReadNextKV calls.

    Each :meth:`read_next_kv` is one modeled kernel entry.  Inside it the
    controller loads blocks named by the SST-Map through batched reads, runs the
    merge engine until the write buffer is full or every input is finished, and
    hands the buffer back through :attr:`buffer`.
    """

    def __init__(self, metas: list[SSTableMeta], cfg: JobConfig, backend: BatchedBackend | None = None):
        self.cfg = cfg
        self.metas = metas
        self.algo = cfg.resolve_algo(len(metas))
        self.engine = ENGINES[self.algo]
        self.sstmap = build_sstmap(metas, cfg.max_inputs)
        self.backend = backend or BatchedBackend(cost=cfg.cost, queue_depth=cfg.queue_depth)
        for m in metas:
            self.backend.register(m)
        self.state = MergeState(len(metas), drop_tombstones=cfg.drop_tombstones)
        self.blocks: list[bytes | None] = [None] * len(metas)
        self._prefetched = [deque() for _ in metas]
        self.wb = WriteBuffer(cfg.write_buffer_threshold)
        self.buffer = b""
        self.calls = 0
        self.nonempty_returns = 0
        self._started = False
        self._finished = False
        self._returned_zero = False

    def _load(self, ordinals) -> None:
        """Give each ordinal its next block, batching every read this needs."""
        reqs = []
        owners = []
        for i in ordinals:
            if self._prefetched[i]:
                continue
            for _ in range(self.cfg.prefetch_depth):
                d = self.sstmap.next_block_descriptor(i)
                if d is None:
                    break
                reqs.append(self.backend.request(self.sstmap.inputs[i].file_id, d.offset, len(reqs)))
                owners.append((i, d))
        for start in range(0, len(reqs), self.backend.queue_depth):
            chunk = reqs[start : start + self.backend.queue_depth]
            for (i, d), data in zip(owners[start : start + len(chunk)], self.backend.submit_batch(chunk)):
                self._prefetched[i].append((data, d.used_len))
        for i in ordinals:
            if self._prefetched[i]:
                data, used = self._prefetched[i].popleft()
                self.blocks[i] = data
                self.state.load_block(i, used)
            else:
                self.blocks[i] = None
                self.state.mark_done(i)

    def read_next_kv(self) -> int:
        with self.backend.crossing():
            self.calls += 1
            if self._finished:
                self.buffer = b""
                self._returned_zero = True
                return 0
            if not self._started:
                self._started = True
                self._load(range(len(self.metas)))
            while True:
                res = self.engine(self.state, self.blocks, self.wb)
                if res.step is Step.BUFFER_FULL:
                    break
                if res.step is Step.ALL_DONE:
                    self._finished = True
                    break
                self._load(sorted(res.exhausted))
            self.buffer = self.wb.take()
            if not self.buffer:
                self._returned_zero = True
                return 0
            self.nonempty_returns += 1
            return len(self.buffer)

    @property
    def done(self) -> bool:
        return self._returned_zero


def _report(engine, algo, metas, state, outputs, started, stats, calls) -> CompactionReport:
    wall_ms = (time.perf_counter() - started) * 1e3
    digest, nbytes = _hash_outputs(outputs)
    return CompactionReport(
        engine=engine,
        merge_algo=algo.value,
        n_inputs=len(metas),
        input_records=state.selections,
        records_merged=state.records_merged,
        records_dropped=state.records_dropped,
        read_next_kv_calls=calls,
        comparisons=state.comparisons,
        selections=state.selections,
        output_files=[m.path for m in outputs],
        output_bytes=nbytes,
        output_sha256=digest,
        wall_ms=wall_ms,
        stats=stats.to_dict(),
    )


def run_offload(cfg: JobConfig, *, stats: CrossingStats | None = None, between_calls=None, keep_backend=False):
    """Run the offload engine to completion.

    ``between_calls(controller)`` runs after every ReadNextKV and may replace
    ``controller.state`` (used to prove the merge resumes from state alone).
    With ``keep_backend`` the return value is ``(report, backend)`` so callers
    can inspect the read log.
    """
    started = time.perf_counter()
    metas = _open_inputs(cfg)
    backend = BatchedBackend(stats=stats, cost=cfg.cost, queue_depth=cfg.queue_depth)
    ctl = OffloadController(metas, cfg, backend)
    out = OutputWriter(cfg, backend)
    try:
        while ctl.read_next_kv():
            out.write_kv(ctl.buffer)
            if between_calls is not None:
                between_calls(ctl)
        outputs = out.finish()
    finally:
        backend.close()
    rep = _report("offload", ctl.algo, metas, ctl.state, outputs, started, backend.stats, ctl.calls)
    return (rep, backend) if keep_backend else rep


def run_baseline(cfg: JobConfig, *, stats: CrossingStats | None = None, keep_backend=False):
    """Classic iterator: fetch each block on demand with one crossing apiece."""
    started = time.perf_counter()
    metas = _open_inputs(cfg)
    algo = cfg.resolve_algo(len(metas))
    engine = ENGINES[algo]
    sstmap = build_sstmap(metas, cfg.max_inputs)
    backend = SyncBackend(stats=stats, cost=cfg.cost)
    for m in metas:
        backend.register(m)
    state = MergeState(len(metas), drop_tombstones=cfg.drop_tombstones)
    blocks: list[bytes | None] = [None] * len(metas)
    wb = WriteBuffer(cfg.write_buffer_threshold)
    out = OutputWriter(cfg, backend)

    def advance(i):
        d = sstmap.next_block_descriptor(i)
        if d is None:
            blocks[i] = None
            state.mark_done(i)
        else:
            blocks[i] = backend.read_one(backend.request(sstmap.inputs[i].file_id, d.offset))
            state.load_block(i, d.used_len)

    try:
        for i in range(len(metas)):
            advance(i)
        while True:
            res = engine(state, blocks, wb)
            if res.step is Step.ALL_DONE:
                break
            if res.step is Step.BUFFER_FULL:
                out.write_kv(wb.take())
            else:
                for i in sorted(res.exhausted):
                    advance(i)
        out.write_kv(wb.take())
        outputs = out.finish()
    finally:
        backend.close()
    rep = _report("baseline", algo, metas, state, outputs, started, backend.stats, None)
    return (rep, backend) if keep_backend else rep


def run(cfg: JobConfig, engine: str, **kw):
    if engine == "baseline":
        return run_baseline(cfg, **kw)
    if engine == "offload":
        return run_offload(cfg, **kw)
    raise ValueError(f"unknown engine {engine!r}")
