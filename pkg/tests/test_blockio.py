import io
import json
import random
import threading

import pytest

from compactlab import kv
from compactlab.blockio import (
    AccountedWriter,
    BatchedBackend,
    CrossingCostModel,
    CrossingStats,
    SyncBackend,
)
from compactlab.errors import BatchReadError, BatchTooLarge, OutOfRangeRead
from compactlab.sstable import read_block

from conftest import write_table


@pytest.fixture
def tables(tmp_path):
    metas = []
    for t in range(4):
        recs = [kv.Record(b"%04d" % i, 1, kv.Kind.PUT, bytes([t]) * 200) for i in range(12)]
        metas.append(write_table(tmp_path / f"t{t}.sst", recs, block_size=512))
    return metas


def test_read_one_returns_padded_block(tmp_path):
    meta = write_table(tmp_path / "one.sst", [kv.Record(b"a", 1, kv.Kind.PUT, b"x")], block_size=4096)
    with SyncBackend() as be:
        be.register(meta)
        data = be.read_one(be.request(meta, 0))
    assert len(data) == 4096
    assert data == read_block(meta, 0)
    assert be.stats.read_crossings == be.stats.blocks_read == 1


def test_read_one_counts_every_call(tables):
    with SyncBackend() as be:
        for m in tables:
            be.register(m)
        n = 0
        for m in tables:
            for e in m.index:
                be.read_one(be.request(m, e.offset))
                n += 1
    assert be.stats.read_crossings == be.stats.blocks_read == len(be.read_log) == n


def test_read_past_end(tables):
    m = tables[0]
    with SyncBackend() as be:
        be.register(m)
        with pytest.raises(OutOfRangeRead):
            be.read_one(be.request(m, m.index_offset))
    assert be.stats.read_crossings == 0


def test_batch_counts_one_crossing(tables):
    with BatchedBackend() as be:
        for m in tables:
            be.register(m)
        out = be.submit_batch([be.request(m, 0, slot=i) for i, m in enumerate(tables)])
    assert len(out) == 4
    assert be.stats.read_crossings == 1
    assert be.stats.blocks_read == 4


@pytest.mark.parametrize("workers", [1, 3])
def test_batch_matches_read_one(tables, workers):
    rng = random.Random(workers)
    reqs = [(m, e.offset) for m in tables for e in m.index]
    rng.shuffle(reqs)
    with SyncBackend() as s, BatchedBackend(workers=workers, queue_depth=16) as b:
        for m in tables:
            s.register(m)
            b.register(m)
        for start in range(0, len(reqs), 16):
            chunk = reqs[start : start + 16]
            batched = b.submit_batch([b.request(m, off) for m, off in chunk])
            assert batched == [s.read_one(s.request(m, off)) for m, off in chunk]
    assert [(e.file_id, e.offset) for e in b.read_log] == [(e.file_id, e.offset) for e in s.read_log]
    assert b.stats.blocks_read == s.stats.blocks_read == len(reqs)
    assert b.stats.read_crossings == -(-len(reqs) // 16)


def test_empty_and_oversized_batches(tables):
    with BatchedBackend(queue_depth=2) as be:
        be.register(tables[0])
        with pytest.raises(ValueError):
            be.submit_batch([])
        with pytest.raises(BatchTooLarge):
            be.submit_batch([be.request(tables[0], 0)] * 3)
    assert be.stats.read_crossings == 0


def test_batch_reports_failed_slots(tables):
    m = tables[0]
    with BatchedBackend() as be:
        be.register(m)
        with pytest.raises(BatchReadError) as info:
            be.submit_batch([be.request(m, 0), be.request(m, m.index_offset + 512), be.request(m, 512)])
    err = info.value
    assert err.failed == [1]
    assert err.results[0] is not None and err.results[1] is None and err.results[2] is not None
    assert be.stats.read_crossings == 1
    assert be.stats.blocks_read == len(be.read_log) == 2


def test_crossing_scope_counts_once(tables):
    with BatchedBackend() as be:
        for m in tables:
            be.register(m)
        with be.crossing():
            for m in tables:
                be.submit_batch([be.request(m, 0)])
                with be.crossing():
                    be.submit_batch([be.request(m, 512)])
    assert be.stats.read_crossings == 1
    assert be.stats.blocks_read == 8
    assert [e.batch_seq for e in be.read_log] == list(range(8))


def test_write_buffer_out_counts():
    be = SyncBackend()
    stream = io.BytesIO()
    be.write_buffer_out(stream, bytes(4096))
    assert be.stats.write_crossings == 1
    be.write_buffer_out(stream, b"")
    assert be.stats.write_crossings == 1
    for _ in range(16384):
        be.write_buffer_out(stream, b"x")
    assert be.stats.write_crossings == 16385
    assert be.stats.bytes_written == 4096 + 16384


def test_accounted_writer_flush_granularity(tmp_path):
    be = SyncBackend()
    w = AccountedWriter(tmp_path / "o", be, flush_bytes=4096)
    for _ in range(10):
        w.write(bytes(4096))
    w.write(b"tail")
    w.close()
    assert be.stats.write_crossings == 11
    assert (tmp_path / "o").stat().st_size == 10 * 4096 + 4


def test_injected_delay_identity(tables):
    d = 7.0
    with SyncBackend(cost=CrossingCostModel(d)) as be:
        be.register(tables[0])
        for e in tables[0].index:
            be.read_one(be.request(tables[0], e.offset))
        be.write_buffer_out(io.BytesIO(), b"abc")
    s = be.stats
    assert s.injected_delay_total == (s.read_crossings + s.write_crossings) * d


def test_negative_delay_rejected():
    with pytest.raises(ValueError):
        CrossingCostModel(-1)


def test_stats_concurrent_increments():
    stats = CrossingStats()

    def work():
        for _ in range(5000):
            stats.add(read_crossings=1, blocks_read=2)

    threads = [threading.Thread(target=work) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert stats.read_crossings == 40000 and stats.blocks_read == 80000
    total = CrossingStats()
    total.merge(stats)
    total.merge(stats)
    assert total.read_crossings == 80000


def test_exports(tables):
    with BatchedBackend() as be:
        be.register(tables[0])
        be.submit_batch([be.request(tables[0], 0), be.request(tables[0], 512)])
    lines = [json.loads(l) for l in be.read_log_jsonl().splitlines()]
    assert lines == [
        {"file_id": tables[0].file_id, "offset": 0, "batch_seq": 0},
        {"file_id": tables[0].file_id, "offset": 512, "batch_seq": 0},
    ]
    assert json.loads(be.stats_json())["blocks_read"] == 2
