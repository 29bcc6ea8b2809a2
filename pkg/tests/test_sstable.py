import os
import random
import struct

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from compactlab import kv
from compactlab.errors import BadMagic, CorruptIndex, EmptyTable, OutOfOrderRecord, RecordTooLargeForBlock
from compactlab.sstable import (
    FOOTER_SIZE,
    SSTableBuilder,
    iter_table_records,
    open_sstable,
    read_block,
)

from conftest import random_record, sorted_records, write_table

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

# ("a", 7, put, "xy") in a 64-byte block, laid out by hand
GOLDEN_1REC_64 = (
    bytes.fromhex("0100" "00" "0700000000000000" "02000000" "61" "7879")
    + bytes(46)
    # index: count, then klen, key, block_index, offset, used_len
    + bytes.fromhex("01000000" "0100" "61" "00000000" "0000000000000000" "12000000")
    # footer: index_offset=64, index_len=23, block_size=64, num_blocks=1, magic
    + bytes.fromhex("4000000000000000" "1700000000000000" "40000000" "01000000")
    + b"RSYSSST1"
)


def rec(key, seq, value=b"xy"):
    return kv.Record(key, seq, kv.Kind.PUT, value)


def test_golden_fixture_bytes(tmp_path):
    assert len(GOLDEN_1REC_64) == 64 + 23 + 32
    with open(os.path.join(FIXTURES, "golden_1rec_64.sst"), "rb") as f:
        assert f.read() == GOLDEN_1REC_64
    meta = write_table(tmp_path / "g.sst", [rec(b"a", 7)], block_size=64)
    assert (tmp_path / "g.sst").read_bytes() == GOLDEN_1REC_64
    assert open_sstable(os.path.join(FIXTURES, "golden_1rec_64.sst")).index == meta.index


def test_two_records_share_a_block(tmp_path):
    meta = write_table(tmp_path / "t.sst", [rec(b"a", 2), rec(b"b", 1)], block_size=64)
    assert meta.num_blocks == 1
    assert meta.index[0].used_len == 36


def test_records_never_span_blocks(tmp_path):
    meta = write_table(tmp_path / "t.sst", [rec(b"a", 2), rec(b"b", 1)], block_size=32)
    assert [e.used_len for e in meta.index] == [18, 18]
    assert [e.offset for e in meta.index] == [0, 32]
    assert [e.first_key for e in meta.index] == [b"a", b"b"]


def test_out_of_order_rejected(tmp_path):
    b = SSTableBuilder(tmp_path / "t.sst", 64)
    b.add(rec(b"b", 9))
    with pytest.raises(OutOfOrderRecord):
        b.add(rec(b"a", 1))


def test_lower_seq_of_same_key_is_in_order(tmp_path):
    b = SSTableBuilder(tmp_path / "t.sst", 64)
    b.add(rec(b"k", 9))
    b.add(rec(b"k", 3))
    with pytest.raises(OutOfOrderRecord):
        b.add(rec(b"k", 4))


def test_record_larger_than_block(tmp_path):
    b = SSTableBuilder(tmp_path / "t.sst", 32)
    with pytest.raises(RecordTooLargeForBlock):
        b.add(rec(b"a", 1, b"v" * 20))


def test_empty_table(tmp_path):
    with pytest.raises(EmptyTable):
        SSTableBuilder(tmp_path / "t.sst", 64).finish()


def test_one_record_file_size(tmp_path):
    meta = write_table(tmp_path / "t.sst", [rec(b"a", 7)], block_size=4096)
    index_len = 4 + 2 + 1 + 4 + 8 + 4
    assert os.path.getsize(meta.path) == 4096 + index_len + FOOTER_SIZE


def test_64mib_table_has_16384_blocks(tmp_path):
    # one 4096-byte record per block
    value = b"\x00" * (4096 - 15 - 8)
    b = SSTableBuilder(tmp_path / "big.sst", 4096)
    for i in range(16384):
        b.add(kv.Record(b"%08d" % i, 1, kv.Kind.PUT, value))
    meta = b.finish()
    assert meta.num_blocks == 16384 == 2**14
    assert meta.index_offset == 64 << 20


def test_open_round_trip(tmp_path, rng):
    recs = sorted_records(random_record(rng) for _ in range(300))
    meta = write_table(tmp_path / "t.sst", recs, block_size=256)
    assert open_sstable(meta.path) == meta
    assert list(iter_table_records(meta)) == recs


def test_truncated_footer_is_bad_magic(tmp_path):
    meta = write_table(tmp_path / "t.sst", [rec(b"a", 7)], block_size=64)
    data = (tmp_path / "t.sst").read_bytes()
    (tmp_path / "t.sst").write_bytes(data[:-3])
    with pytest.raises(BadMagic):
        open_sstable(meta.path)
    (tmp_path / "short.sst").write_bytes(b"RSYS")
    with pytest.raises(BadMagic):
        open_sstable(tmp_path / "short.sst")


def test_used_len_beyond_block_is_corrupt(tmp_path):
    data = bytearray(GOLDEN_1REC_64)
    # used_len field of the only index entry
    struct.pack_into("<I", data, 64 + 4 + 2 + 1 + 4 + 8, 65)
    (tmp_path / "bad.sst").write_bytes(bytes(data))
    with pytest.raises(CorruptIndex):
        open_sstable(tmp_path / "bad.sst")


def test_wrong_block_offset_is_corrupt(tmp_path):
    data = bytearray(GOLDEN_1REC_64)
    struct.pack_into("<Q", data, 64 + 4 + 2 + 1 + 4, 64)
    (tmp_path / "bad.sst").write_bytes(bytes(data))
    with pytest.raises(CorruptIndex):
        open_sstable(tmp_path / "bad.sst")


def test_fifty_random_tables_round_trip(tmp_path):
    rng = random.Random(50)
    for t in range(50):
        block_size = rng.choice([128, 256, 512, 4096])
        recs = sorted_records(random_record(rng, max_value=80) for _ in range(rng.randint(1, 200)))
        meta = write_table(tmp_path / f"t{t}.sst", recs, block_size)
        assert open_sstable(meta.path) == meta
        assert list(iter_table_records(meta)) == recs


record_lists = st.lists(
    st.builds(
        kv.Record,
        user_key=st.binary(min_size=1, max_size=16),
        seq=st.integers(0, 100),
        kind=st.just(kv.Kind.PUT),
        value=st.binary(max_size=40),
    ),
    min_size=1,
    max_size=60,
)


@settings(max_examples=60, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(record_lists, st.sampled_from([96, 128, 1024]))
def test_block_invariants(tmp_path, recs, block_size):
    recs = sorted_records(recs)
    meta = write_table(tmp_path / "p.sst", recs, block_size)
    assert meta.index_offset == meta.num_blocks * block_size
    decoded = []
    for e in meta.index:
        block = read_block(meta, e.block_index)
        assert len(block) == block_size
        assert block[e.used_len :] == bytes(block_size - e.used_len)
        in_block = list(kv.iter_records(block, 0, e.used_len))
        assert in_block[0].user_key == e.first_key
        decoded += in_block
    assert decoded == recs
    assert meta.smallest == recs[0].user_key and meta.largest == recs[-1].user_key
