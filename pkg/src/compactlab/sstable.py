"""On-disk SSTable: fixed-size zero-padded data blocks, an index region, a footer.

File layout (all integers little-endian)::

    [block 0][block 1]...[block n-1]           each exactly block_size bytes
    [count:u32]{[klen:u16][first_key][block_index:u32][offset:u64][used_len:u32]}*
    [index_offset:u64][index_len:u64][block_size:u32][num_blocks:u32][b"RSYSSST1"]

Block ``i`` always starts at ``i * block_size``; the bytes after ``used_len``
are zero.  Records never span blocks.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

from . import kv
from .errors import (
    BadMagic,
    CorruptIndex,
    EmptyTable,
    IoFailure,
    OutOfOrderRecord,
    RecordTooLargeForBlock,
)

MAGIC = b"RSYSSST1"
FOOTER = struct.Struct("<QQII8s")
FOOTER_SIZE = FOOTER.size  # 32
_COUNT = struct.Struct("<I")
_KLEN = struct.Struct("<H")
_ENTRY_TAIL = struct.Struct("<IQI")

DEFAULT_BLOCK_SIZE = 4096
DEFAULT_TARGET_SST_SIZE = 64 << 20


@dataclass(frozen=True, slots=True)
class IndexEntry:
    first_key: bytes
    block_index: int
    offset: int
    used_len: int

    @property
    def size(self) -> int:
        return self.used_len


@dataclass(frozen=True)
class SSTableMeta:
    file_id: str
    path: str
    block_size: int
    num_blocks: int
    index: tuple[IndexEntry, ...]
    smallest: bytes
    largest: bytes

    @property
    def index_offset(self) -> int:
        return self.num_blocks * self.block_size


def encode_index(entries) -> bytes:
    out = bytearray(_COUNT.pack(len(entries)))
    for e in entries:
        out += _KLEN.pack(len(e.first_key))
        out += e.first_key
        out += _ENTRY_TAIL.pack(e.block_index, e.offset, e.used_len)
    return bytes(out)


class _FileSink:
    def __init__(self, path):
        try:
            self._f = open(path, "wb")
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def write(self, data) -> None:
        try:
            self._f.write(data)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def close(self) -> None:
        self._f.close()


@dataclass
class SSTableBuilder:
    """Streams sorted records into a table file.

    ``sink`` receives every sealed block, then the index and footer; by default
    it is a plain file at ``path``.  Compaction passes an accounted writer.
    """

    path: str | os.PathLike
    block_size: int = DEFAULT_BLOCK_SIZE
    file_id: str | None = None
    sink: object = None
    index: list[IndexEntry] = field(default_factory=list)
    num_records: int = 0

    def __post_init__(self):
        self.path = os.fspath(self.path)
        if self.file_id is None:
            self.file_id = self.path
        if self.block_size < kv.HEADER_SIZE + 1:
            raise ValueError(f"block_size {self.block_size} cannot hold any record")
        if self.sink is None:
            self.sink = _FileSink(self.path)
        self._block = bytearray()
        self._block_first_key: bytes | None = None
        self._last: tuple[bytes, int] | None = None
        self._largest: bytes | None = None
        self._finished = False

    @property
    def blocks_started(self) -> int:
        """Sealed blocks plus the open one, if it holds anything."""
        return len(self.index) + (1 if self._block else 0)

    def needs_new_block(self, encoded_len: int) -> bool:
        return bool(self._block) and len(self._block) + encoded_len > self.block_size

    def add(self, r: kv.Record) -> None:
        raw = kv.encode_record(r, block_size=self.block_size)
        self.add_encoded(r.user_key, r.seq, raw)

    def add_encoded(self, user_key: bytes, seq: int, raw) -> None:
        """Append an already-encoded record (``raw`` must be its exact encoding)."""
        if self._finished:
            raise ValueError("builder already finished")
        n = len(raw)
        if n > self.block_size:
            raise RecordTooLargeForBlock(f"record of {n} bytes exceeds block of {self.block_size}")
        ikey = (user_key, -seq)
        if self._last is not None and ikey < self._last:
            raise OutOfOrderRecord(
                f"{user_key!r}@{seq} sorts before previous {self._last[0]!r}@{-self._last[1]}"
            )
        if self.needs_new_block(n):
            self._seal()
        if not self._block:
            self._block_first_key = bytes(user_key)
        self._block += raw
        self._last = ikey
        self._largest = ikey[0]
        self.num_records += 1

    def _seal(self) -> None:
        used = len(self._block)
        bi = len(self.index)
        self.index.append(IndexEntry(self._block_first_key, bi, bi * self.block_size, used))
        self._block += bytes(self.block_size - used)
        self.sink.write(bytes(self._block))
        self._block = bytearray()
        self._block_first_key = None

    def finish(self) -> SSTableMeta:
        if self._finished:
            raise ValueError("builder already finished")
        if self.num_records == 0:
            raise EmptyTable(f"no records added to {self.path}")
        if self._block:
            self._seal()
        index_bytes = encode_index(self.index)
        index_offset = len(self.index) * self.block_size
        footer = FOOTER.pack(index_offset, len(index_bytes), self.block_size, len(self.index), MAGIC)
        self.sink.write(index_bytes + footer)
        self.sink.close()
        self._finished = True
        return SSTableMeta(
            file_id=self.file_id,
            path=self.path,
            block_size=self.block_size,
            num_blocks=len(self.index),
            index=tuple(self.index),
            smallest=self.index[0].first_key,
            largest=self._largest,
        )


def build_sstable(path, records, block_size: int = DEFAULT_BLOCK_SIZE, file_id=None) -> SSTableMeta:
    b = SSTableBuilder(path, block_size, file_id=file_id)
    for r in records:
        b.add(r)
    return b.finish()


def _parse_index(buf: bytes, block_size: int, num_blocks: int) -> list[IndexEntry]:
    try:
        (count,) = _COUNT.unpack_from(buf, 0)
        off = _COUNT.size
        entries = []
        for _ in range(count):
            (klen,) = _KLEN.unpack_from(buf, off)
            off += _KLEN.size
            key = buf[off : off + klen]
            if len(key) != klen:
                raise CorruptIndex("index entry key truncated")
            off += klen
            bi, offset, used = _ENTRY_TAIL.unpack_from(buf, off)
            off += _ENTRY_TAIL.size
            entries.append(IndexEntry(bytes(key), bi, offset, used))
    except struct.error as exc:
        raise CorruptIndex(f"index region truncated: {exc}") from exc
    if off != len(buf):
        raise CorruptIndex(f"{len(buf) - off} trailing bytes after index entries")
    if count != num_blocks or count == 0:
        raise CorruptIndex(f"index holds {count} entries, footer says {num_blocks}")
    prev = None
    for pos, e in enumerate(entries):
        if e.block_index != pos:
            raise CorruptIndex(f"entry {pos} has block_index {e.block_index}")
        if e.offset != e.block_index * block_size:
            raise CorruptIndex(f"block {pos} offset {e.offset} != {pos} * {block_size}")
        if not 0 < e.used_len <= block_size:
            raise CorruptIndex(f"block {pos} used_len {e.used_len} outside (0, {block_size}]")
        if not e.first_key or (prev is not None and e.first_key < prev):
            raise CorruptIndex(f"block {pos} first key out of order")
        prev = e.first_key
    return entries


def open_sstable(path, file_id: str | None = None) -> SSTableMeta:
    path = os.fspath(path)
    try:
        with open(path, "rb") as f:
            size = f.seek(0, os.SEEK_END)
            if size < FOOTER_SIZE:
                raise BadMagic(f"{path}: {size} bytes is too short for a footer")
            f.seek(size - FOOTER_SIZE)
            index_offset, index_len, block_size, num_blocks, magic = FOOTER.unpack(f.read(FOOTER_SIZE))
            if magic != MAGIC:
                raise BadMagic(f"{path}: magic {magic!r}")
            if block_size == 0 or index_offset != num_blocks * block_size:
                raise CorruptIndex(f"{path}: index_offset {index_offset} != {num_blocks} * {block_size}")
            if index_offset + index_len + FOOTER_SIZE != size:
                raise CorruptIndex(f"{path}: regions do not add up to file size {size}")
            f.seek(index_offset)
            entries = _parse_index(f.read(index_len), block_size, num_blocks)
            last = entries[-1]
            f.seek(last.offset)
            last_block = f.read(last.used_len)
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    largest = None
    for rec in kv.iter_records(last_block):
        largest = rec.user_key
    return SSTableMeta(
        file_id=path if file_id is None else file_id,
        path=path,
        block_size=block_size,
        num_blocks=num_blocks,
        index=tuple(entries),
        smallest=entries[0].first_key,
        largest=largest,
    )


def read_block(meta: SSTableMeta, block_index: int) -> bytes:
    """Plain unaccounted read of one whole padded block."""
    with open(meta.path, "rb") as f:
        f.seek(block_index * meta.block_size)
        return f.read(meta.block_size)


def iter_table_records(meta: SSTableMeta):
    """Decode every record of a table in order, bypassing the accounted I/O path."""
    with open(meta.path, "rb") as f:
        data = f.read(meta.index_offset)
    for e in meta.index:
        yield from kv.iter_records(data, e.offset, e.offset + e.used_len)


def dump_json(meta: SSTableMeta, with_records: bool = True) -> dict:
    def text(b: bytes) -> str:
        return b.decode("ascii", "backslashreplace")

    out = {
        "path": meta.path,
        "block_size": meta.block_size,
        "num_blocks": meta.num_blocks,
        "index_offset": meta.index_offset,
        "smallest": text(meta.smallest),
        "largest": text(meta.largest),
        "index": [
            {"first_key": text(e.first_key), "block_index": e.block_index, "offset": e.offset, "used_len": e.used_len}
            for e in meta.index
        ],
    }
    if with_records:
        out["records"] = [
            {"user_key": text(r.user_key), "seq": r.seq, "kind": r.kind.name.lower(), "value_len": len(r.value)}
            for r in iter_table_records(meta)
        ]
    return out
