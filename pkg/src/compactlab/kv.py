"""Record model, binary record layout and the internal-key order.

Wire layout of one record (little-endian, no padding)::

    key_len:u16 | flags:u8 | seq:u64 | value_len:u32 | user_key | value

``flags`` bit 0 marks a tombstone; the other bits are zero.  ``key_len`` of
zero is reserved and always signals corruption.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from .errors import (
    KeyTooLong,
    RecordTooLargeForBlock,
    TruncatedRecord,
    ValueTooLong,
    ZeroKeyLength,
)

HEADER = struct.Struct("<HBQI")
HEADER_SIZE = HEADER.size  # 15

MAX_KEY_LEN = 1024
MAX_VALUE_LEN = 1 << 20
MAX_SEQ = (1 << 64) - 1

FLAG_DELETE = 0x01


class Kind(enum.IntEnum):
    PUT = 0
    DELETE = 1


@dataclass(frozen=True, slots=True)
class Record:
    user_key: bytes
    seq: int
    kind: Kind = Kind.PUT
    value: bytes = b""

    @property
    def is_delete(self) -> bool:
        return self.kind is Kind.DELETE

    @property
    def encoded_len(self) -> int:
        return HEADER_SIZE + len(self.user_key) + len(self.value)

    def internal_key(self) -> tuple[bytes, int]:
        return internal_key(self.user_key, self.seq)


def internal_key(user_key: bytes, seq: int) -> tuple[bytes, int]:
    """Sort key realising the internal order: user key ascending, seq descending."""
    return (user_key, -seq)


def compare_internal(a: tuple[bytes, int], b: tuple[bytes, int]) -> int:
    """Three-way compare of two ``(user_key, seq)`` pairs; returns -1, 0 or 1."""
    ka, sa = a
    kb, sb = b
    if ka != kb:
        return -1 if ka < kb else 1
    if sa == sb:
        return 0
    # higher sequence numbers sort first
    return -1 if sa > sb else 1


def encode_record(
    r: Record,
    *,
    block_size: int | None = None,
    max_key_len: int = MAX_KEY_LEN,
    max_value_len: int = MAX_VALUE_LEN,
) -> bytes:
    klen = len(r.user_key)
    vlen = len(r.value)
    if klen == 0:
        raise ZeroKeyLength("user_key must be non-empty")
    if klen > max_key_len:
        raise KeyTooLong(f"key of {klen} bytes exceeds {max_key_len}")
    if vlen > max_value_len:
        raise ValueTooLong(f"value of {vlen} bytes exceeds {max_value_len}")
    if r.kind is Kind.DELETE and vlen:
        raise ValueError("tombstones carry no value")
    if not 0 <= r.seq <= MAX_SEQ:
        raise ValueError(f"seq {r.seq} outside u64 range")
    total = HEADER_SIZE + klen + vlen
    if block_size is not None and total > block_size:
        raise RecordTooLargeForBlock(f"record of {total} bytes exceeds block of {block_size}")
    flags = FLAG_DELETE if r.kind is Kind.DELETE else 0
    return HEADER.pack(klen, flags, r.seq, vlen) + r.user_key + r.value


def decode_header(buf, offset: int = 0, end: int | None = None) -> tuple[int, int, int, int]:
    """Return ``(key_len, flags, seq, value_len)`` after bounds checks against ``end``."""
    if end is None:
        end = len(buf)
    if offset + HEADER_SIZE > end:
        raise TruncatedRecord(f"header at {offset} runs past {end}")
    klen, flags, seq, vlen = HEADER.unpack_from(buf, offset)
    if klen == 0:
        raise ZeroKeyLength(f"zero key length at offset {offset}")
    if offset + HEADER_SIZE + klen + vlen > end:
        raise TruncatedRecord(f"record at {offset} declares {klen}+{vlen} payload bytes past {end}")
    return klen, flags, seq, vlen


def decode_record(buf, offset: int = 0) -> tuple[Record, int]:
    klen, flags, seq, vlen = decode_header(buf, offset)
    start = offset + HEADER_SIZE
    key = bytes(buf[start : start + klen])
    value = bytes(buf[start + klen : start + klen + vlen])
    kind = Kind.DELETE if flags & FLAG_DELETE else Kind.PUT
    return Record(key, seq, kind, value), start + klen + vlen


def iter_records(buf, start: int = 0, end: int | None = None):
    """Yield every record in ``buf[start:end]``, which must hold whole records."""
    if end is None:
        end = len(buf)
    view = memoryview(buf)[:end]
    off = start
    while off < end:
        rec, off = decode_record(view, off)
        yield rec
