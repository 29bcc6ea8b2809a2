"""Brute-force reference merge used to check the engines.

Reads every input record directly from the files, sorts the lot, keeps the
newest version of each user key and optionally drops tombstones.  Shares no
code with the merge engines beyond record decoding.
"""

from __future__ import annotations

from . import kv
from .sstable import SSTableMeta, iter_table_records


def oracle_records(metas: list[SSTableMeta], drop_tombstones: bool = False) -> list[kv.Record]:
    every = [r for m in metas for r in iter_table_records(m)]
    # stable sort: exact (key, seq) ties keep input order
    every.sort(key=lambda r: (r.user_key, -r.seq))
    out = []
    last = None
    for r in every:
        if r.user_key == last:
            continue
        last = r.user_key
        if drop_tombstones and r.kind is kv.Kind.DELETE:
            continue
        out.append(r)
    return out


def encode_stream(records) -> bytes:
    return b"".join(kv.encode_record(r) for r in records)


def table_stream(metas: list[SSTableMeta]) -> bytes:
    """Concatenated record encodings of a list of tables, in order."""
    return b"".join(kv.encode_record(r) for m in metas for r in iter_table_records(m))
