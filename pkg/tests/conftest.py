import os
import random

import pytest

from compactlab import kv
from compactlab.sstable import SSTableBuilder


def random_record(rng: random.Random, max_key=24, max_value=64, delete_p=0.2) -> kv.Record:
    key = bytes(rng.randrange(256) for _ in range(rng.randint(1, max_key)))
    seq = rng.randrange(1 << 64)
    if rng.random() < delete_p:
        return kv.Record(key, seq, kv.Kind.DELETE)
    return kv.Record(key, seq, kv.Kind.PUT, rng.randbytes(rng.randint(0, max_value)))


def sorted_records(records):
    return sorted(records, key=lambda r: (r.user_key, -r.seq))


def write_table(path, records, block_size=256):
    b = SSTableBuilder(os.fspath(path), block_size)
    for r in records:
        b.add(r)
    return b.finish()


def make_inputs(tmp_path, runs, block_size=256):
    """Write each list of ``(key, seq[, value | None])`` tuples as one sorted table."""
    metas = []
    for i, run in enumerate(runs):
        recs = []
        for t in run:
            key, seq = t[0], t[1]
            value = t[2] if len(t) > 2 else b"v" + key
            if value is None:
                recs.append(kv.Record(key, seq, kv.Kind.DELETE))
            else:
                recs.append(kv.Record(key, seq, kv.Kind.PUT, value))
        metas.append(write_table(tmp_path / f"in{i}.sst", sorted_records(recs), block_size))
    return metas


@pytest.fixture
def rng():
    return random.Random(1234)


_CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def criteria():
    """Registry of acceptance outcomes, printed at the end of the run."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda s: int(s.split()[0][1:])):
        ok, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
