"""Deterministic generation of sorted compaction inputs.

Keys are zero-padded decimal integers of a fixed width, so byte order is
numeric order.  Sequence numbers are a seeded permutation of ``1..total``,
which keeps them unique across the whole workload.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import random
from dataclasses import asdict, dataclass

from . import kv
from .sstable import DEFAULT_BLOCK_SIZE, SSTableBuilder, SSTableMeta


class ZipfSampler:
    """Zipf ranks in ``[1, n]`` with P(k) proportional to ``k ** -theta``.

    Rejection-inversion sampling (Hörmann and Derflinger); constant expected
    time per draw and no table over ``n``.
    """

    def __init__(self, n: int, theta: float = 0.99):
        if n < 1:
            raise ValueError("n must be >= 1")
        if theta <= 0:
            raise ValueError("theta must be > 0")
        self.n = n
        self.theta = theta
        self._h_x1 = self._H(1.5) - 1.0
        self._h_n = self._H(n + 0.5)
        self._s = 2.0 - self._H_inv(self._H(2.5) - self._h(2.0))

    def _h(self, x: float) -> float:
        return math.exp(-self.theta * math.log(x))

    def _H(self, x: float) -> float:
        log_x = math.log(x)
        return _expm1_over_x((1.0 - self.theta) * log_x) * log_x

    def _H_inv(self, x: float) -> float:
        t = max(-1.0, x * (1.0 - self.theta))
        return math.exp(_log1p_over_x(t) * x)

    def sample(self, rng: random.Random) -> int:
        while True:
            u = self._h_n + rng.random() * (self._h_x1 - self._h_n)
            x = self._H_inv(u)
            k = min(max(int(x + 0.5), 1), self.n)
            if k - x <= self._s or u >= self._H(k + 0.5) - self._h(k):
                return k


def _expm1_over_x(x: float) -> float:
    if abs(x) > 1e-8:
        return math.expm1(x) / x
    return 1.0 + x * (0.5 + x * (1.0 / 6.0 + x / 24.0))


def _log1p_over_x(x: float) -> float:
    if abs(x) > 1e-8:
        return math.log1p(x) / x
    return 1.0 - x * (0.5 - x * (1.0 / 3.0 - x / 4.0))


@dataclass
class WorkloadSpec:
    n_inputs: int = 4
    records_per_input: int = 1000
    key_len: int = 16
    value_len: int = 1024
    duplicate_fraction: float = 0.0
    tombstone_fraction: float = 0.0
    seed: int = 0
    distribution: str = "uniform"
    zipf_theta: float = 0.99
    key_space: int | None = None
    block_size: int = DEFAULT_BLOCK_SIZE

    def __post_init__(self):
        if self.n_inputs < 1 or self.records_per_input < 1:
            raise ValueError("n_inputs and records_per_input must be >= 1")
        if not 1 <= self.key_len <= kv.MAX_KEY_LEN:
            raise ValueError(f"key_len must be in [1, {kv.MAX_KEY_LEN}]")
        if not 0 <= self.value_len <= kv.MAX_VALUE_LEN:
            raise ValueError("value_len out of range")
        for name in ("duplicate_fraction", "tombstone_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.distribution not in ("uniform", "zipfian"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if kv.HEADER_SIZE + self.key_len + self.value_len > self.block_size:
            raise ValueError("records of this shape do not fit in one block")
        if self.resolved_key_space < self.n_inputs * self.records_per_input:
            raise ValueError("key space too small for the requested number of distinct keys")

    @property
    def resolved_key_space(self) -> int:
        cap = 10**self.key_len
        want = self.key_space if self.key_space is not None else max(1000, 10 * self.n_inputs * self.records_per_input)
        return min(want, cap)

    @classmethod
    def from_json(cls, text: str) -> "WorkloadSpec":
        return cls(**json.loads(text))

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def records_for_blocks(n_blocks: int, key_len: int = 16, value_len: int = 1024, block_size: int = DEFAULT_BLOCK_SIZE) -> int:
    """Records per input that fill exactly ``n_blocks`` blocks of put records."""
    return n_blocks * (block_size // (kv.HEADER_SIZE + key_len + value_len))


def _draw_keys(spec: WorkloadSpec, rng: random.Random) -> list[list[int]]:
    space = spec.resolved_key_space
    zipf = ZipfSampler(space, spec.zipf_theta) if spec.distribution == "zipfian" else None

    def draw() -> int:
        return zipf.sample(rng) - 1 if zipf else rng.randrange(space)

    used: set[int] = set()
    pool: list[int] = []
    per_input = []
    R = spec.records_per_input
    for i in range(spec.n_inputs):
        mine: set[int] = set()
        if i and spec.duplicate_fraction:
            n_dup = min(round(spec.duplicate_fraction * R), len(pool))
            mine.update(rng.sample(pool, n_dup))
        while len(mine) < R:
            k = draw()
            tries = 0
            while k in used or k in mine:
                tries += 1
                # skewed draws keep hitting hot keys; fall back to probing
                k = draw() if tries < 32 else (k + 1) % space
            mine.add(k)
        fresh = sorted(mine - used)
        used.update(fresh)
        pool.extend(fresh)
        per_input.append(sorted(mine))
    return per_input


def generate_records(spec: WorkloadSpec) -> list[list[kv.Record]]:
    rng = random.Random(spec.seed)
    keys = _draw_keys(spec, rng)
    total = sum(len(k) for k in keys)
    seqs = list(range(1, total + 1))
    rng.shuffle(seqs)
    width = spec.key_len
    out = []
    pos = 0
    for ks in keys:
        recs = []
        for k in ks:
            key = str(k).zfill(width).encode()
            seq = seqs[pos]
            pos += 1
            if spec.tombstone_fraction and rng.random() < spec.tombstone_fraction:
                recs.append(kv.Record(key, seq, kv.Kind.DELETE))
            else:
                recs.append(kv.Record(key, seq, kv.Kind.PUT, rng.randbytes(spec.value_len)))
        out.append(recs)
    return out


def generate_inputs(spec: WorkloadSpec, out_dir) -> list[SSTableMeta]:
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    metas = []
    for i, recs in enumerate(generate_records(spec)):
        b = SSTableBuilder(os.path.join(out_dir, f"input_{i:03d}.sst"), spec.block_size)
        for r in recs:
            b.add(r)
        metas.append(b.finish())
    return metas


def manifest(metas: list[SSTableMeta]) -> list[dict]:
    rows = []
    for m in metas:
        with open(m.path, "rb") as f:
            digest = hashlib.sha256(f.read()).hexdigest()
        rows.append({"path": m.path, "num_blocks": m.num_blocks, "sha256": digest})
    return rows
