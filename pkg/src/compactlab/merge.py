"""Resumable k-way merge engines over already-loaded blocks.

Both engines read records in place through per-input byte pointers and append
the winners to a bounded :class:`WriteBuffer`.  All progress that must survive
between invocations lives in :class:`MergeState`; the engine functions keep
nothing of their own, so a state round-tripped through :meth:`MergeState.to_json`
resumes exactly where it stopped.

A record is size-checked against the buffer *before* it is consumed.  When it
does not fit the engine returns ``BUFFER_FULL`` and leaves the pointer (and,
for the heap engine, the heap) untouched, so no record is ever lost or split.
Records that dedup will discard need no buffer room and are consumed freely.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from . import kv
from .errors import BufferTooSmall, CorruptRecord, HeapCorrupt

DEFAULT_ALGO_THRESHOLD = 6
DEFAULT_WRITE_BUFFER = 16 << 20

_unpack_header = kv.HEADER.unpack_from
_HS = kv.HEADER_SIZE


class Algo(str, enum.Enum):
    LINEAR = "linear"
    MINHEAP = "minheap"


def select_algorithm(n_inputs: int, threshold: int = DEFAULT_ALGO_THRESHOLD) -> Algo:
    if n_inputs < 1 or threshold < 1:
        raise ValueError("n_inputs and threshold must be >= 1")
    return Algo.LINEAR if n_inputs <= threshold else Algo.MINHEAP


class WriteBuffer:
    """Output bytes capped at ``threshold``; never grows past it."""

    __slots__ = ("threshold", "data")

    def __init__(self, threshold: int = DEFAULT_WRITE_BUFFER):
        if threshold < 1:
            raise ValueError("threshold must be >= 1")
        self.threshold = threshold
        self.data = bytearray()

    def __len__(self) -> int:
        return len(self.data)

    def fits(self, n: int) -> bool:
        return len(self.data) + n <= self.threshold

    def append(self, raw) -> None:
        if len(self.data) + len(raw) > self.threshold:
            raise OverflowError(f"append of {len(raw)} bytes would exceed threshold {self.threshold}")
        self.data += raw

    def take(self) -> bytes:
        """Hand the filled bytes to the caller and start over empty."""
        out = bytes(self.data)
        self.data = bytearray()
        return out


class Step(enum.Enum):
    BUFFER_FULL = "buffer_full"
    INPUT_EXHAUSTED = "input_exhausted"
    ALL_DONE = "all_done"


@dataclass(frozen=True)
class StepOutcome:
    step: Step
    exhausted: frozenset[int] = frozenset()

    def __post_init__(self):
        if (self.step is Step.INPUT_EXHAUSTED) != bool(self.exhausted):
            raise ValueError("INPUT_EXHAUSTED carries a non-empty set, other outcomes none")


BUFFER_FULL = StepOutcome(Step.BUFFER_FULL)
ALL_DONE = StepOutcome(Step.ALL_DONE)


def _buffer_full(wb: WriteBuffer, needed: int) -> StepOutcome:
    if not wb.data:
        raise BufferTooSmall(f"record of {needed} bytes can never fit a {wb.threshold}-byte buffer")
    return BUFFER_FULL


def _exhausted(ordinals) -> StepOutcome:
    return StepOutcome(Step.INPUT_EXHAUSTED, frozenset(ordinals))


@dataclass
class MergeState:
    """Everything a merge engine needs to pick up where it left off.

    ``ptr``/``block_len``/``valid`` describe each input's current block and are
    maintained jointly with the controller, which loads blocks and resets the
    pointer.  Heap entries are ``(user_key, -seq, ordinal)`` so plain tuple
    order is the internal key order with the input ordinal as final tie-break.
    """

    n_inputs: int
    ptr: list[int] = field(default_factory=list)
    block_len: list[int] = field(default_factory=list)
    valid: list[bool] = field(default_factory=list)
    fully_done: list[bool] = field(default_factory=list)
    heap: list[tuple[bytes, int, int]] = field(default_factory=list)
    prev_pop_block: int | None = None
    last_emitted_user_key: bytes | None = None
    first_call: bool = True
    drop_tombstones: bool = False
    comparisons: int = 0
    selections: int = 0
    records_merged: int = 0
    records_dropped: int = 0

    def __post_init__(self):
        n = self.n_inputs
        if n < 1:
            raise ValueError("n_inputs must be >= 1")
        for name, default in (("ptr", 0), ("block_len", 0), ("valid", False), ("fully_done", False)):
            if not getattr(self, name):
                setattr(self, name, [default] * n)
            elif len(getattr(self, name)) != n:
                raise ValueError(f"{name} must have {n} entries")

    def load_block(self, ordinal: int, used_len: int) -> None:
        """Controller hook: a new block for ``ordinal`` is in place."""
        self.ptr[ordinal] = 0
        self.block_len[ordinal] = used_len
        self.valid[ordinal] = True

    def mark_done(self, ordinal: int) -> None:
        """Controller hook: ``ordinal`` has no blocks left."""
        self.valid[ordinal] = False
        self.fully_done[ordinal] = True
        self.ptr[ordinal] = self.block_len[ordinal] = 0

    @property
    def all_done(self) -> bool:
        return all(self.fully_done)

    def to_json(self) -> dict:
        return {
            "n_inputs": self.n_inputs,
            "ptr": list(self.ptr),
            "block_len": list(self.block_len),
            "valid": list(self.valid),
            "fully_done": list(self.fully_done),
            "heap": [[k.hex(), negseq, i] for k, negseq, i in self.heap],
            "prev_pop_block": self.prev_pop_block,
            "last_emitted_user_key": None if self.last_emitted_user_key is None else self.last_emitted_user_key.hex(),
            "first_call": self.first_call,
            "drop_tombstones": self.drop_tombstones,
            "comparisons": self.comparisons,
            "selections": self.selections,
            "records_merged": self.records_merged,
            "records_dropped": self.records_dropped,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MergeState":
        d = dict(d)
        d["heap"] = [(bytes.fromhex(k), negseq, i) for k, negseq, i in d["heap"]]
        if d["last_emitted_user_key"] is not None:
            d["last_emitted_user_key"] = bytes.fromhex(d["last_emitted_user_key"])
        return cls(**d)


def will_drop(state: MergeState, user_key, is_delete: bool) -> bool:
    """True when dedup (or tombstone dropping) would discard this record."""
    return user_key == state.last_emitted_user_key or (is_delete and state.drop_tombstones)


def _admit(state: MergeState, user_key: bytes, is_delete: bool) -> bool:
    drop = will_drop(state, user_key, is_delete)
    state.last_emitted_user_key = user_key
    if drop:
        state.records_dropped += 1
    else:
        state.records_merged += 1
    return not drop


def append_dedup(state: MergeState, wb: WriteBuffer, record: kv.Record) -> bool:
    """Append ``record`` unless it shadows nothing new; returns whether it was written."""
    if not _admit(state, record.user_key, record.is_delete):
        return False
    wb.append(kv.encode_record(record))
    return True


def _header(block, ptr: int, end: int, ordinal: int):
    """Decode the record header at ``ptr``: ``(user_key, seq, is_delete, total_len)``."""
    if ptr + _HS > end:
        raise CorruptRecord(f"input {ordinal}: header at {ptr} runs past block end {end}")
    klen, flags, seq, vlen = _unpack_header(block, ptr)
    total = _HS + klen + vlen
    if klen == 0 or ptr + total > end:
        raise CorruptRecord(f"input {ordinal}: bad record at {ptr} (key_len={klen}, value_len={vlen}, end={end})")
    return bytes(block[ptr + _HS : ptr + _HS + klen]), seq, flags & kv.FLAG_DELETE, total


def _consume(state: MergeState, wb: WriteBuffer, block, i: int, key: bytes, is_delete, total: int) -> None:
    p = state.ptr[i]
    state.ptr[i] = p + total
    state.selections += 1
    if _admit(state, key, bool(is_delete)):
        wb.data += block[p : p + total]


def next_linear(state: MergeState, blocks, wb: WriteBuffer) -> StepOutcome:
    """Linear-scan selection over every valid input's current record."""
    ptr = state.ptr
    blen = state.block_len
    valid = [i for i in range(state.n_inputs) if state.valid[i]]
    if not valid:
        if state.all_done:
            return ALL_DONE
        raise CorruptRecord("no loaded inputs but merge is not finished")
    spent = [i for i in valid if ptr[i] >= blen[i]]
    if spent:
        return _exhausted(spent)
    state.first_call = False

    # per-call cache of each input's current header; rebuilt from ptr on entry
    cur = {}
    for i in valid:
        key, seq, dele, total = _header(blocks[i], ptr[i], blen[i], i)
        cur[i] = ((key, -seq), dele, total)
    first, rest = valid[0], valid[1:]
    while True:
        idx = first
        best = cur[first][0]
        for i in rest:
            k = cur[i][0]
            if k < best:
                idx, best = i, k
        state.comparisons += len(rest)
        _, dele, total = cur[idx]
        key = best[0]
        if not will_drop(state, key, bool(dele)) and not wb.fits(total):
            return _buffer_full(wb, total)
        _consume(state, wb, blocks[idx], idx, key, dele, total)
        if ptr[idx] >= blen[idx]:
            return _exhausted([idx])
        k2, seq2, dele2, total2 = _header(blocks[idx], ptr[idx], blen[idx], idx)
        cur[idx] = ((k2, -seq2), dele2, total2)


# heap helpers: entries are tuples, ``<`` on them is the internal key order


def _sift_up(state: MergeState, pos: int) -> None:
    heap = state.heap
    item = heap[pos]
    n_cmp = 0
    while pos > 0:
        parent = (pos - 1) >> 1
        n_cmp += 1
        if item < heap[parent]:
            heap[pos] = heap[parent]
            pos = parent
        else:
            break
    heap[pos] = item
    state.comparisons += n_cmp


def _sift_down(state: MergeState, pos: int) -> None:
    heap = state.heap
    size = len(heap)
    item = heap[pos]
    n_cmp = 0
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        right = child + 1
        if right < size:
            n_cmp += 1
            if heap[right] < heap[child]:
                child = right
        n_cmp += 1
        if heap[child] < item:
            heap[pos] = heap[child]
            pos = child
        else:
            break
    heap[pos] = item
    state.comparisons += n_cmp


def heap_push(state: MergeState, entry: tuple[bytes, int, int]) -> None:
    ordinal = entry[2]
    if len(state.heap) >= state.n_inputs or any(e[2] == ordinal for e in state.heap):
        raise HeapCorrupt(f"input {ordinal} already in heap or heap full")
    state.heap.append(entry)
    _sift_up(state, len(state.heap) - 1)


def heap_pop(state: MergeState) -> tuple[bytes, int, int]:
    heap = state.heap
    top = heap[0]
    last = heap.pop()
    if heap:
        heap[0] = last
        _sift_down(state, 0)
    return top


def _heap_replace_top(state: MergeState, entry) -> None:
    state.heap[0] = entry
    _sift_down(state, 0)


def _heap_entry(state, blocks, i):
    key, seq, _, _ = _header(blocks[i], state.ptr[i], state.block_len[i], i)
    return (key, -seq, i)


def next_minheap(state: MergeState, blocks, wb: WriteBuffer) -> StepOutcome:
    """Min-heap selection; an exhausted input is parked in ``prev_pop_block``."""
    if state.first_call:
        state.first_call = False
        for i in range(state.n_inputs):
            if state.valid[i]:
                heap_push(state, _heap_entry(state, blocks, i))
    j = state.prev_pop_block
    if j is not None:
        state.prev_pop_block = None
        if state.valid[j]:
            if state.ptr[j] >= state.block_len[j]:
                # refill has not happened yet
                state.prev_pop_block = j
                return _exhausted([j])
            heap_push(state, _heap_entry(state, blocks, j))
        elif not state.fully_done[j]:
            raise CorruptRecord(f"input {j} parked but neither loaded nor finished")

    heap = state.heap
    ptr = state.ptr
    blen = state.block_len
    while heap:
        top = heap[0]
        idx = top[2]
        if not state.valid[idx]:
            raise HeapCorrupt(f"heap references unloaded input {idx}")
        block = blocks[idx]
        p = ptr[idx]
        key, seq, dele, total = _header(block, p, blen[idx], idx)
        if key != top[0] or -seq != top[1]:
            raise HeapCorrupt(f"heap key for input {idx} disagrees with its read pointer")
        if not will_drop(state, key, bool(dele)) and not wb.fits(total):
            return _buffer_full(wb, total)
        _consume(state, wb, block, idx, key, dele, total)
        if ptr[idx] < blen[idx]:
            _heap_replace_top(state, _heap_entry(state, blocks, idx))
        else:
            heap_pop(state)
            state.prev_pop_block = idx
            return _exhausted([idx])
    if state.all_done:
        return ALL_DONE
    raise HeapCorrupt("heap empty while inputs remain")


ENGINES = {Algo.LINEAR: next_linear, Algo.MINHEAP: next_minheap}


def merge_blocks(per_input_blocks, algo: Algo = Algo.LINEAR, threshold: int = DEFAULT_WRITE_BUFFER, drop_tombstones: bool = False) -> bytes:
    """Drive an engine to completion over in-memory block lists.

    ``per_input_blocks[i]`` is a list of ``(block_bytes, used_len)``.  Handy for
    tests and benchmarks that want the merge without any file or crossing model.
    """
    engine = ENGINES[Algo(algo)]
    n = len(per_input_blocks)
    state = MergeState(n, drop_tombstones=drop_tombstones)
    cursors = [0] * n
    blocks = [None] * n

    def refill(i):
        if cursors[i] < len(per_input_blocks[i]):
            data, used = per_input_blocks[i][cursors[i]]
            cursors[i] += 1
            blocks[i] = data
            state.load_block(i, used)
        else:
            blocks[i] = None
            state.mark_done(i)

    for i in range(n):
        refill(i)
    wb = WriteBuffer(threshold)
    out = bytearray()
    while True:
        res = engine(state, blocks, wb)
        if res.step is Step.ALL_DONE:
            break
        if res.step is Step.BUFFER_FULL:
            out += wb.take()
        else:
            for i in sorted(res.exhausted):
                refill(i)
    out += wb.take()
    return bytes(out)

