"""Per-compaction block plan with one read cursor per input."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import EmptyInputSet, TooManyInputs
from .sstable import IndexEntry, SSTableMeta

DEFAULT_MAX_INPUTS = 64


@dataclass
class MapInput:
    file_id: str
    block_size: int
    descriptors: tuple[IndexEntry, ...]
    cursor: int = 0

    @property
    def delivered_count(self) -> int:
        return self.cursor

    @property
    def remaining(self) -> int:
        return len(self.descriptors) - self.cursor


class SSTMap:
    """The fixed IO plan for one compaction job.

    Descriptors never change after construction; only the cursors advance,
    so every block is handed out once and in ascending order per input.
    """

    def __init__(self, inputs: list[MapInput]):
        self.inputs = inputs

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def total_descriptors(self) -> int:
        return sum(len(i.descriptors) for i in self.inputs)

    def cursors(self) -> tuple[int, ...]:
        return tuple(i.cursor for i in self.inputs)

    def next_block_descriptor(self, ordinal: int) -> IndexEntry | None:
        if not 0 <= ordinal < len(self.inputs):
            raise IndexError(f"input ordinal {ordinal} outside [0, {len(self.inputs)})")
        inp = self.inputs[ordinal]
        if inp.cursor >= len(inp.descriptors):
            return None
        d = inp.descriptors[inp.cursor]
        inp.cursor += 1
        return d

    def exhausted(self, ordinal: int) -> bool:
        return self.inputs[ordinal].remaining == 0

    def to_json(self) -> dict:
        return {
            "inputs": [
                {
                    "file_id": inp.file_id,
                    "block_size": inp.block_size,
                    "cursor": inp.cursor,
                    "blocks": [
                        {"index": d.block_index, "offset": d.offset, "size": d.used_len}
                        for d in inp.descriptors
                    ],
                }
                for inp in self.inputs
            ]
        }


def build_sstmap(inputs: list[SSTableMeta], max_inputs: int = DEFAULT_MAX_INPUTS) -> SSTMap:
    if not inputs:
        raise EmptyInputSet("compaction needs at least one input table")
    if len(inputs) > max_inputs:
        raise TooManyInputs(f"{len(inputs)} inputs exceed the limit of {max_inputs}")
    return SSTMap(
        [
            MapInput(m.file_id, m.block_size, tuple(sorted(m.index, key=lambda e: e.block_index)))
            for m in inputs
        ]
    )
