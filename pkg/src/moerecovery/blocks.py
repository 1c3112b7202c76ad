"""Paged KV block allocator with reference counting and a per-step undo log.

Every block operation inside a generation step is appended to the log; undoing
the log in reverse order restores the table to its exact start-of-step state,
the same way undo logs roll back uncommitted transactions in a database.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum

from .errors import IntegrityError, OutOfBlocksError


class OpKind(str, Enum):
    ALLOCATE = "allocate"
    INC_REF = "inc_ref"
    DEC_REF = "dec_ref"
    APPEND_SLOT = "append_slot"
    FREE = "free"


@dataclass(frozen=True)
class LogEntry:
    kind: OpKind
    block_id: int
    seq_id: int | None = None
    index: int | None = None  # list position a DEC_REF removed from
    prior_slots: int | None = None  # slots_used captured at FREE time


@dataclass
class Block:
    block_id: int
    ref_count: int = 0
    slots_used: int = 0


Snapshot = tuple


class BlockTable:
    """Per-executor block table: seq id -> ordered block list, plus the free pool.

    The free pool is FIFO (allocate from the left, free to the right) so the
    reverse-order undo of allocate/free pairs restores the pool byte for byte.
    """

    def __init__(self, num_blocks: int, block_size: int = 128):
        if num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if block_size < 1:
            raise ValueError("block_size must be >= 1")
        self.block_size = block_size
        self._blocks: dict[int, Block] = {i: Block(i) for i in range(num_blocks)}
        self._free: deque[int] = deque(range(num_blocks))
        self._tables: dict[int, list[int]] = {}
        self._log: list[LogEntry] = []

    # -- step lifecycle -----------------------------------------------------

    def begin_step(self) -> None:
        """Clear the log; everything logged before this point is durable."""
        self._log.clear()

    def undo_step_log(self) -> None:
        """Undo all logged operations in reverse order, back to the step start."""
        while self._log:
            entry = self._log.pop()
            block = self._blocks.get(entry.block_id)
            if block is None:
                raise IntegrityError(f"undo references unknown block {entry.block_id}")
            if entry.kind is OpKind.ALLOCATE:
                self._unlink_last(entry.seq_id, entry.block_id)
                block.ref_count -= 1
                if block.ref_count != 0:
                    raise IntegrityError(
                        f"undo of allocate left block {block.block_id} with ref {block.ref_count}"
                    )
                if block.slots_used != 0:
                    raise IntegrityError(
                        f"undo of allocate found {block.slots_used} slots still on block {block.block_id}"
                    )
                self._free.appendleft(block.block_id)
            elif entry.kind is OpKind.INC_REF:
                self._unlink_last(entry.seq_id, entry.block_id)
                block.ref_count -= 1
                if block.ref_count < 1:
                    raise IntegrityError(f"undo of inc_ref drained block {block.block_id}")
            elif entry.kind is OpKind.DEC_REF:
                assert entry.seq_id is not None and entry.index is not None
                self._tables.setdefault(entry.seq_id, []).insert(entry.index, entry.block_id)
                block.ref_count += 1
            elif entry.kind is OpKind.APPEND_SLOT:
                block.slots_used -= 1
                if block.slots_used < 0:
                    raise IntegrityError(f"undo of append_slot underflowed block {block.block_id}")
            elif entry.kind is OpKind.FREE:
                if not self._free or self._free[-1] != entry.block_id:
                    raise IntegrityError(
                        f"undo of free expected block {entry.block_id} at the pool tail"
                    )
                self._free.pop()
                assert entry.prior_slots is not None
                block.slots_used = entry.prior_slots

    def _unlink_last(self, seq_id: int | None, block_id: int) -> None:
        assert seq_id is not None
        table = self._tables.get(seq_id)
        if not table or table[-1] != block_id:
            raise IntegrityError(
                f"undo expected block {block_id} at the tail of sequence {seq_id}"
            )
        table.pop()
        if not table:
            del self._tables[seq_id]

    # -- logged operations ----------------------------------------------------

    def allocate_block(self, seq_id: int) -> int:
        if not self._free:
            raise OutOfBlocksError("block pool exhausted")
        block_id = self._free.popleft()
        block = self._blocks[block_id]
        block.ref_count = 1
        self._tables.setdefault(seq_id, []).append(block_id)
        self._log.append(LogEntry(OpKind.ALLOCATE, block_id, seq_id=seq_id))
        return block_id

    def share_block(self, seq_id: int, block_id: int) -> None:
        block = self._require_live(block_id)
        block.ref_count += 1
        self._tables.setdefault(seq_id, []).append(block_id)
        self._log.append(LogEntry(OpKind.INC_REF, block_id, seq_id=seq_id))

    def release_block(self, seq_id: int, block_id: int) -> None:
        table = self._tables.get(seq_id)
        if table is None or block_id not in table:
            raise ValueError(f"sequence {seq_id} does not reference block {block_id}")
        index = table.index(block_id)
        table.pop(index)
        if not table:
            del self._tables[seq_id]
        block = self._blocks[block_id]
        block.ref_count -= 1
        self._log.append(LogEntry(OpKind.DEC_REF, block_id, seq_id=seq_id, index=index))
        if block.ref_count == 0:
            self._log.append(LogEntry(OpKind.FREE, block_id, prior_slots=block.slots_used))
            block.slots_used = 0
            self._free.append(block_id)

    def release_sequence(self, seq_id: int) -> None:
        for block_id in list(self._tables.get(seq_id, [])):
            self.release_block(seq_id, block_id)

    def append_slot(self, seq_id: int) -> None:
        table = self._tables.get(seq_id)
        if not table:
            raise ValueError(f"sequence {seq_id} owns no blocks")
        block = self._blocks[table[-1]]
        if block.slots_used >= self.block_size:
            raise ValueError(f"block {block.block_id} is full")
        block.slots_used += 1
        self._log.append(LogEntry(OpKind.APPEND_SLOT, block.block_id))

    def append_token(self, seq_id: int) -> None:
        """Scheduler-facing helper: allocate a fresh block when the tail is full."""
        table = self._tables.get(seq_id)
        if not table or self._blocks[table[-1]].slots_used >= self.block_size:
            self.allocate_block(seq_id)
        self.append_slot(seq_id)

    def _require_live(self, block_id: int) -> Block:
        block = self._blocks.get(block_id)
        if block is None:
            raise ValueError(f"unknown block {block_id}")
        if block.ref_count < 1:
            raise ValueError(f"block {block_id} is not live")
        return block

    # -- inspection ----------------------------------------------------------

    def block(self, block_id: int) -> Block:
        return self._blocks[block_id]

    def blocks_of(self, seq_id: int) -> list[int]:
        return list(self._tables.get(seq_id, []))

    def free_count(self) -> int:
        return len(self._free)

    def log_length(self) -> int:
        return len(self._log)

    def dump_log(self) -> list[dict]:
        return [
            {"kind": e.kind.value, "block": e.block_id, "seq": e.seq_id}
            for e in self._log
        ]

    def snapshot(self) -> Snapshot:
        """Full structural state; two snapshots compare equal iff the tables match exactly."""
        return (
            tuple((b.block_id, b.ref_count, b.slots_used) for b in self._blocks.values()),
            tuple(sorted((seq, tuple(table)) for seq, table in self._tables.items())),
            tuple(self._free),
        )

    def check_invariants(self) -> None:
        """Free-pool disjointness and reference-count conservation."""
        free = set(self._free)
        if len(free) != len(self._free):
            raise IntegrityError("free pool contains duplicates")
        referenced = 0
        for seq, table in self._tables.items():
            if not table:
                raise IntegrityError(f"sequence {seq} has an empty block list")
            for block_id in table:
                if block_id in free:
                    raise IntegrityError(f"block {block_id} is both free and referenced")
            referenced += len(table)
        total_refs = sum(b.ref_count for b in self._blocks.values())
        if total_refs != referenced:
            raise IntegrityError(
                f"ref-count sum {total_refs} != table references {referenced}"
            )
        for block in self._blocks.values():
            in_pool = block.block_id in free
            if (block.ref_count == 0) != in_pool:
                raise IntegrityError(
                    f"block {block.block_id} ref {block.ref_count} vs pool membership {in_pool}"
                )
