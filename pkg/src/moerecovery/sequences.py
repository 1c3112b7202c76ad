"""Per-executor request state, step-level revert, and sequence migration."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from .blocks import BlockTable
from .errors import UnrecoverableError


class SequencePhase(str, Enum):
    WAITING_PREFILL = "waiting_prefill"
    DECODING = "decoding"
    MIGRATED_PENDING_PREFILL = "migrated_pending_prefill"
    FINISHED = "finished"


@dataclass
class Sequence:
    seq_id: int
    prompt_tokens: list[int]
    decoded_tokens: list[int] = field(default_factory=list)
    phase: SequencePhase = SequencePhase.WAITING_PREFILL
    home_executor_id: int | None = None
    decode_target: int = 0

    @property
    def position(self) -> int:
        """Next generation position: prompt length plus completed decode steps."""
        return len(self.prompt_tokens) + len(self.decoded_tokens)

    def is_finished(self) -> bool:
        return self.phase is SequencePhase.FINISHED


def synthetic_token(seq_id: int, decode_index: int) -> int:
    """Deterministic stand-in for sampling; independent of which executor decodes."""
    return (seq_id * 7919 + decode_index * 104729 + 11) % 50257


def prompt_token(seq_id: int, index: int) -> int:
    return (seq_id * 131 + index * 31 + 7) % 50257


def build_recovery_prompt(seq: Sequence) -> list[int]:
    """Concatenate prompt and decoded tokens into the prompt replayed after migration.

    Decoded tokens stay on the sequence so generation resumes at the position
    the failed executor had reached; only the KV cache is recomputed.
    """
    if seq.phase is SequencePhase.FINISHED:
        raise ValueError(f"sequence {seq.seq_id} is finished and cannot be migrated")
    return list(seq.prompt_tokens) + list(seq.decoded_tokens)


@dataclass(frozen=True)
class MigrationAssignment:
    targets: dict[int, int]  # seq id -> executor id

    def per_target_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for target in self.targets.values():
            counts[target] = counts.get(target, 0) + 1
        return counts


def plan_migration(
    seq_ids: Iterable[int], survivor_loads: Mapping[int, int]
) -> MigrationAssignment:
    """Greedy least-loaded assignment of orphaned sequences to surviving executors.

    Ties break toward the lowest executor id; sequences are placed in ascending
    seq-id order so the plan is deterministic.
    """
    if not survivor_loads:
        raise UnrecoverableError("no surviving attention executors to migrate onto")
    loads = dict(survivor_loads)
    targets: dict[int, int] = {}
    for seq_id in sorted(seq_ids):
        executor = min(loads, key=lambda e: (loads[e], e))
        targets[seq_id] = executor
        loads[executor] += 1
    return MigrationAssignment(targets=targets)


@dataclass
class AttentionExecutor:
    """Scheduler-side state of one DP executor: its sequences and block table."""

    executor_id: int
    block_table: BlockTable
    sequences: dict[int, Sequence] = field(default_factory=dict)
    queue: list[int] = field(default_factory=list)
    in_step: bool = False
    _step_lengths: dict[int, int] = field(default_factory=dict)
    _step_finished: list[int] = field(default_factory=list)

    def active_count(self) -> int:
        return sum(1 for s in self.sequences.values() if not s.is_finished())

    def admit(self, seq: Sequence) -> None:
        seq.home_executor_id = self.executor_id
        self.sequences[seq.seq_id] = seq
        self.queue.append(seq.seq_id)

    def adopt_migrated(self, seq: Sequence) -> None:
        """Enqueue a migrated sequence at the scheduler tail."""
        seq.phase = SequencePhase.MIGRATED_PENDING_PREFILL
        self.admit(seq)

    def evict(self, seq_id: int) -> Sequence:
        self.queue.remove(seq_id)
        return self.sequences.pop(seq_id)

    def has_work(self) -> bool:
        return any(not self.sequences[s].is_finished() for s in self.queue)

    def start_step(self, max_sequences: int | None = None) -> None:
        """Run one generation step over the queue, logging block traffic as it goes.

        ``max_sequences`` truncates the step mid-flight; used to exercise
        recovery from arbitrary interruption points.
        """
        self.block_table.begin_step()
        self.in_step = True
        self._step_lengths = {
            s.seq_id: len(s.decoded_tokens) for s in self.sequences.values()
        }
        self._step_finished = []
        processed = 0
        for seq_id in list(self.queue):
            if max_sequences is not None and processed >= max_sequences:
                break
            seq = self.sequences[seq_id]
            if seq.phase is SequencePhase.FINISHED:
                continue
            processed += 1
            if seq.phase in (SequencePhase.WAITING_PREFILL, SequencePhase.MIGRATED_PENDING_PREFILL):
                # Prefill covers every token known so far (for migrated
                # sequences that is the concatenated recovery prompt).
                for _ in range(len(build_recovery_prompt(seq))):
                    self.block_table.append_token(seq.seq_id)
                seq.phase = SequencePhase.DECODING
                continue
            self.block_table.append_token(seq.seq_id)
            seq.decoded_tokens.append(synthetic_token(seq.seq_id, len(seq.decoded_tokens)))
            if len(seq.decoded_tokens) >= seq.decode_target:
                self._step_finished.append(seq.seq_id)

    def commit_step(self) -> list[int]:
        """Make the in-flight step durable; finished sequences release their blocks."""
        finished = list(self._step_finished)
        for seq_id in finished:
            self.sequences[seq_id].phase = SequencePhase.FINISHED
            self.block_table.release_sequence(seq_id)
        self.in_step = False
        self._step_finished = []
        return finished

    def revert_in_flight_step(self) -> None:
        """Discard tokens sampled in the interrupted step and undo its block log.

        No-op when no step is in flight, so the global stop signal can be
        delivered to every executor unconditionally.
        """
        if not self.in_step:
            return
        for seq in self.sequences.values():
            start_len = self._step_lengths.get(seq.seq_id)
            if start_len is not None and len(seq.decoded_tokens) > start_len:
                del seq.decoded_tokens[start_len:]
        self.block_table.undo_step_log()
        self._step_finished = []
        self.in_step = False
