"""Communication-domain bookkeeping: logical ranks, compaction, rebuild planning.

Rank math is pure; the orchestrator applies the results and charges the timed
rebuild steps to the trace.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import TYPE_CHECKING, Iterable

from .errors import IntegrityError

if TYPE_CHECKING:
    from .cluster import Cluster
    from .latency import LatencyModel


class DomainKind(str, Enum):
    WORLD = "world"
    DP_GROUP = "dp_group"
    EP_GROUP = "ep_group"
    ATTENTION_EXPERT = "attention_expert"
    TRAMPOLINE = "trampoline"


@dataclass(frozen=True)
class RankAssignment:
    """Bijective device-to-rank mapping for one domain, entries ordered by rank."""

    kind: DomainKind
    entries: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        ranks = [rank for _, rank in self.entries]
        devices = [device for device, _ in self.entries]
        if ranks != list(range(len(ranks))):
            raise IntegrityError(f"{self.kind.value} ranks are not contiguous from 0: {ranks}")
        if len(set(devices)) != len(devices):
            raise IntegrityError(f"{self.kind.value} assignment maps a device twice")

    @classmethod
    def from_devices(cls, kind: DomainKind, device_ids: Iterable[int]) -> "RankAssignment":
        return cls(kind=kind, entries=tuple((d, r) for r, d in enumerate(device_ids)))

    @property
    def size(self) -> int:
        return len(self.entries)

    def devices(self) -> tuple[int, ...]:
        return tuple(device for device, _ in self.entries)

    def rank_of(self, device_id: int) -> int:
        for device, rank in self.entries:
            if device == device_id:
                return rank
        raise KeyError(f"device {device_id} is not in the {self.kind.value} domain")

    def __contains__(self, device_id: int) -> bool:
        return any(device == device_id for device, _ in self.entries)

    def to_pairs(self) -> list[list[int]]:
        return [[device, rank] for device, rank in self.entries]


def compact_ranks(assignment: RankAssignment, failed_device: int) -> RankAssignment:
    """Drop the failed device and decrement every rank behind it to close the gap."""
    failed_rank = assignment.rank_of(failed_device)
    entries = tuple(
        (device, rank if rank < failed_rank else rank - 1)
        for device, rank in assignment.entries
        if device != failed_device
    )
    return replace(assignment, entries=entries)


def role_switch_ranks(
    moe: RankAssignment,
    attention: RankAssignment,
    failed_device: int,
    donor_device: int,
) -> tuple[RankAssignment, RankAssignment]:
    """Donor adopts the failed device's MoE rank; its attention rank gap is compacted."""
    if donor_device in moe:
        raise ValueError(f"donor {donor_device} is already in the {moe.kind.value} domain")
    moe.rank_of(failed_device)  # raises if the failed device is not a MoE member
    attention.rank_of(donor_device)  # raises if the donor is not an attention member
    new_moe = replace(
        moe,
        entries=tuple(
            (donor_device if device == failed_device else device, rank)
            for device, rank in moe.entries
        ),
    )
    return new_moe, compact_ranks(attention, donor_device)


@dataclass(frozen=True)
class RebuildStep:
    name: str
    duration: float


@dataclass(frozen=True)
class DomainRebuildPlan:
    """Ordered destroy/recreate steps; the trampoline step exists only when
    attention and MoE live on disjoint devices."""

    steps: tuple[str, ...]

    DESTROY_TRAMPOLINE = "destroy_trampoline"
    DESTROY_ATTENTION_EXPERT = "destroy_attention_expert"
    RECREATE_WITH_ASSIGNMENT = "recreate_with_assignment"

    @classmethod
    def for_disaggregated(cls) -> "DomainRebuildPlan":
        return cls(
            steps=(
                cls.DESTROY_TRAMPOLINE,
                cls.DESTROY_ATTENTION_EXPERT,
                cls.RECREATE_WITH_ASSIGNMENT,
            )
        )

    @classmethod
    def for_collocated(cls) -> "DomainRebuildPlan":
        return cls(steps=(cls.DESTROY_ATTENTION_EXPERT, cls.RECREATE_WITH_ASSIGNMENT))


def rebuild_domains(
    cluster: "Cluster", plan: DomainRebuildPlan, latency: "LatencyModel"
) -> list[RebuildStep]:
    """Assign durations to the rebuild steps.

    Destroy steps split half the collective-domain formation budget; the
    recreate step carries the other half plus the process-group setup time, so
    the step durations always sum to ``xccl + distributed_groups``.
    """
    del cluster  # membership is already folded into the assignments
    destroy_steps = [s for s in plan.steps if s != DomainRebuildPlan.RECREATE_WITH_ASSIGNMENT]
    destroy_share = 0.5 * latency.xccl / len(destroy_steps) if destroy_steps else 0.0
    timed: list[RebuildStep] = []
    for step in plan.steps:
        if step == DomainRebuildPlan.RECREATE_WITH_ASSIGNMENT:
            timed.append(RebuildStep(step, 0.5 * latency.xccl + latency.distributed_groups))
        else:
            timed.append(RebuildStep(step, destroy_share))
    return timed


@dataclass
class DomainSet:
    """The cluster's communication domains. The world group is never reassigned."""

    world: RankAssignment
    dp: RankAssignment
    ep: RankAssignment
    attention_expert: RankAssignment
    trampoline: RankAssignment | None

    @classmethod
    def from_cluster(cls, cluster: "Cluster") -> "DomainSet":
        from .cluster import DeploymentMode

        disaggregated = cluster.config.mode is DeploymentMode.MA_DISAGGREGATED
        attention_expert_members = sorted(set(cluster.dp_members) | set(cluster.ep_members))
        return cls(
            world=RankAssignment.from_devices(DomainKind.WORLD, sorted(cluster.devices)),
            dp=RankAssignment.from_devices(DomainKind.DP_GROUP, cluster.dp_members),
            ep=RankAssignment.from_devices(DomainKind.EP_GROUP, cluster.ep_members),
            attention_expert=RankAssignment.from_devices(
                DomainKind.ATTENTION_EXPERT, attention_expert_members
            ),
            trampoline=(
                RankAssignment.from_devices(DomainKind.TRAMPOLINE, cluster.ep_members)
                if disaggregated
                else None
            ),
        )

    def remove_device(self, device_id: int) -> None:
        """Compact every domain containing the device, leaving the world group intact."""
        if device_id in self.dp:
            self.dp = compact_ranks(self.dp, device_id)
        if device_id in self.ep:
            self.ep = compact_ranks(self.ep, device_id)
        if device_id in self.attention_expert:
            self.attention_expert = compact_ranks(self.attention_expert, device_id)
        if self.trampoline is not None and device_id in self.trampoline:
            self.trampoline = compact_ranks(self.trampoline, device_id)

    def apply_role_switch(self, failed_device: int, donor_device: int) -> int:
        """Swap the donor into the failed device's expert-side ranks; returns the adopted rank."""
        self.ep, self.dp = role_switch_ranks(self.ep, self.dp, failed_device, donor_device)
        if self.trampoline is not None:
            self.trampoline = replace(
                self.trampoline,
                entries=tuple(
                    (donor_device if device == failed_device else device, rank)
                    for device, rank in self.trampoline.entries
                ),
            )
        if failed_device in self.attention_expert:
            self.attention_expert = compact_ranks(self.attention_expert, failed_device)
        return self.ep.rank_of(donor_device)

    def describe(self) -> dict:
        result = {
            "world": self.world.to_pairs(),
            "dp_group": self.dp.to_pairs(),
            "ep_group": self.ep.to_pairs(),
            "attention_expert": self.attention_expert.to_pairs(),
        }
        if self.trampoline is not None:
            result["trampoline"] = self.trampoline.to_pairs()
        return result
