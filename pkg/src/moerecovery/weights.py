"""Weight-integrity recovery: the MoE failure decision procedure and its three
actions (redundant-expert remap, role switch, missing-expert mask), plus dense
FFN group rebalancing."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

from .cluster import (
    Cluster,
    DeploymentMode,
    GroupStatus,
    Health,
    Role,
    experts_on_device,
    remove_device_replicas,
    sole_replica_experts,
)
from .domains import DomainSet
from .errors import IntegrityError, UnrecoverableError
from .latency import LatencyModel
from .routing import ExpertMask


class PlanVariant(str, Enum):
    REDUNDANT_EXPERT_REMAP = "redundant_expert_remap"
    ROLE_SWITCH = "role_switch"
    MISSING_EXPERT_MASK = "missing_expert_mask"


@dataclass(frozen=True)
class RecoveryPlan:
    variant: PlanVariant
    donor: int | None = None
    masked_experts: ExpertMask = frozenset()
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class RecoveryPolicy:
    allow_role_switch: bool = True
    allow_missing_experts: bool = True
    background_switch: bool = False
    # Masking more than this fraction of experts is flagged as a likely
    # accuracy degradation; losses at or below it measured as negligible.
    mask_warning_fraction: float = 1.0 / 32.0

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "RecoveryPolicy":
        known = {
            "allow_role_switch",
            "allow_missing_experts",
            "background_switch",
            "mask_warning_fraction",
        }
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown policy keys: {sorted(unknown)}")
        kwargs: dict = {}
        for key in ("allow_role_switch", "allow_missing_experts", "background_switch"):
            if key in data:
                kwargs[key] = bool(data[key])
        if "mask_warning_fraction" in data:
            kwargs["mask_warning_fraction"] = float(data["mask_warning_fraction"])  # type: ignore[arg-type]
        return cls(**kwargs)


class RoleSwitchPhase(Enum):
    MIGRATING_REQUESTS = 1
    DROPPING_ATTENTION_STATE = 2
    LOADING_MOE_WEIGHTS = 3
    REJOINING_DOMAIN = 4
    DONE = 5


@dataclass
class RoleSwitchState:
    """Phase machine for converting a DP executor into a MoE executor."""

    donor: int
    phase: RoleSwitchPhase = RoleSwitchPhase.MIGRATING_REQUESTS
    adopted_rank: int | None = None
    history: list[RoleSwitchPhase] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.history.append(self.phase)

    def advance(self) -> RoleSwitchPhase:
        if self.phase is RoleSwitchPhase.DONE:
            raise IntegrityError("role switch already completed")
        self.phase = RoleSwitchPhase(self.phase.value + 1)
        self.history.append(self.phase)
        return self.phase


class RoleSwitchFailed(RuntimeError):
    """Donor became unusable mid-switch; caller falls back to expert masking."""


def select_donor(
    cluster: Cluster, donor_loads: Mapping[int, int] | None = None
) -> int | None:
    """Healthy attention executor with the fewest active sequences, lowest id on ties."""
    candidates = cluster.healthy_attention_devices()
    if not candidates:
        return None
    loads = donor_loads or {}
    return min(candidates, key=lambda d: (loads.get(d, 0), d))


def decide_moe_recovery(
    cluster: Cluster,
    failed_device: int,
    policy: RecoveryPolicy,
    donor_loads: Mapping[int, int] | None = None,
) -> RecoveryPlan:
    """Pick the recovery action for a failure that involves MoE weights.

    Fully replicated experts need only a mapping update. Otherwise a healthy
    attention executor can be converted to replace the lost MoE rank
    (disaggregated layouts only, and only while at least one DP replica would
    remain), or the lost experts are masked out of routing.
    """
    hosted = experts_on_device(cluster, failed_device)
    if not hosted:
        raise ValueError(
            f"device {failed_device} hosts no experts; attention failures do not reach this decision"
        )
    sole = sole_replica_experts(cluster, failed_device)
    if not sole:
        return RecoveryPlan(variant=PlanVariant.REDUNDANT_EXPERT_REMAP)

    can_switch = (
        policy.allow_role_switch
        and cluster.config.mode is DeploymentMode.MA_DISAGGREGATED
        and len(cluster.healthy_attention_devices()) >= 2
    )
    if can_switch:
        donor = select_donor(cluster, donor_loads)
        assert donor is not None
        return RecoveryPlan(variant=PlanVariant.ROLE_SWITCH, donor=donor)

    if policy.allow_missing_experts:
        warnings: tuple[str, ...] = ()
        fraction = len(sole) / cluster.config.num_experts
        if fraction > policy.mask_warning_fraction:
            warnings = (
                f"masking {len(sole)}/{cluster.config.num_experts} experts "
                f"({fraction:.3f} > {policy.mask_warning_fraction:.3f}); "
                "accuracy degradation likely",
            )
        return RecoveryPlan(
            variant=PlanVariant.MISSING_EXPERT_MASK,
            masked_experts=frozenset(sole),
            warnings=warnings,
        )
    raise UnrecoverableError(
        f"experts {sorted(sole)} lost their last replica and policy permits "
        "neither role switch nor missing experts"
    )


def apply_redundant_remap(cluster: Cluster, failed_device: int) -> None:
    """Drop the failed device from the logical-to-physical expert mapping."""
    remove_device_replicas(cluster, failed_device)
    orphaned = [
        e
        for e, hosts in cluster.placement.items()
        if not any(cluster.devices[d].health is Health.HEALTHY for d in hosts)
    ]
    if orphaned:
        raise IntegrityError(
            f"redundant remap left experts without a healthy replica: {sorted(orphaned)}"
        )
    if failed_device in cluster.ep_members:
        cluster.ep_members.remove(failed_device)


def apply_missing_expert_mask(
    cluster: Cluster, plan: RecoveryPlan, failed_device: int
) -> ExpertMask:
    """Remove the failed device's replicas from placement and hand back the routing mask."""
    if plan.variant is not PlanVariant.MISSING_EXPERT_MASK:
        raise ValueError("plan is not a missing-expert mask")
    materialized = cluster.materialized_experts()
    expected = frozenset(
        e for e in range(cluster.config.num_experts) if e not in materialized
    )
    if expected != plan.masked_experts:
        raise IntegrityError(
            f"mask {sorted(plan.masked_experts)} is not minimal; "
            f"experts without healthy replicas are {sorted(expected)}"
        )
    remove_device_replicas(cluster, failed_device)
    if failed_device in cluster.ep_members:
        cluster.ep_members.remove(failed_device)
    return plan.masked_experts


@dataclass
class RoleSwitchOutcome:
    state: RoleSwitchState
    timed_phases: list[tuple[str, float, str]]  # (category, duration, detail)
    migrated: dict[int, int]  # seq id -> target executor


def apply_role_switch(
    cluster: Cluster,
    domains: DomainSet,
    donor: int,
    failed_device: int,
    latency: LatencyModel,
    executors: Mapping[int, object] | None = None,
) -> RoleSwitchOutcome:
    """Convert the donor DP executor into the replacement MoE executor.

    Walks the switch phases in order: migrate the donor's requests, drop its
    KV cache, scheduler, and attention weights, reload the lost MoE weights
    from disk, and adopt the failed device's logical rank.
    """
    from .sequences import AttentionExecutor, plan_migration

    donor_device = cluster.device(donor)
    if donor_device.health is not Health.HEALTHY:
        raise RoleSwitchFailed(f"donor {donor} is not healthy")
    if donor_device.role not in (Role.ATTENTION,):
        raise ValueError(f"donor {donor} is not an attention executor")

    state = RoleSwitchState(donor=donor)

    migrated: dict[int, int] = {}
    if executors is not None and donor in executors:
        donor_executor = executors[donor]
        assert isinstance(donor_executor, AttentionExecutor)
        pending = [
            s.seq_id for s in donor_executor.sequences.values() if not s.is_finished()
        ]
        survivors = {
            d: executors[d].active_count()  # type: ignore[attr-defined]
            for d in cluster.healthy_attention_devices()
            if d != donor and d in executors
        }
        if pending:
            assignment = plan_migration(pending, survivors)
            for seq_id, target in assignment.targets.items():
                seq = donor_executor.evict(seq_id)
                executors[target].adopt_migrated(seq)  # type: ignore[attr-defined]
                migrated[seq_id] = target
    state.advance()  # DROPPING_ATTENTION_STATE: KV cache, scheduler, attention weights

    donor_device.role = Role.MOE
    donor_device.converted = True
    if donor in cluster.dp_members:
        cluster.dp_members.remove(donor)
    state.advance()  # LOADING_MOE_WEIGHTS

    for expert, hosts in cluster.placement.items():
        cluster.placement[expert] = [donor if d == failed_device else d for d in hosts]
    cluster.ep_members[:] = [donor if d == failed_device else d for d in cluster.ep_members]
    for group in cluster.dense_groups:
        if failed_device in group.members:
            group.members = tuple(donor if d == failed_device else d for d in group.members)
            group.status = GroupStatus.HEALTHY
    state.advance()  # REJOINING_DOMAIN

    state.adopted_rank = domains.apply_role_switch(failed_device, donor)
    state.advance()  # DONE

    timed = [
        (
            "role_switch",
            latency.role_switch,
            "migrate donor requests; drop KV cache, scheduler, attention weights",
        ),
        ("generator", latency.generator_weight_load, "weight_load"),
    ]
    return RoleSwitchOutcome(state=state, timed_phases=timed, migrated=migrated)


def mark_compromised_groups(cluster: Cluster, failed_device: int) -> list[int]:
    """Flag dense FFN groups whose shard on the failed device was not restored."""
    compromised: list[int] = []
    for group in cluster.dense_groups:
        if failed_device in group.members and group.status is GroupStatus.HEALTHY:
            group.status = GroupStatus.COMPROMISED
            group.weight = 0.0
            compromised.append(group.group_id)
    return compromised


def rebalance_dense_ffn(cluster: Cluster) -> list[float]:
    """Spread routing weight evenly over the healthy dense FFN groups."""
    healthy = cluster.healthy_dense_groups()
    if cluster.dense_groups and not healthy:
        raise UnrecoverableError("no healthy dense FFN group remains")
    share = 1.0 / len(healthy) if healthy else 0.0
    for group in cluster.dense_groups:
        group.weight = share if group.status is GroupStatus.HEALTHY else 0.0
    return [g.weight for g in cluster.dense_groups]
