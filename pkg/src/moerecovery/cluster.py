"""Cluster topology model: devices, executor roles, parallel membership, expert placement.

All state here is mutated only by the recovery orchestrator; everything else
treats a cluster as a read-only snapshot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

from .errors import ConfigError, IntegrityError


class DeploymentMode(str, Enum):
    MA_COLLOCATED = "ma_collocated"
    MA_DISAGGREGATED = "ma_disaggregated"


class Role(str, Enum):
    ATTENTION = "attention"
    MOE = "moe"
    COLLOCATED = "collocated"


class Health(str, Enum):
    HEALTHY = "healthy"
    FAILED = "failed"
    ISOLATED = "isolated"


class GroupStatus(str, Enum):
    HEALTHY = "healthy"
    COMPROMISED = "compromised"


@dataclass(frozen=True)
class DeploymentConfig:
    """Static deployment description.

    ``redundant_replicas`` maps expert id to its replica count; experts absent
    from the mapping default to a single replica.
    """

    mode: DeploymentMode
    num_devices: int
    dp_size: int
    ep_size: int
    num_experts: int
    top_k: int
    attention_tp: int = 1
    dense_ffn_tp: int = 4
    num_dense_ffn_groups: int = 0
    redundant_replicas: Mapping[int, int] = field(default_factory=dict)

    def replica_count(self, expert_id: int) -> int:
        return int(self.redundant_replicas.get(expert_id, 1))

    def validate(self) -> None:
        if self.attention_tp != 1:
            raise ConfigError(f"attention_tp must be 1, got {self.attention_tp}")
        if self.num_devices < 1:
            raise ConfigError("num_devices must be >= 1")
        if self.dp_size < 1:
            raise ConfigError("dp_size must be >= 1")
        if self.ep_size < 1:
            raise ConfigError("ep_size must be >= 1")
        if self.mode is DeploymentMode.MA_DISAGGREGATED:
            if self.dp_size + self.ep_size > self.num_devices:
                raise ConfigError(
                    f"disaggregated layout needs dp_size + ep_size <= num_devices "
                    f"({self.dp_size} + {self.ep_size} > {self.num_devices})"
                )
        else:
            if self.dp_size > self.num_devices:
                raise ConfigError(
                    f"collocated layout needs dp_size <= num_devices "
                    f"({self.dp_size} > {self.num_devices})"
                )
            if self.ep_size > self.num_devices:
                raise ConfigError(
                    f"collocated layout needs ep_size <= num_devices "
                    f"({self.ep_size} > {self.num_devices})"
                )
        if self.num_experts < 1:
            raise ConfigError("num_experts must be >= 1")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k must be in [1, {self.num_experts}], got {self.top_k}")
        for expert_id, count in self.redundant_replicas.items():
            if not 0 <= int(expert_id) < self.num_experts:
                raise ConfigError(f"replica entry names unknown expert {expert_id}")
            if int(count) < 1:
                raise ConfigError(f"expert {expert_id} must have replica count >= 1, got {count}")
            if int(count) > self.ep_size:
                raise ConfigError(
                    f"expert {expert_id} asks for {count} replicas on distinct devices "
                    f"but only {self.ep_size} expert-capable devices exist"
                )
        if self.num_dense_ffn_groups > 0:
            needed = self.num_dense_ffn_groups * self.dense_ffn_tp
            if needed > self.ep_size:
                raise ConfigError(
                    f"{self.num_dense_ffn_groups} dense FFN groups of TP {self.dense_ffn_tp} "
                    f"need {needed} devices but only {self.ep_size} host FFN shards"
                )

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "DeploymentConfig":
        try:
            mode = DeploymentMode(str(data["mode"]).strip().lower())
        except KeyError:
            raise ConfigError("deployment.mode must be specified") from None
        except ValueError:
            raise ConfigError(
                f"deployment.mode must be 'ma_collocated' or 'ma_disaggregated', got {data['mode']!r}"
            ) from None

        def _int(key: str, default: int | None = None) -> int:
            if key not in data:
                if default is None:
                    raise ConfigError(f"deployment.{key} must be specified")
                return default
            try:
                return int(data[key])  # type: ignore[arg-type]
            except (TypeError, ValueError):
                raise ConfigError(f"deployment.{key} must be an integer, got {data[key]!r}") from None

        replicas_raw = data.get("redundant_replicas", {})
        replicas: dict[int, int] = {}
        num_experts = _int("num_experts")
        if isinstance(replicas_raw, int):
            # Shorthand: a bare integer replicates every expert that many times.
            replicas = {e: replicas_raw for e in range(num_experts)}
        elif isinstance(replicas_raw, Mapping):
            for key, value in replicas_raw.items():
                try:
                    replicas[int(key)] = int(value)
                except (TypeError, ValueError):
                    raise ConfigError(
                        f"deployment.redundant_replicas entries must be integer pairs, got {key!r}: {value!r}"
                    ) from None
        else:
            raise ConfigError("deployment.redundant_replicas must be a mapping or an integer")

        config = cls(
            mode=mode,
            num_devices=_int("num_devices"),
            dp_size=_int("dp_size"),
            ep_size=_int("ep_size"),
            num_experts=num_experts,
            top_k=_int("top_k"),
            attention_tp=_int("attention_tp", 1),
            dense_ffn_tp=_int("dense_ffn_tp", 4),
            num_dense_ffn_groups=_int("num_dense_ffn_groups", 0),
            redundant_replicas=replicas,
        )
        config.validate()
        return config


@dataclass
class Device:
    device_id: int
    role: Role
    health: Health = Health.HEALTHY
    converted: bool = False  # True once a role switch turned this attention device into MoE


@dataclass
class DenseFfnGroup:
    group_id: int
    members: tuple[int, ...]
    status: GroupStatus = GroupStatus.HEALTHY
    weight: float = 0.0


@dataclass
class Cluster:
    """Live cluster state: device table, expert placement, parallel membership."""

    config: DeploymentConfig
    devices: dict[int, Device]
    placement: dict[int, list[int]]
    dense_groups: list[DenseFfnGroup]
    dp_members: list[int]
    ep_members: list[int]

    def device(self, device_id: int) -> Device:
        try:
            return self.devices[device_id]
        except KeyError:
            raise KeyError(f"unknown device {device_id}") from None

    def healthy_attention_devices(self) -> list[int]:
        return [d for d in self.dp_members if self.devices[d].health is Health.HEALTHY]

    def healthy_expert_devices(self) -> list[int]:
        return [d for d in self.ep_members if self.devices[d].health is Health.HEALTHY]

    def materialized_experts(self) -> set[int]:
        """Experts with at least one replica on a healthy device."""
        return {
            expert
            for expert, hosts in self.placement.items()
            if any(self.devices[d].health is Health.HEALTHY for d in hosts)
        }

    def healthy_dense_groups(self) -> list[DenseFfnGroup]:
        return [g for g in self.dense_groups if g.status is GroupStatus.HEALTHY]

    def describe(self) -> dict:
        """Structured topology dump used by golden tests and ``inspect``."""
        return {
            "mode": self.config.mode.value,
            "devices": [
                {
                    "device_id": d.device_id,
                    "role": d.role.value,
                    "health": d.health.value,
                    "converted": d.converted,
                }
                for d in sorted(self.devices.values(), key=lambda d: d.device_id)
            ],
            "dp_members": list(self.dp_members),
            "ep_members": list(self.ep_members),
            "placement": {str(e): list(hosts) for e, hosts in sorted(self.placement.items())},
            "dense_groups": [
                {
                    "group_id": g.group_id,
                    "members": list(g.members),
                    "status": g.status.value,
                    "weight": g.weight,
                }
                for g in self.dense_groups
            ],
        }


def build_cluster(config: DeploymentConfig) -> Cluster:
    """Instantiate devices, roles, round-robin expert placement, and dense FFN groups."""
    config.validate()

    devices: dict[int, Device] = {}
    if config.mode is DeploymentMode.MA_DISAGGREGATED:
        for i in range(config.num_devices):
            role = Role.ATTENTION if i < config.dp_size else Role.MOE
            devices[i] = Device(device_id=i, role=role)
        dp_members = list(range(config.dp_size))
        ep_members = list(range(config.dp_size, config.dp_size + config.ep_size))
    else:
        for i in range(config.num_devices):
            devices[i] = Device(device_id=i, role=Role.COLLOCATED)
        dp_members = list(range(config.dp_size))
        ep_members = list(range(config.ep_size))

    # Round-robin by expert id; the j-th replica lands j slots further along so
    # replicas of one expert always sit on distinct devices.
    placement: dict[int, list[int]] = {}
    for expert in range(config.num_experts):
        count = config.replica_count(expert)
        home = expert % config.ep_size
        placement[expert] = [ep_members[(home + j) % config.ep_size] for j in range(count)]

    dense_groups: list[DenseFfnGroup] = []
    if config.num_dense_ffn_groups > 0:
        initial = 1.0 / config.num_dense_ffn_groups
        for g in range(config.num_dense_ffn_groups):
            members = tuple(ep_members[g * config.dense_ffn_tp : (g + 1) * config.dense_ffn_tp])
            dense_groups.append(DenseFfnGroup(group_id=g, members=members, weight=initial))

    return Cluster(
        config=config,
        devices=devices,
        placement=placement,
        dense_groups=dense_groups,
        dp_members=dp_members,
        ep_members=ep_members,
    )


def experts_on_device(cluster: Cluster, device_id: int) -> set[int]:
    """Expert ids with a replica on the device; empty for attention-only devices."""
    cluster.device(device_id)
    return {e for e, hosts in cluster.placement.items() if device_id in hosts}


def sole_replica_experts(cluster: Cluster, device_id: int) -> set[int]:
    """Experts whose only healthy replica lives on this device.

    These are exactly the experts that would be lost if the device's weights
    cannot be recovered.
    """
    cluster.device(device_id)
    sole: set[int] = set()
    for expert, hosts in cluster.placement.items():
        if device_id not in hosts:
            continue
        others_healthy = any(
            d != device_id and cluster.devices[d].health is Health.HEALTHY for d in hosts
        )
        if not others_healthy:
            sole.add(expert)
    return sole


def remove_device_replicas(cluster: Cluster, device_id: int) -> set[int]:
    """Strip the device from every expert's replica list; returns the affected experts."""
    cluster.device(device_id)
    affected: set[int] = set()
    for expert, hosts in cluster.placement.items():
        if device_id in hosts:
            cluster.placement[expert] = [d for d in hosts if d != device_id]
            affected.add(expert)
    return affected


def assert_placement_total(cluster: Cluster) -> None:
    """Every expert must map to at least one device (build-time totality)."""
    missing = [e for e in range(cluster.config.num_experts) if not cluster.placement.get(e)]
    if missing:
        raise IntegrityError(f"experts without any replica: {missing}")
