"""Graph compilation cache: configuration-keyed store with precompile support.

Compilation is modelled, not executed; the value of the module is exact key
semantics and hit/miss cost accounting. A cache hit replays a precompiled
graph in seconds, a miss pays the full trace-and-compile cost.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

from .cluster import DeploymentConfig, DeploymentMode, Health, Role
from .latency import LatencyModel

if TYPE_CHECKING:
    from .cluster import Cluster


@dataclass(frozen=True)
class LayoutDescriptor:
    """Failure-position-invariant shape of the executor layout.

    Two layouts that differ only in which specific device failed compile to the
    same graph, so the descriptor counts roles rather than naming devices. A
    role-switched MoE executor is counted separately because its graph differs
    from a native one (it joined the expert domain mid-life).
    """

    mode: DeploymentMode
    attention: int
    moe_native: int
    moe_converted: int
    collocated: int
    dense_groups: int

    def stable_hash(self) -> str:
        payload = json.dumps(
            [
                self.mode.value,
                self.attention,
                self.moe_native,
                self.moe_converted,
                self.collocated,
                self.dense_groups,
            ],
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class GraphCacheKey:
    mode: DeploymentMode
    dp_size: int
    ep_size: int
    layout_hash: str
    model_id: str = "default"
    shape_class: str = "decode"

    def ident(self) -> str:
        return (
            f"{self.mode.value}-dp{self.dp_size}-ep{self.ep_size}"
            f"-{self.layout_hash}-{self.model_id}-{self.shape_class}"
        )


def layout_for_cluster(cluster: "Cluster") -> LayoutDescriptor:
    attention = moe_native = moe_converted = collocated = 0
    active = set(cluster.dp_members) | set(cluster.ep_members)
    for device_id in active:
        device = cluster.devices[device_id]
        if device.health is not Health.HEALTHY:
            continue
        if device.role is Role.ATTENTION:
            attention += 1
        elif device.role is Role.COLLOCATED:
            collocated += 1
        elif device.converted:
            moe_converted += 1
        else:
            moe_native += 1
    return LayoutDescriptor(
        mode=cluster.config.mode,
        attention=attention,
        moe_native=moe_native,
        moe_converted=moe_converted,
        collocated=collocated,
        dense_groups=cluster.config.num_dense_ffn_groups,
    )


def key_for_cluster(cluster: "Cluster", model_id: str = "default") -> GraphCacheKey:
    layout = layout_for_cluster(cluster)
    if cluster.config.mode is DeploymentMode.MA_COLLOCATED:
        dp = len(cluster.healthy_attention_devices())
        ep = len(cluster.healthy_expert_devices())
    else:
        dp = layout.attention
        ep = layout.moe_native + layout.moe_converted
    return GraphCacheKey(
        mode=cluster.config.mode,
        dp_size=dp,
        ep_size=ep,
        layout_hash=layout.stable_hash(),
        model_id=model_id,
    )


@dataclass(frozen=True)
class CacheEntry:
    created_at: float
    size_estimate: int


@dataclass
class CompileResult:
    duration: float
    cache_hit: bool
    key: GraphCacheKey


@dataclass
class CacheStore:
    """Exact-match cache keyed by :class:`GraphCacheKey`; optionally disk-backed.

    The store never evicts, so its size is non-decreasing.
    """

    directory: Path | None = None
    entries: dict[GraphCacheKey, CacheEntry] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.directory is not None:
            self.directory = Path(self.directory)
            self._load()

    def _load(self) -> None:
        assert self.directory is not None
        if not self.directory.exists():
            return
        for path in sorted(self.directory.glob("*.json")):
            data = json.loads(path.read_text())
            key = GraphCacheKey(
                mode=DeploymentMode(data["mode"]),
                dp_size=int(data["dp_size"]),
                ep_size=int(data["ep_size"]),
                layout_hash=str(data["layout_hash"]),
                model_id=str(data["model_id"]),
                shape_class=str(data["shape_class"]),
            )
            self.entries[key] = CacheEntry(
                created_at=float(data["created_at"]),
                size_estimate=int(data["size_estimate"]),
            )

    def __contains__(self, key: GraphCacheKey) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def insert(self, key: GraphCacheKey, now: float = 0.0) -> bool:
        """Add an entry; returns False when the key was already cached."""
        if key in self.entries:
            return False
        entry = CacheEntry(created_at=now, size_estimate=64 + 16 * (key.dp_size + key.ep_size))
        self.entries[key] = entry
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            payload = {
                "mode": key.mode.value,
                "dp_size": key.dp_size,
                "ep_size": key.ep_size,
                "layout_hash": key.layout_hash,
                "model_id": key.model_id,
                "shape_class": key.shape_class,
                "created_at": entry.created_at,
                "size_estimate": entry.size_estimate,
            }
            (self.directory / f"{key.ident()}.json").write_text(
                json.dumps(payload, sort_keys=True) + "\n"
            )
        return True


def enumerate_single_failure_scenarios(config: DeploymentConfig) -> list[GraphCacheKey]:
    """Post-failure configurations worth precompiling for a single device loss.

    Disaggregated deployments yield three: one attention executor down, one MoE
    executor down, and the role-switched layout (one attention executor
    converted to replace a lost MoE executor). Collocated deployments lose both
    roles at once, so a single configuration covers them.
    """
    config.validate()
    keys: list[GraphCacheKey] = []
    if config.mode is DeploymentMode.MA_DISAGGREGATED:
        layouts = [
            (config.dp_size - 1, config.ep_size, 0),
            (config.dp_size, config.ep_size - 1, 0),
            (config.dp_size - 1, config.ep_size - 1, 1),
        ]
        for attention, moe_native, moe_converted in layouts:
            if attention < 1 or moe_native + moe_converted < 1:
                continue
            descriptor = LayoutDescriptor(
                mode=config.mode,
                attention=attention,
                moe_native=moe_native,
                moe_converted=moe_converted,
                collocated=0,
                dense_groups=config.num_dense_ffn_groups,
            )
            keys.append(
                GraphCacheKey(
                    mode=config.mode,
                    dp_size=attention,
                    ep_size=moe_native + moe_converted,
                    layout_hash=descriptor.stable_hash(),
                )
            )
    else:
        if config.dp_size > 1:
            descriptor = LayoutDescriptor(
                mode=config.mode,
                attention=0,
                moe_native=0,
                moe_converted=0,
                collocated=config.dp_size - 1,
                dense_groups=config.num_dense_ffn_groups,
            )
            keys.append(
                GraphCacheKey(
                    mode=config.mode,
                    dp_size=config.dp_size - 1,
                    ep_size=max(config.ep_size - 1, 0),
                    layout_hash=descriptor.stable_hash(),
                )
            )
    return keys


def precompile_failure_scenarios(
    config: DeploymentConfig, store: CacheStore, now: float = 0.0
) -> list[GraphCacheKey]:
    """Populate the store with one entry per distinct post-failure key."""
    created: list[GraphCacheKey] = []
    for key in enumerate_single_failure_scenarios(config):
        if store.insert(key, now=now):
            created.append(key)
    return created


def compile_graph(
    key: GraphCacheKey, store: CacheStore, latency: LatencyModel, now: float = 0.0
) -> CompileResult:
    """Cost a compilation: cache read plus cached compile on a hit, full compile on a miss.

    A miss inserts the freshly compiled graph so the store only ever grows.
    """
    if key in store:
        return CompileResult(
            duration=latency.read_cache + latency.cached_compile, cache_hit=True, key=key
        )
    store.insert(key, now=now)
    return CompileResult(duration=latency.full_compile, cache_hit=False, key=key)
