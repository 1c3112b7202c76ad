"""Deterministic failure-recovery simulator for MoE LLM serving clusters."""

from .blocks import BlockTable
from .cluster import (
    Cluster,
    DeploymentConfig,
    DeploymentMode,
    Device,
    Health,
    Role,
    build_cluster,
    experts_on_device,
    sole_replica_experts,
)
from .compilecache import CacheStore, GraphCacheKey, compile_graph, precompile_failure_scenarios
from .detection import FaultCode, FaultEvent, FaultLevel, HeartbeatMonitor, classify_fault
from .domains import DomainSet, RankAssignment, compact_ranks, role_switch_ranks
from .latency import LatencyModel, calibrated_profile
from .orchestrator import (
    Simulation,
    check_service_invariants,
    run_baseline_reinit,
    run_scenario,
    simulate,
)
from .routing import select_failed_every_nth, select_failed_task_based, top_k_route
from .scenario import Scenario, load_scenario, parse_scenario
from .sequences import Sequence, build_recovery_prompt, plan_migration
from .trace import RecoveryTrace, compare_traces
from .weights import RecoveryPlan, RecoveryPolicy, decide_moe_recovery

__version__ = "0.1.0"

__all__ = [
    "BlockTable",
    "CacheStore",
    "Cluster",
    "DeploymentConfig",
    "DeploymentMode",
    "Device",
    "DomainSet",
    "FaultCode",
    "FaultEvent",
    "FaultLevel",
    "GraphCacheKey",
    "Health",
    "HeartbeatMonitor",
    "LatencyModel",
    "RankAssignment",
    "RecoveryPlan",
    "RecoveryPolicy",
    "RecoveryTrace",
    "Role",
    "Scenario",
    "Sequence",
    "Simulation",
    "build_cluster",
    "build_recovery_prompt",
    "calibrated_profile",
    "check_service_invariants",
    "classify_fault",
    "compact_ranks",
    "compare_traces",
    "compile_graph",
    "decide_moe_recovery",
    "experts_on_device",
    "load_scenario",
    "parse_scenario",
    "plan_migration",
    "precompile_failure_scenarios",
    "role_switch_ranks",
    "run_baseline_reinit",
    "run_scenario",
    "select_failed_every_nth",
    "select_failed_task_based",
    "simulate",
    "sole_replica_experts",
    "top_k_route",
]
