"""Scenario files: the declarative description of one simulated failure run.

A scenario bundles the deployment, the request workload, the injected faults,
policy knobs, detection settings, the latency profile, and the seed. Parsing
is strict: unknown keys and malformed values fail with the offending field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import yaml

from .cluster import DeploymentConfig
from .detection import DEFAULT_FAULT_ACTIONS, FaultAction, FaultLevel, FaultPolicy
from .errors import ConfigError, ScenarioError
from .latency import LatencyModel, latency_from_dict
from .weights import RecoveryPolicy


@dataclass(frozen=True)
class SequenceSpec:
    prompt_len: int
    arrival: float
    decode_target: int


@dataclass(frozen=True)
class WorkloadSpec:
    sequences: tuple[SequenceSpec, ...] = ()
    step_time: float = 0.05
    block_size: int = 128
    blocks_per_executor: int = 512


@dataclass(frozen=True)
class FaultSpec:
    device: int
    time: float
    level: FaultLevel | None = None  # None means a silent failure (heartbeat-only)


@dataclass(frozen=True)
class DetectionSettings:
    heartbeat_interval: float = 1.0
    miss_threshold: int = 3
    fault_policy: FaultPolicy = field(default_factory=FaultPolicy)


@dataclass(frozen=True)
class Scenario:
    name: str
    deployment: DeploymentConfig
    workload: WorkloadSpec = WorkloadSpec()
    faults: tuple[FaultSpec, ...] = ()
    policy: RecoveryPolicy = RecoveryPolicy()
    detection: DetectionSettings = DetectionSettings()
    latency: LatencyModel = field(default_factory=LatencyModel)
    seed: int = 0
    precompiled: bool = True
    max_time: float = 3600.0

    def covered_faults(self) -> list[FaultSpec]:
        """Faults that trigger recovery: silent ones, or levels mapped to recovery."""
        covered = []
        for spec in self.faults:
            if spec.level is None:
                covered.append(spec)
            elif self.detection.fault_policy.action_for(spec.level) is FaultAction.TRIGGER_RECOVERY:
                covered.append(spec)
        return covered

    def validate(self) -> None:
        self.deployment.validate()
        covered = self.covered_faults()
        if len(covered) != 1:
            raise ScenarioError(
                f"exactly one recovery-triggering fault is required, found {len(covered)}",
                field="faults",
            )
        for spec in self.faults:
            if not 0 <= spec.device < self.deployment.num_devices:
                raise ScenarioError(
                    f"fault names unknown device {spec.device}", field="faults"
                )
            if spec.time < 0:
                raise ScenarioError("fault time must be non-negative", field="faults")
        for seq in self.workload.sequences:
            if seq.prompt_len < 1:
                raise ScenarioError("prompt_len must be >= 1", field="workload.sequences")
            if seq.decode_target < 1:
                raise ScenarioError("decode_target must be >= 1", field="workload.sequences")
            if seq.arrival < 0:
                raise ScenarioError("arrival must be non-negative", field="workload.sequences")


def _require_mapping(data: object, context: str) -> Mapping:
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise ScenarioError("must be a mapping", field=context)
    return data


def _get_int(data: Mapping, key: str, context: str, default: int | None = None) -> int:
    if key not in data:
        if default is None:
            raise ScenarioError("missing required field", field=f"{context}.{key}")
        return default
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, int):
        try:
            return int(str(value))
        except ValueError:
            raise ScenarioError(
                f"must be an integer, got {value!r}", field=f"{context}.{key}"
            ) from None
    return value


def _get_float(data: Mapping, key: str, context: str, default: float | None = None) -> float:
    if key not in data:
        if default is None:
            raise ScenarioError("missing required field", field=f"{context}.{key}")
        return default
    try:
        return float(data[key])  # type: ignore[arg-type]
    except (TypeError, ValueError):
        raise ScenarioError(
            f"must be a number, got {data[key]!r}", field=f"{context}.{key}"
        ) from None


def parse_scenario(data: Mapping, name: str = "scenario") -> Scenario:
    data = _require_mapping(data, "scenario")
    known = {
        "name",
        "deployment",
        "workload",
        "faults",
        "policy",
        "detection",
        "latencies",
        "seed",
        "precompiled",
        "max_time",
    }
    unknown = set(data) - known
    if unknown:
        raise ScenarioError(f"unknown sections: {sorted(unknown)}", field="scenario")

    scenario_name = str(data.get("name", name))

    try:
        deployment = DeploymentConfig.from_dict(_require_mapping(data.get("deployment"), "deployment"))
    except ConfigError as exc:
        raise ScenarioError(str(exc), field="deployment") from None

    workload_raw = _require_mapping(data.get("workload"), "workload")
    sequences = []
    for idx, entry in enumerate(workload_raw.get("sequences", []) or []):
        entry = _require_mapping(entry, f"workload.sequences[{idx}]")
        sequences.append(
            SequenceSpec(
                prompt_len=_get_int(entry, "prompt_len", f"workload.sequences[{idx}]"),
                arrival=_get_float(entry, "arrival", f"workload.sequences[{idx}]", 0.0),
                decode_target=_get_int(entry, "decode_target", f"workload.sequences[{idx}]"),
            )
        )
    workload = WorkloadSpec(
        sequences=tuple(sequences),
        step_time=_get_float(workload_raw, "step_time", "workload", 0.05),
        block_size=_get_int(workload_raw, "block_size", "workload", 128),
        blocks_per_executor=_get_int(workload_raw, "blocks_per_executor", "workload", 512),
    )
    if workload.step_time <= 0:
        raise ScenarioError("step_time must be positive", field="workload.step_time")

    faults = []
    for idx, entry in enumerate(data.get("faults", []) or []):
        entry = _require_mapping(entry, f"faults[{idx}]")
        level: FaultLevel | None = None
        if "level" in entry and entry["level"] is not None:
            try:
                level = FaultLevel[str(entry["level"]).strip().upper()]
            except KeyError:
                raise ScenarioError(
                    f"level must be one of L1..L6, got {entry['level']!r}",
                    field=f"faults[{idx}].level",
                ) from None
        faults.append(
            FaultSpec(
                device=_get_int(entry, "device", f"faults[{idx}]"),
                time=_get_float(entry, "time", f"faults[{idx}]"),
                level=level,
            )
        )

    try:
        policy = RecoveryPolicy.from_dict(_require_mapping(data.get("policy"), "policy"))
    except (ValueError, TypeError) as exc:
        raise ScenarioError(str(exc), field="policy") from None

    detection_raw = _require_mapping(data.get("detection"), "detection")
    try:
        fault_policy = FaultPolicy.from_dict(
            _require_mapping(detection_raw.get("fault_actions"), "detection.fault_actions")
        )
    except (KeyError, ValueError) as exc:
        raise ScenarioError(
            f"bad fault action table: {exc}", field="detection.fault_actions"
        ) from None
    detection = DetectionSettings(
        heartbeat_interval=_get_float(detection_raw, "heartbeat_interval", "detection", 1.0),
        miss_threshold=_get_int(detection_raw, "miss_threshold", "detection", 3),
        fault_policy=fault_policy,
    )
    if detection.heartbeat_interval <= 0:
        raise ScenarioError(
            "heartbeat_interval must be positive", field="detection.heartbeat_interval"
        )
    if detection.miss_threshold < 1:
        raise ScenarioError("miss_threshold must be >= 1", field="detection.miss_threshold")

    try:
        latency = latency_from_dict(
            _require_mapping(data.get("latencies"), "latencies"), deployment.mode
        )
    except ConfigError as exc:
        raise ScenarioError(str(exc), field="latencies") from None

    scenario = Scenario(
        name=scenario_name,
        deployment=deployment,
        workload=workload,
        faults=tuple(faults),
        policy=policy,
        detection=detection,
        latency=latency,
        seed=_get_int(data, "seed", "scenario", 0),
        precompiled=bool(data.get("precompiled", True)),
        max_time=_get_float(data, "max_time", "scenario", 3600.0),
    )
    scenario.validate()
    return scenario


def load_scenario(path: str | Path) -> Scenario:
    """Parse a scenario file; syntax errors carry the line, semantic errors the field."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        line = None
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            line = mark.line + 1
        raise ScenarioError(f"invalid YAML in {path}: {exc}", line=line) from None
    if data is None:
        raise ScenarioError(f"{path} is empty", line=1)
    return parse_scenario(data, name=path.stem)


def default_fault_actions_table() -> dict[str, str]:
    return {level.name: action.value for level, action in DEFAULT_FAULT_ACTIONS.items()}
