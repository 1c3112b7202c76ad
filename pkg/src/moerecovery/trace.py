"""Timed recovery traces: phase records, serialization, and trace comparison."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

# Trace phase categories. "detection" and "resume" are pipeline markers; the
# rest follow the recovery timing taxonomy used for cost accounting.
CATEGORY_DETECTION = "detection"
CATEGORY_ENGINE = "engine"
CATEGORY_EXECUTOR_PROCESSES = "executor_processes"
CATEGORY_DISTRIBUTED_GROUPS = "distributed_groups"
CATEGORY_XCCL = "xccl"
CATEGORY_ROLE_SWITCH = "role_switch"
CATEGORY_GENERATOR = "generator"
CATEGORY_READ_CACHE = "read_cache"
CATEGORY_COMPILE = "compile"
CATEGORY_OTHER = "other"
CATEGORY_RESUME = "resume"

ACCOUNTED_CATEGORIES = (
    CATEGORY_ENGINE,
    CATEGORY_EXECUTOR_PROCESSES,
    CATEGORY_DISTRIBUTED_GROUPS,
    CATEGORY_XCCL,
    CATEGORY_ROLE_SWITCH,
    CATEGORY_GENERATOR,
    CATEGORY_READ_CACHE,
    CATEGORY_COMPILE,
    CATEGORY_OTHER,
)

OUTCOME_RECOVERED = "recovered"
OUTCOME_ABORTED = "aborted"


@dataclass(frozen=True)
class TracePhase:
    category: str
    start: float
    end: float
    duration: float
    detail: str = ""

    def to_record(self, kind: str = "phase") -> dict:
        return {
            "record": kind,
            "category": self.category,
            "start": self.start,
            "end": self.end,
            "duration": self.duration,
            "detail": self.detail,
        }


@dataclass
class RecoveryTrace:
    scenario_id: str
    outcome: str = OUTCOME_RECOVERED
    reason: str | None = None
    fault_time: float = 0.0
    recovery_start: float = 0.0
    phases: list[TracePhase] = field(default_factory=list)
    background: list[TracePhase] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    @property
    def total(self) -> float:
        """Service downtime: last phase end relative to fault detection."""
        if not self.phases:
            return 0.0
        return self.phases[-1].end - self.recovery_start

    def category_totals(self) -> dict[str, float]:
        totals: dict[str, float] = {}
        for phase in self.phases:
            if phase.category in (CATEGORY_DETECTION, CATEGORY_RESUME):
                continue
            totals[phase.category] = totals.get(phase.category, 0.0) + phase.duration
        return totals

    def phases_in(self, category: str) -> list[TracePhase]:
        return [p for p in self.phases if p.category == category]

    def to_records(self) -> list[dict]:
        records: list[dict] = [e | {"record": "event"} for e in self.events]
        records.extend(p.to_record() for p in self.phases)
        records.extend(p.to_record(kind="background") for p in self.background)
        records.append(
            {
                "record": "summary",
                "scenario": self.scenario_id,
                "outcome": self.outcome,
                "reason": self.reason,
                "fault_time": self.fault_time,
                "recovery_start": self.recovery_start,
                "total": self.total,
                "categories": self.category_totals(),
            }
        )
        return records

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.to_records()) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "RecoveryTrace":
        phases: list[TracePhase] = []
        background: list[TracePhase] = []
        events: list[dict] = []
        summary: dict | None = None
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"trace line {line_no} is not valid JSON: {exc}") from None
            kind = record.get("record")
            if kind in ("phase", "background"):
                phase = TracePhase(
                    category=record["category"],
                    start=record["start"],
                    end=record["end"],
                    duration=record["duration"],
                    detail=record.get("detail", ""),
                )
                (phases if kind == "phase" else background).append(phase)
            elif kind == "event":
                events.append({k: v for k, v in record.items() if k != "record"})
            elif kind == "summary":
                summary = record
        if summary is None:
            raise ValueError("trace stream has no summary record")
        return cls(
            scenario_id=summary.get("scenario", "unknown"),
            outcome=summary.get("outcome", OUTCOME_RECOVERED),
            reason=summary.get("reason"),
            fault_time=summary.get("fault_time", 0.0),
            recovery_start=summary.get("recovery_start", 0.0),
            phases=phases,
            background=background,
            events=events,
        )


@dataclass
class TraceComparison:
    reduction: float
    revive_total: float
    baseline_total: float
    categories: dict[str, tuple[float, float, float]]  # (baseline, recovery, delta)
    warnings: list[str] = field(default_factory=list)

    def format_table(self) -> str:
        lines = [f"{'category':<22}{'baseline':>12}{'recovery':>12}{'delta':>12}"]
        for category, (base, revive, delta) in self.categories.items():
            lines.append(f"{category:<22}{base:>12.3f}{revive:>12.3f}{delta:>12.3f}")
        lines.append(
            f"{'total':<22}{self.baseline_total:>12.3f}{self.revive_total:>12.3f}"
            f"{self.baseline_total - self.revive_total:>12.3f}"
        )
        lines.append(f"reduction: {100.0 * self.reduction:.1f}%")
        return "\n".join(lines)


def compare_traces(revive: RecoveryTrace, baseline: RecoveryTrace) -> TraceComparison:
    """Recovery-time reduction and a per-category breakdown against the baseline."""
    if baseline.total == 0:
        raise ValueError("baseline total is zero; reduction is undefined")
    warnings: list[str] = []
    if revive.scenario_id != baseline.scenario_id:
        warnings.append(
            f"comparing different scenarios: {revive.scenario_id!r} vs {baseline.scenario_id!r}"
        )
    revive_cats = revive.category_totals()
    baseline_cats = baseline.category_totals()
    categories: dict[str, tuple[float, float, float]] = {}
    ordered = [c for c in ACCOUNTED_CATEGORIES if c in revive_cats or c in baseline_cats]
    for extra in sorted(set(revive_cats) | set(baseline_cats)):
        if extra not in ordered:
            ordered.append(extra)
    for category in ordered:
        base = baseline_cats.get(category, 0.0)
        rev = revive_cats.get(category, 0.0)
        categories[category] = (base, rev, base - rev)
    return TraceComparison(
        reduction=1.0 - revive.total / baseline.total,
        revive_total=revive.total,
        baseline_total=baseline.total,
        categories=categories,
        warnings=warnings,
    )
