"""Failure detection: heartbeat tracking, fault-code classification, recovery triggers.

Two fault sources feed the same event stream: a heartbeat monitor driven by the
simulation clock, and an annotation source standing in for the device-plugin
poller. Both emit :class:`FaultEvent` records.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Mapping


class FaultLevel(IntEnum):
    L1 = 1
    L2 = 2
    L3 = 3
    L4 = 4
    L5 = 5
    L6 = 6


class FaultAction(str, Enum):
    IGNORE = "ignore"
    LOG_ONLY = "log_only"
    TRIGGER_RECOVERY = "trigger_recovery"


class FaultSource(str, Enum):
    HEARTBEAT_TIMEOUT = "heartbeat_timeout"
    ANNOTATION_REPORT = "annotation_report"


# L1 is benign, L6 forces NPU isolation; the middle levels are configurable
# policy and these are the shipped defaults.
DEFAULT_FAULT_ACTIONS: dict[FaultLevel, FaultAction] = {
    FaultLevel.L1: FaultAction.IGNORE,
    FaultLevel.L2: FaultAction.LOG_ONLY,
    FaultLevel.L3: FaultAction.LOG_ONLY,
    FaultLevel.L4: FaultAction.TRIGGER_RECOVERY,
    FaultLevel.L5: FaultAction.TRIGGER_RECOVERY,
    FaultLevel.L6: FaultAction.TRIGGER_RECOVERY,
}


@dataclass(frozen=True)
class FaultCode:
    level: FaultLevel
    event_id: str
    alarm_time: float
    error_type: str = "hardware"


@dataclass(frozen=True)
class FaultEvent:
    source: FaultSource
    device_id: int
    detected_at: float
    code: FaultCode | None = None

    def __post_init__(self) -> None:
        if self.code is not None and self.detected_at < self.code.alarm_time:
            raise ValueError("detected_at precedes the fault alarm time")

    def to_record(self) -> dict:
        record = {
            "source": self.source.value,
            "device": self.device_id,
            "detected_at": self.detected_at,
        }
        if self.code is not None:
            record["level"] = self.code.level.name
            record["event_id"] = self.code.event_id
            record["alarm_time"] = self.code.alarm_time
            record["error_type"] = self.code.error_type
        return record


@dataclass(frozen=True)
class FaultPolicy:
    """Level-to-action table; only L1 and L6 are fixed by the fault taxonomy."""

    actions: Mapping[FaultLevel, FaultAction] = field(
        default_factory=lambda: dict(DEFAULT_FAULT_ACTIONS)
    )

    def action_for(self, level: FaultLevel) -> FaultAction:
        return self.actions.get(level, FaultAction.TRIGGER_RECOVERY)

    @classmethod
    def from_dict(cls, data: Mapping[str, str]) -> "FaultPolicy":
        actions = dict(DEFAULT_FAULT_ACTIONS)
        for key, value in data.items():
            level = FaultLevel[str(key).strip().upper()]
            actions[level] = FaultAction(str(value).strip().lower())
        return cls(actions=actions)


def classify_fault(code: FaultCode, policy: FaultPolicy | None = None) -> FaultAction:
    """Pure total mapping from fault level to action."""
    return (policy or FaultPolicy()).action_for(code.level)


@dataclass
class HeartbeatRecord:
    executor_id: int
    device_id: int
    last_seen: float
    missed_count: int = 0
    suspect: bool = False


class HeartbeatMonitor:
    """Tracks per-executor heartbeats and emits one timeout event per silent executor.

    A missed count increments on every check where no heartbeat arrived within
    the last interval; reaching the threshold marks the executor suspect so the
    event fires exactly once until re-registration.
    """

    def __init__(self, interval: float = 1.0, miss_threshold: int = 3):
        if interval <= 0:
            raise ValueError("heartbeat interval must be positive")
        if miss_threshold < 1:
            raise ValueError("miss threshold must be >= 1")
        self.interval = interval
        self.miss_threshold = miss_threshold
        self._records: dict[int, HeartbeatRecord] = {}

    def register(self, executor_id: int, device_id: int, now: float) -> None:
        self._records[executor_id] = HeartbeatRecord(
            executor_id=executor_id, device_id=device_id, last_seen=now
        )

    def deregister(self, executor_id: int) -> None:
        self._records.pop(executor_id, None)

    def record_heartbeat(self, executor_id: int, now: float) -> None:
        record = self._records.get(executor_id)
        if record is None:
            raise KeyError(f"executor {executor_id} is not registered")
        record.last_seen = now
        record.missed_count = 0

    def check_timeouts(self, now: float) -> list[FaultEvent]:
        events: list[FaultEvent] = []
        for executor_id in sorted(self._records):
            record = self._records[executor_id]
            if record.suspect:
                continue
            if now - record.last_seen >= self.interval:
                record.missed_count += 1
                if record.missed_count >= self.miss_threshold:
                    record.suspect = True
                    events.append(
                        FaultEvent(
                            source=FaultSource.HEARTBEAT_TIMEOUT,
                            device_id=record.device_id,
                            detected_at=now,
                        )
                    )
        return events

    def record(self, executor_id: int) -> HeartbeatRecord:
        return self._records[executor_id]


class AnnotationSource:
    """Second fault source: queued device-plugin reports drained at each poll."""

    def __init__(self) -> None:
        self._pending: list[tuple[int, FaultCode]] = []

    def report(self, device_id: int, code: FaultCode) -> None:
        self._pending.append((device_id, code))

    def poll(self, now: float) -> list[FaultEvent]:
        events = [
            FaultEvent(
                source=FaultSource.ANNOTATION_REPORT,
                device_id=device_id,
                detected_at=now,
                code=code,
            )
            for device_id, code in self._pending
            if code.alarm_time <= now
        ]
        self._pending = [(d, c) for d, c in self._pending if c.alarm_time > now]
        return events
