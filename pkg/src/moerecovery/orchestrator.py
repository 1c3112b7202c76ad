"""Discrete-event simulation engine and the recovery pipeline.

One simulation runs a scenario end to end: the workload decodes in global
steps, a fault is injected, detection fires, the serialized recovery pipeline
executes (stop and revert, migration or weight plan, rank compaction and
domain rebuild, cache read and compile), and inference resumes. Every phase is
charged from the latency model into a :class:`RecoveryTrace`.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Iterator

from .blocks import BlockTable
from .cluster import (
    Cluster,
    DeploymentMode,
    Health,
    Role,
    build_cluster,
    experts_on_device,
    sole_replica_experts,
)
from .compilecache import (
    CacheStore,
    GraphCacheKey,
    LayoutDescriptor,
    compile_graph,
    key_for_cluster,
    layout_for_cluster,
    precompile_failure_scenarios,
)
from .detection import (
    AnnotationSource,
    FaultAction,
    FaultCode,
    FaultEvent,
    HeartbeatMonitor,
)
from .domains import DomainKind, DomainRebuildPlan, DomainSet, RankAssignment, rebuild_domains
from .errors import UnrecoverableError
from .latency import LatencyModel
from .routing import ExpertMask
from .scenario import FaultSpec, Scenario
from .sequences import (
    AttentionExecutor,
    Sequence,
    plan_migration,
    prompt_token,
    synthetic_token,
)
from .trace import (
    CATEGORY_COMPILE,
    CATEGORY_DETECTION,
    CATEGORY_DISTRIBUTED_GROUPS,
    CATEGORY_ENGINE,
    CATEGORY_EXECUTOR_PROCESSES,
    CATEGORY_GENERATOR,
    CATEGORY_OTHER,
    CATEGORY_READ_CACHE,
    CATEGORY_RESUME,
    CATEGORY_ROLE_SWITCH,
    CATEGORY_XCCL,
    OUTCOME_ABORTED,
    OUTCOME_RECOVERED,
    RecoveryTrace,
    TracePhase,
)
from .weights import (
    PlanVariant,
    RecoveryPlan,
    RoleSwitchFailed,
    apply_missing_expert_mask,
    apply_redundant_remap,
    apply_role_switch,
    decide_moe_recovery,
    mark_compromised_groups,
    rebalance_dense_ffn,
    select_donor,
)


@dataclass(order=True)
class _Event:
    time: float
    seq: int
    kind: str = field(compare=False)
    payload: object = field(compare=False, default=None)


class Simulation:
    """Single-threaded event loop owning all cluster and executor state."""

    def __init__(self, scenario: Scenario, store: CacheStore | None = None, baseline: bool = False):
        scenario.validate()
        self.scenario = scenario
        self.baseline = baseline
        self.latency: LatencyModel = scenario.latency
        self.cluster: Cluster = build_cluster(scenario.deployment)
        self.domains: DomainSet = DomainSet.from_cluster(self.cluster)
        self.world_before = self.domains.world

        self.store = store if store is not None else CacheStore()
        if store is None and scenario.precompiled:
            precompile_failure_scenarios(scenario.deployment, self.store, now=0.0)

        self.monitor = HeartbeatMonitor(
            interval=scenario.detection.heartbeat_interval,
            miss_threshold=scenario.detection.miss_threshold,
        )
        self.annotations = AnnotationSource()

        self.executors: dict[int, AttentionExecutor] = {}
        for device_id in self.cluster.dp_members:
            self.executors[device_id] = AttentionExecutor(
                executor_id=device_id,
                block_table=BlockTable(
                    num_blocks=scenario.workload.blocks_per_executor,
                    block_size=scenario.workload.block_size,
                ),
            )
        executor_devices = list(self.cluster.dp_members)
        executor_devices += [d for d in self.cluster.ep_members if d not in self.executors]
        for device_id in executor_devices:
            self.monitor.register(device_id, device_id, now=0.0)

        self.sequences: dict[int, Sequence] = {}
        self.mask: ExpertMask = frozenset()
        self.trace = RecoveryTrace(scenario_id=scenario.name)

        self.now = 0.0
        self.halted = False
        self.recovering = False
        self.recovery_started = False
        self.resumed = False
        self.aborted = False
        self.background_pending = False
        self.background_upgrade: dict | None = None
        self.failed_device: int | None = None

        self._heap: list[_Event] = []
        self._counter: Iterator[int] = itertools.count()
        self._step_id = 0
        self._step_running = False

    # -- event plumbing -------------------------------------------------------

    def _schedule(self, time: float, kind: str, payload: object = None) -> None:
        heapq.heappush(self._heap, _Event(time, next(self._counter), kind, payload))

    def _setup(self) -> None:
        for spec in self.scenario.faults:
            self._schedule(spec.time, "fault", spec)
        for index, seq_spec in enumerate(self.scenario.workload.sequences):
            self._schedule(seq_spec.arrival, "arrival", (index, seq_spec))
        interval = self.scenario.detection.heartbeat_interval
        self._schedule(interval, "beats")
        self._schedule(interval, "monitor")
        self._schedule(interval, "poll")
        self._schedule(0.0, "step_begin")

    def run(self) -> RecoveryTrace:
        self._setup()
        while self._heap:
            event = heapq.heappop(self._heap)
            if event.time > self.scenario.max_time:
                break
            self.now = event.time
            handler = getattr(self, f"_on_{event.kind}")
            handler(event.payload)
        if not self.aborted:
            self.trace.outcome = OUTCOME_RECOVERED
        return self.trace

    def _done(self) -> bool:
        if self.aborted:
            return True
        all_finished = all(s.is_finished() for s in self.sequences.values())
        pending_arrivals = len(self.sequences) < len(self.scenario.workload.sequences)
        return self.resumed and all_finished and not pending_arrivals and not self.background_pending

    # -- workload -------------------------------------------------------------

    def _on_arrival(self, payload) -> None:
        index, spec = payload
        seq = Sequence(
            seq_id=index,
            prompt_tokens=[prompt_token(index, j) for j in range(spec.prompt_len)],
            decode_target=spec.decode_target,
        )
        self.sequences[index] = seq
        targets = [d for d in self.cluster.healthy_attention_devices() if d in self.executors]
        if not targets:
            return
        target = min(targets, key=lambda d: (self.executors[d].active_count(), d))
        self.executors[target].admit(seq)
        self._wake_steps()

    def _wake_steps(self) -> None:
        if not self._step_running and not self.halted and not self.aborted:
            self._step_running = True
            self._schedule(self.now, "step_begin")

    def _on_step_begin(self, _payload) -> None:
        if self.halted or self.aborted or not any(
            ex.has_work() for ex in self.executors.values()
        ):
            self._step_running = False
            return
        self._step_id += 1
        for device_id in sorted(self.executors):
            self.executors[device_id].start_step()
        self._schedule(self.now + self.scenario.workload.step_time, "step_end", self._step_id)

    def _on_step_end(self, step_id: int) -> None:
        if step_id != self._step_id:
            return  # invalidated by an in-flight revert
        if self.halted or self.aborted:
            # The step in flight froze when the fault hit; recovery reverts it.
            self._step_running = False
            return
        for device_id in sorted(self.executors):
            self.executors[device_id].commit_step()
        self._schedule(self.now, "step_begin")

    # -- detection ------------------------------------------------------------

    def _registered_beating_devices(self) -> list[int]:
        beating = set(self.executors)
        beating.update(self.cluster.ep_members)
        if self.background_upgrade is not None and self.background_pending:
            beating.discard(self.background_upgrade["donor"])
        return sorted(
            d for d in beating if self.cluster.devices[d].health is Health.HEALTHY
        )

    def _on_beats(self, _payload) -> None:
        for device_id in self._registered_beating_devices():
            self.monitor.record_heartbeat(device_id, self.now)
        if not self._done():
            self._schedule(self.now + self.scenario.detection.heartbeat_interval, "beats")

    def _on_monitor(self, _payload) -> None:
        if not self.recovering and not self.aborted:
            for event in self.monitor.check_timeouts(self.now):
                self._handle_fault_event(event, FaultAction.TRIGGER_RECOVERY)
        if not self._done():
            self._schedule(self.now + self.scenario.detection.heartbeat_interval, "monitor")

    def _on_poll(self, _payload) -> None:
        if not self.recovering and not self.aborted:
            for event in self.annotations.poll(self.now):
                assert event.code is not None
                action = self.scenario.detection.fault_policy.action_for(event.code.level)
                self._handle_fault_event(event, action)
        if not self._done():
            self._schedule(self.now + self.scenario.detection.heartbeat_interval, "poll")

    def _handle_fault_event(self, event: FaultEvent, action: FaultAction) -> None:
        self.trace.events.append(event.to_record() | {"action": action.value})
        if action is not FaultAction.TRIGGER_RECOVERY:
            return
        if self.recovery_started:
            return
        self.recovery_started = True
        self.failed_device = event.device_id
        self._start_recovery(event)

    def _on_fault(self, spec: FaultSpec) -> None:
        device = self.cluster.device(spec.device)
        code = None
        if spec.level is not None:
            code = FaultCode(
                level=spec.level,
                event_id=f"fault-{spec.device}-{spec.level.name}",
                alarm_time=self.now,
            )
            self.annotations.report(spec.device, code)
        action = (
            FaultAction.TRIGGER_RECOVERY
            if spec.level is None
            else self.scenario.detection.fault_policy.action_for(spec.level)
        )
        if action is FaultAction.TRIGGER_RECOVERY:
            # A covered fault halts the synchronized pipeline immediately; the
            # engine only learns about it through detection.
            device.health = Health.FAILED
            self.halted = True

    # -- recovery pipeline ------------------------------------------------------

    def _start_recovery(self, event: FaultEvent) -> None:
        self.recovering = True
        self.trace.fault_time = (
            event.code.alarm_time if event.code is not None else self._covered_fault_time()
        )
        self.trace.recovery_start = self.now
        self.trace.phases.append(
            TracePhase(
                category=CATEGORY_DETECTION,
                start=self.trace.fault_time,
                end=self.now,
                duration=self.now - self.trace.fault_time,
                detail=event.source.value,
            )
        )
        try:
            if self.baseline:
                resume_at = self._baseline_pipeline(self.now)
            else:
                resume_at = self._recovery_pipeline(self.now)
        except UnrecoverableError as exc:
            self.trace.outcome = OUTCOME_ABORTED
            self.trace.reason = str(exc)
            self.aborted = True
            return
        self._schedule(resume_at, "resume")

    def _covered_fault_time(self) -> float:
        covered = self.scenario.covered_faults()
        return covered[0].time if covered else 0.0

    def _push_phase(self, start: float, category: str, duration: float, detail: str) -> float:
        self.trace.phases.append(
            TracePhase(
                category=category,
                start=start,
                end=start + duration,
                duration=duration,
                detail=detail,
            )
        )
        return start + duration

    def _stop_and_revert(self) -> None:
        for device_id in sorted(self.executors):
            self.executors[device_id].revert_in_flight_step()
        self._step_id += 1  # any pending step_end is now stale
        self._step_running = False

    def _recover_state(self) -> tuple[list[str], RecoveryPlan | None, object]:
        """Apply all state mutations of the recovery; returns pipeline details."""
        assert self.failed_device is not None
        failed = self.failed_device
        details = ["global stop", "revert in-flight steps"]
        self._stop_and_revert()

        if failed in self.executors:
            failed_executor = self.executors.pop(failed)
            self.monitor.deregister(failed)
            if failed in self.cluster.dp_members:
                self.cluster.dp_members.remove(failed)
            survivors = {
                d: self.executors[d].active_count()
                for d in self.cluster.healthy_attention_devices()
                if d in self.executors
            }
            if not survivors:
                raise UnrecoverableError("no surviving attention executors to serve requests")
            pending = sorted(
                s.seq_id for s in failed_executor.sequences.values() if not s.is_finished()
            )
            if pending:
                assignment = plan_migration(pending, survivors)
                for seq_id in sorted(assignment.targets):
                    seq = failed_executor.evict(seq_id)
                    self.executors[assignment.targets[seq_id]].adopt_migrated(seq)
                details.append(f"migrated {len(pending)} sequences from executor {failed}")
        else:
            self.monitor.deregister(failed)

        plan: RecoveryPlan | None = None
        switch_outcome = None
        if experts_on_device(self.cluster, failed):
            donor_loads = {d: ex.active_count() for d, ex in self.executors.items()}
            plan = decide_moe_recovery(self.cluster, failed, self.scenario.policy, donor_loads)
            if plan.variant is PlanVariant.ROLE_SWITCH:
                assert plan.donor is not None
                try:
                    switch_outcome = apply_role_switch(
                        self.cluster,
                        self.domains,
                        plan.donor,
                        failed,
                        self.latency,
                        self.executors,
                    )
                    self.executors.pop(plan.donor, None)
                    details.append(f"role switch: executor {plan.donor} replaces device {failed}")
                except RoleSwitchFailed:
                    plan = RecoveryPlan(
                        variant=PlanVariant.MISSING_EXPERT_MASK,
                        masked_experts=frozenset(sole_replica_experts(self.cluster, failed)),
                        warnings=(f"role switch donor {plan.donor} unusable; masking instead",),
                    )
            if plan.variant is PlanVariant.REDUNDANT_EXPERT_REMAP:
                apply_redundant_remap(self.cluster, failed)
                details.append("redundant expert remap")
            elif plan.variant is PlanVariant.MISSING_EXPERT_MASK:
                self.mask = apply_missing_expert_mask(self.cluster, plan, failed)
                details.append(f"gating mask update ({len(self.mask)} experts)")
            self.trace.events.append(
                {
                    "type": "recovery_plan",
                    "variant": plan.variant.value,
                    "donor": plan.donor,
                    "masked_experts": sorted(plan.masked_experts),
                    "warnings": list(plan.warnings),
                }
            )

        compromised = mark_compromised_groups(self.cluster, failed)
        if compromised:
            weights = rebalance_dense_ffn(self.cluster)
            details.append(
                f"dense FFN rebalance over {sum(1 for w in weights if w > 0)} healthy groups"
            )

        if switch_outcome is None:
            self.domains.remove_device(failed)
        return details, plan, switch_outcome

    def _recovery_pipeline(self, start: float) -> float:
        details, _plan, switch_outcome = self._recover_state()
        t = self._push_phase(start, CATEGORY_OTHER, self.latency.other, "; ".join(details))
        if switch_outcome is not None:
            for category, duration, detail in switch_outcome.timed_phases:
                t = self._push_phase(t, category, duration, detail)
        t = self._domain_rebuild_phases(t)
        t = self._compile_phases(t, key_for_cluster(self.cluster))
        t = self._push_phase(t, CATEGORY_RESUME, 0.0, "inference resumed")
        return t

    def _domain_rebuild_phases(self, t: float) -> float:
        if self.cluster.config.mode is DeploymentMode.MA_DISAGGREGATED:
            plan = DomainRebuildPlan.for_disaggregated()
        else:
            plan = DomainRebuildPlan.for_collocated()
        steps = rebuild_domains(self.cluster, plan, self.latency)
        t = self._push_phase(
            t,
            CATEGORY_DISTRIBUTED_GROUPS,
            self.latency.distributed_groups,
            "reassign DP/EP process groups with compacted ranks",
        )
        t = self._push_phase(
            t, CATEGORY_XCCL, self.latency.xccl, "; ".join(s.name for s in steps)
        )
        return t

    def _compile_phases(self, t: float, key: GraphCacheKey) -> float:
        result = compile_graph(key, self.store, self.latency, now=t)
        if result.cache_hit:
            t = self._push_phase(
                t, CATEGORY_READ_CACHE, self.latency.read_cache, f"load cached graph {key.ident()}"
            )
            t = self._push_phase(
                t, CATEGORY_COMPILE, self.latency.cached_compile, f"cached compile {key.ident()}"
            )
        else:
            t = self._push_phase(
                t, CATEGORY_COMPILE, self.latency.full_compile, f"full compile {key.ident()}"
            )
        return t

    def _baseline_pipeline(self, start: float) -> float:
        """Full cached reinitialization: relaunch everything, reload all weights."""
        self._recover_state()
        t = self._push_phase(start, CATEGORY_ENGINE, self.latency.engine, "engine init")
        t = self._push_phase(
            t,
            CATEGORY_EXECUTOR_PROCESSES,
            self.latency.executor_processes,
            "launch executor processes",
        )
        t = self._push_phase(
            t,
            CATEGORY_DISTRIBUTED_GROUPS,
            self.latency.distributed_groups,
            "set up distributed process groups",
        )
        t = self._push_phase(t, CATEGORY_XCCL, self.latency.xccl, "form collective domain")
        t = self._push_phase(
            t, CATEGORY_GENERATOR, self.latency.generator_weight_load, "weight_load"
        )
        t = self._push_phase(
            t, CATEGORY_GENERATOR, self.latency.generator_kv_warmup, "kv_warmup"
        )
        t = self._push_phase(
            t, CATEGORY_READ_CACHE, self.latency.read_cache, "load cached graph"
        )
        t = self._push_phase(
            t, CATEGORY_COMPILE, self.latency.cached_compile, "cached compile"
        )
        t = self._push_phase(t, CATEGORY_OTHER, self.latency.other, "scheduler init; cancellations")
        t = self._push_phase(t, CATEGORY_RESUME, 0.0, "inference resumed")
        return t

    # -- resume and background upgrade -----------------------------------------

    def _on_resume(self, _payload) -> None:
        self.halted = False
        self.recovering = False
        self.resumed = True
        for executor_id in sorted(self.executors):
            try:
                self.monitor.record_heartbeat(executor_id, self.now)
            except KeyError:
                self.monitor.register(executor_id, executor_id, self.now)
        if (
            not self.baseline
            and self.scenario.policy.background_switch
            and self.mask
            and self.cluster.config.mode is DeploymentMode.MA_DISAGGREGATED
            and len(self.cluster.healthy_attention_devices()) >= 2
        ):
            self._begin_background_switch()
        self._wake_steps()

    def _begin_background_switch(self) -> None:
        """Start a role switch behind live traffic; the mask empties when it lands."""
        donor = select_donor(
            self.cluster, {d: ex.active_count() for d, ex in self.executors.items()}
        )
        assert donor is not None
        donor_executor = self.executors.pop(donor)
        pending = sorted(
            s.seq_id for s in donor_executor.sequences.values() if not s.is_finished()
        )
        if pending:
            survivors = {
                d: self.executors[d].active_count()
                for d in self.cluster.healthy_attention_devices()
                if d in self.executors
            }
            assignment = plan_migration(pending, survivors)
            for seq_id in sorted(assignment.targets):
                seq = donor_executor.evict(seq_id)
                self.executors[assignment.targets[seq_id]].adopt_migrated(seq)

        layout = layout_for_cluster(self.cluster)
        upgraded = LayoutDescriptor(
            mode=layout.mode,
            attention=layout.attention - 1,
            moe_native=layout.moe_native,
            moe_converted=layout.moe_converted + 1,
            collocated=layout.collocated,
            dense_groups=layout.dense_groups,
        )
        key = GraphCacheKey(
            mode=upgraded.mode,
            dp_size=upgraded.attention,
            ep_size=upgraded.moe_native + upgraded.moe_converted,
            layout_hash=upgraded.stable_hash(),
        )
        result = compile_graph(key, self.store, self.latency, now=self.now)

        t = self.now
        background = [
            (CATEGORY_ROLE_SWITCH, self.latency.role_switch, "background role switch"),
            (CATEGORY_GENERATOR, self.latency.generator_weight_load, "weight_load"),
            (
                CATEGORY_DISTRIBUTED_GROUPS,
                self.latency.distributed_groups,
                "reassign DP/EP process groups",
            ),
            (CATEGORY_XCCL, self.latency.xccl, "rebuild collective domain with donor"),
        ]
        if result.cache_hit:
            background.append(
                (CATEGORY_READ_CACHE, self.latency.read_cache, f"load cached graph {key.ident()}")
            )
            background.append(
                (CATEGORY_COMPILE, self.latency.cached_compile, f"cached compile {key.ident()}")
            )
        else:
            background.append(
                (CATEGORY_COMPILE, self.latency.full_compile, f"full compile {key.ident()}")
            )
        for category, duration, detail in background:
            self.trace.background.append(
                TracePhase(category, t, t + duration, duration, detail)
            )
            t += duration
        self.background_pending = True
        self.background_upgrade = {"donor": donor}
        self.monitor.deregister(donor)
        self._schedule(t, "background_done")

    def _on_background_done(self, _payload) -> None:
        assert self.background_upgrade is not None
        donor = self.background_upgrade["donor"]
        device = self.cluster.devices[donor]
        device.role = Role.MOE
        device.converted = True
        if donor in self.cluster.dp_members:
            self.cluster.dp_members.remove(donor)
        self.cluster.ep_members.append(donor)
        for expert in sorted(self.mask):
            self.cluster.placement[expert] = [donor]
        self.domains.dp = RankAssignment.from_devices(
            DomainKind.DP_GROUP, [d for d in self.domains.dp.devices() if d != donor]
        )
        self.domains.ep = RankAssignment.from_devices(
            DomainKind.EP_GROUP, list(self.domains.ep.devices()) + [donor]
        )
        if self.domains.trampoline is not None:
            self.domains.trampoline = RankAssignment.from_devices(
                DomainKind.TRAMPOLINE, list(self.domains.trampoline.devices()) + [donor]
            )
        self.mask = frozenset()
        self.background_pending = False
        self.monitor.register(donor, donor, self.now)
        self.trace.events.append(
            {"type": "background_switch_complete", "donor": donor, "at": self.now}
        )


def simulate(
    scenario: Scenario, store: CacheStore | None = None, baseline: bool = False
) -> tuple[RecoveryTrace, Simulation]:
    sim = Simulation(scenario, store=store, baseline=baseline)
    trace = sim.run()
    return trace, sim


def run_scenario(scenario: Scenario, store: CacheStore | None = None) -> RecoveryTrace:
    """Execute the recovery pipeline for a scenario and return its timed trace."""
    trace, _sim = simulate(scenario, store=store)
    return trace


def run_baseline_reinit(scenario: Scenario, store: CacheStore | None = None) -> RecoveryTrace:
    """Cost the same failure handled by restarting the whole instance with a warm cache."""
    trace, _sim = simulate(scenario, store=store, baseline=True)
    return trace


def check_service_invariants(sim: Simulation) -> list[str]:
    """Post-recovery service validation; returns human-readable violations."""
    violations: list[str] = []
    cluster = sim.cluster

    for seq in sim.sequences.values():
        expected_prompt = [
            prompt_token(seq.seq_id, j) for j in range(len(seq.prompt_tokens))
        ]
        if seq.prompt_tokens != expected_prompt:
            violations.append(f"sequence {seq.seq_id} prompt tokens corrupted")
        for i, token in enumerate(seq.decoded_tokens):
            if token != synthetic_token(seq.seq_id, i):
                violations.append(f"sequence {seq.seq_id} decoded token {i} corrupted")
                break
        if seq.is_finished():
            continue
        home = seq.home_executor_id
        if home is None or home not in sim.executors:
            violations.append(f"sequence {seq.seq_id} has no live executor")
            continue
        if cluster.devices[home].health is not Health.HEALTHY:
            violations.append(f"sequence {seq.seq_id} sits on unhealthy device {home}")

    materialized = cluster.materialized_experts()
    missing = {
        e for e in range(cluster.config.num_experts) if e not in materialized
    }
    if missing != set(sim.mask):
        violations.append(
            f"mask {sorted(sim.mask)} does not equal unmaterialized experts {sorted(missing)}"
        )

    if sim.domains.world.entries != sim.world_before.entries:
        violations.append("world group changed during recovery")
    if set(sim.domains.dp.devices()) != set(cluster.dp_members):
        violations.append("DP domain membership diverged from cluster state")
    if set(sim.domains.ep.devices()) != set(cluster.ep_members):
        violations.append("EP domain membership diverged from cluster state")

    for executor in sim.executors.values():
        try:
            executor.block_table.check_invariants()
        except Exception as exc:  # pragma: no cover - surfaced as a violation
            violations.append(f"executor {executor.executor_id} block table: {exc}")

    healthy_groups = cluster.healthy_dense_groups()
    if healthy_groups:
        total = sum(g.weight for g in healthy_groups)
        if abs(total - 1.0) > 1e-9:
            violations.append(f"healthy dense group weights sum to {total}, not 1")
    return violations
