"""Command-line entry point: scenario runs, trace comparison, precompile
management, router experiments, and state inspection.

Exit codes: 0 success/recovered, 2 usage or parse error, 3 aborted recovery,
4 I/O error, 5 simulation invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .compilecache import CacheStore, precompile_failure_scenarios
from .errors import IntegrityError, ScenarioError
from .latency import PROFILES
from .orchestrator import run_baseline_reinit, simulate
from .routing import (
    count_activations,
    random_logits,
    select_failed_every_nth,
    select_failed_task_based,
)
from .scenario import load_scenario
from .trace import OUTCOME_RECOVERED, RecoveryTrace, compare_traces

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ABORTED = 3
EXIT_IO = 4
EXIT_INVARIANT = 5

STORE_ENV_VAR = "MOERECOVERY_STORE"


def _store_from_args(args: argparse.Namespace) -> CacheStore | None:
    store_dir = getattr(args, "store", None) or os.environ.get(STORE_ENV_VAR)
    if store_dir:
        return CacheStore(directory=Path(store_dir))
    return None


def _load(path: str):
    scenario = load_scenario(path)
    return scenario


def cmd_run(args: argparse.Namespace) -> int:
    try:
        scenario = _load(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        from dataclasses import replace

        scenario = replace(scenario, seed=args.seed)
    if args.profile is not None:
        if args.profile not in PROFILES:
            print(f"error: unknown profile {args.profile!r}", file=sys.stderr)
            return EXIT_USAGE
        from dataclasses import replace

        scenario = replace(scenario, latency=PROFILES[args.profile](scenario.deployment.mode))

    store = _store_from_args(args)
    try:
        if args.baseline:
            trace = run_baseline_reinit(scenario, store=store)
        else:
            trace, _sim = simulate(scenario, store=store)
    except IntegrityError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT

    payload = trace.to_jsonl()
    if args.out and args.out != "-":
        try:
            Path(args.out).write_text(payload)
        except OSError as exc:
            print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"{trace.scenario_id}: {trace.outcome}, total {trace.total:.3f} s")
    else:
        sys.stdout.write(payload)
    return EXIT_OK if trace.outcome == OUTCOME_RECOVERED else EXIT_ABORTED


def cmd_compare(args: argparse.Namespace) -> int:
    traces = []
    for path in (args.recovery_trace, args.baseline_trace):
        try:
            traces.append(RecoveryTrace.from_jsonl(Path(path).read_text()))
        except OSError as exc:
            print(f"error: cannot read {path}: {exc}", file=sys.stderr)
            return EXIT_IO
        except ValueError as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            return EXIT_USAGE
    try:
        comparison = compare_traces(traces[0], traces[1])
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for warning in comparison.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    table = comparison.format_table()
    print(table)
    if args.out:
        try:
            Path(args.out).write_text(table + "\n")
        except OSError as exc:
            print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
            return EXIT_IO
    return EXIT_OK


def cmd_precompile(args: argparse.Namespace) -> int:
    try:
        scenario = _load(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    store_dir = args.store or os.environ.get(STORE_ENV_VAR)
    if not store_dir:
        print("error: --store (or MOERECOVERY_STORE) is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        store = CacheStore(directory=Path(store_dir))
        existing = len(store)
        created = precompile_failure_scenarios(scenario.deployment, store, now=0.0)
    except OSError as exc:
        print(f"error: cache store {store_dir}: {exc}", file=sys.stderr)
        return EXIT_IO
    for key in created:
        print(key.ident())
    print(f"{len(created)} new, {existing} existing")
    return EXIT_OK


def cmd_route_sim(args: argparse.Namespace) -> int:
    logits = random_logits(args.tokens, args.experts, args.seed)
    baseline_counts = count_activations(logits, args.top_k, frozenset())
    if args.selection == "task-based":
        mask = select_failed_task_based(baseline_counts.tolist(), args.fraction)
    else:
        mask = select_failed_every_nth(args.experts, args.fraction)
    counts = count_activations(logits, args.top_k, mask)

    print(f"experts={args.experts} top_k={args.top_k} fraction={args.fraction} "
          f"selection={args.selection} seed={args.seed}")
    print(f"masked ({len(mask)}): {sorted(mask)}")
    print("expert activation counts with mask:")
    for expert in range(args.experts):
        marker = " masked" if expert in mask else ""
        print(f"  {expert:>4} {int(counts[expert]):>8}{marker}")

    checks = {
        "masked_never_selected": all(counts[e] == 0 for e in mask),
        "count_conservation": int(counts.sum()) == args.tokens * args.top_k,
        "mask_size_is_floor": len(mask) == int(args.experts * args.fraction + 1e-9),
    }
    for name, ok in checks.items():
        print(f"check {name}: {'ok' if ok else 'FAILED'}")
    return EXIT_OK if all(checks.values()) else EXIT_INVARIANT


def cmd_inspect(args: argparse.Namespace) -> int:
    try:
        scenario = _load(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    store = _store_from_args(args)
    trace, sim = simulate(scenario, store=store)
    state = {
        "scenario": scenario.name,
        "outcome": trace.outcome,
        "total": trace.total,
        "cluster": sim.cluster.describe(),
        "expert_mask": sorted(sim.mask),
        "domains": sim.domains.describe(),
        "executors": {
            str(device_id): {
                "sequences": [
                    {
                        "seq_id": seq.seq_id,
                        "phase": seq.phase.value,
                        "prompt_len": len(seq.prompt_tokens),
                        "decoded_len": len(seq.decoded_tokens),
                    }
                    for seq in sorted(ex.sequences.values(), key=lambda s: s.seq_id)
                ],
            }
            for device_id, ex in sorted(sim.executors.items())
        },
    }
    print(json.dumps(state, indent=2, sort_keys=True))
    return EXIT_OK if trace.outcome == OUTCOME_RECOVERED else EXIT_ABORTED


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        scenario = _load(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"{scenario.name}: ok")
    return EXIT_OK


def _parse_fraction(text: str) -> float:
    if "/" in text:
        numerator, denominator = text.split("/", 1)
        return float(numerator) / float(denominator)
    return float(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moerecovery",
        description="Deterministic failure-recovery simulator for MoE serving clusters",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a scenario and write its recovery trace")
    run.add_argument("--scenario", required=True)
    run.add_argument("--out", default="-", help="trace output path (default stdout)")
    run.add_argument("--store", default=None, help="graph cache store directory")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--profile", default=None, help=f"latency profile {sorted(PROFILES)}")
    run.add_argument("--baseline", action="store_true", help="cost a full cached reinitialization")
    run.set_defaults(func=cmd_run)

    compare = sub.add_parser("compare", help="compare a recovery trace against a baseline trace")
    compare.add_argument("recovery_trace")
    compare.add_argument("baseline_trace")
    compare.add_argument("--out", default=None)
    compare.set_defaults(func=cmd_compare)

    precompile = sub.add_parser("precompile", help="populate the graph cache for failure scenarios")
    precompile.add_argument("--scenario", required=True)
    precompile.add_argument("--store", default=None)
    precompile.set_defaults(func=cmd_precompile)

    route = sub.add_parser("route-sim", help="run routing-mask experiments")
    route.add_argument("--experts", type=int, default=64)
    route.add_argument("--top-k", type=int, default=8)
    route.add_argument("--fraction", type=_parse_fraction, default=1 / 32)
    route.add_argument("--selection", choices=("task-based", "every-nth"), default="every-nth")
    route.add_argument("--tokens", type=int, default=2048)
    route.add_argument("--seed", type=int, default=0)
    route.set_defaults(func=cmd_route_sim)

    inspect = sub.add_parser("inspect", help="run a scenario and dump post-recovery state")
    inspect.add_argument("--scenario", required=True)
    inspect.add_argument("--store", default=None)
    inspect.set_defaults(func=cmd_inspect)

    validate = sub.add_parser("validate", help="parse and validate a scenario file")
    validate.add_argument("--scenario", required=True)
    validate.set_defaults(func=cmd_validate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
