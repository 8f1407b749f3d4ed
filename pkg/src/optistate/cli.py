"""Command-line front end.

Subcommands::

    optistate plan      --profile NAME | --scenario FILE   stride choice + assignment
    optistate simulate  --scenario FILE [--out DIR] [--emit-actions]
    optistate execute   --scenario FILE [--out DIR] [--mode virtual|throttled]
    optistate sweep     --scenario FILE [--k-range A:B] [--jobs N] [--out DIR]
    optistate compare   --scenario FILE [--out DIR]

Scenario files are JSON with explicit, unit-suffixed field names (sizes in
``_params``, times in ``_ms``).  Summaries go to stdout as JSON (or CSV
rows with ``--format csv`` where tabular); timelines are written as CSV
traces with the fixed header ``event_id,lane,kind,subgroup,start_ns,
end_ns,bytes``.

Exit codes: 0 success, 2 invalid arguments/scenario, 3 infeasible
configuration (the fast tier cannot hold one in-flight subgroup window).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass

from .catalog import get_profile, list_profiles
from .core import ShardedOptimizer, SystemProfile, footprint
from .executor import AdamHyper, ExecMode, execute_plan, sequential_oracle
from .perfmodel import ALL_CPU, estimate_update_time, optimal_stride
from .scheduler import InfeasibleConfigError, Placement, build_plan
from .sim import (
    ApproachConfig,
    ApproachKind,
    GradFlushStrategy,
    IterationModel,
    Timeline,
    compare_approaches,
    simulate_iteration,
    simulate_update_phase,
    sweep_stride,
)

TRACE_HEADER = ["event_id", "lane", "kind", "subgroup", "start_ns", "end_ns", "bytes"]

# Executing numerics allocates five state arrays; keep demo scenarios small.
MAX_EXECUTE_PARAMS = 1 << 25


class ScenarioError(ValueError):
    """Scenario file failed validation."""


@dataclass
class Scenario:
    profile: SystemProfile
    num_subgroups: int
    subgroup_size: int
    stride: "int | object | None"  # int, ALL_CPU, or None for auto
    static_ratio: float
    placement: Placement
    iteration: IterationModel | None
    approaches: list[ApproachConfig] | None
    seed: int
    raw: dict


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ScenarioError(message)


def _parse_profile(value) -> SystemProfile:
    if isinstance(value, str):
        try:
            return get_profile(value)
        except KeyError as exc:
            raise ScenarioError(str(exc)) from None
    _require(isinstance(value, dict), "profile must be a name or an object")
    fields = dict(value)
    fields.setdefault("name", "inline")
    try:
        return SystemProfile(**fields)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"bad inline profile: {exc}") from None


def _parse_stride(value) -> "int | object | None":
    if value is None or value == "auto":
        return None
    if value == "all_cpu":
        return ALL_CPU
    if isinstance(value, int) and value >= 1:
        return value
    raise ScenarioError(f"stride must be an int >= 1, 'all_cpu' or 'auto', got {value!r}")


def _parse_placement(value) -> Placement:
    if value is None:
        return Placement.STATIC_LAST
    try:
        return Placement(value)
    except ValueError:
        raise ScenarioError(
            f"placement must be one of {[p.value for p in Placement]}, got {value!r}"
        ) from None


def _parse_iteration(value) -> IterationModel | None:
    if value is None:
        return None
    _require(isinstance(value, dict), "iteration must be an object")
    known = {"fwd_ms", "bwd_ms", "recompute", "recompute_factor"}
    unknown = set(value) - known
    _require(not unknown, f"unknown iteration fields: {sorted(unknown)}")
    fwd_ms = value.get("fwd_ms", 0.0)
    bwd_ms = value.get("bwd_ms", 0.0)
    _require(
        isinstance(fwd_ms, (int, float)) and fwd_ms >= 0, "fwd_ms must be >= 0"
    )
    _require(
        isinstance(bwd_ms, (int, float)) and bwd_ms >= 0, "bwd_ms must be >= 0"
    )
    factor = value.get("recompute_factor", 1.33)
    _require(
        isinstance(factor, (int, float)) and factor >= 1.0,
        "recompute_factor must be >= 1.0",
    )
    return IterationModel(
        fwd_ns=math.ceil(fwd_ms * 1e6),
        bwd_ns=math.ceil(bwd_ms * 1e6),
        recompute=bool(value.get("recompute", False)),
        recompute_factor=float(factor),
    )


def _parse_approach(value, index: int) -> ApproachConfig:
    _require(isinstance(value, dict), f"approaches[{index}] must be an object")
    kind = value.get("kind")
    try:
        kind = ApproachKind(kind)
    except ValueError:
        raise ScenarioError(
            f"approaches[{index}].kind must be one of "
            f"{[k.value for k in ApproachKind]}, got {kind!r}"
        ) from None
    name = value.get("name")
    ratio = value.get("static_ratio", 0.0)
    _require(
        isinstance(ratio, (int, float)) and 0.0 <= ratio <= 1.0,
        f"approaches[{index}].static_ratio must be in [0, 1]",
    )
    if kind is ApproachKind.BLOCKING_HOST:
        return ApproachConfig.blocking_host(name or "blocking_host")
    if kind is ApproachKind.BLOCKING_HYBRID:
        return ApproachConfig.blocking_hybrid(float(ratio), name)
    stride = _parse_stride(value.get("stride"))
    _require(stride is not ALL_CPU, f"approaches[{index}]: interleaved needs an int stride or auto")
    placement = _parse_placement(value.get("placement"))
    grad = value.get("grad_flush")
    approach = ApproachConfig.interleaved(stride, float(ratio), placement, name)
    if grad is not None:
        try:
            strategy = GradFlushStrategy(grad)
        except ValueError:
            raise ScenarioError(
                f"approaches[{index}].grad_flush must be one of "
                f"{[g.value for g in GradFlushStrategy]}"
            ) from None
        approach = ApproachConfig(
            name=approach.name,
            kind=approach.kind,
            stride=approach.stride,
            static_ratio=approach.static_ratio,
            placement=approach.placement,
            grad_flush=strategy,
        )
    return approach


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario is not valid JSON: {exc}") from None
    _require(isinstance(raw, dict), "scenario root must be an object")

    _require("profile" in raw, "scenario needs a 'profile'")
    profile = _parse_profile(raw["profile"])

    num = raw.get("num_subgroups")
    _require(isinstance(num, int) and num >= 1, "num_subgroups must be an int >= 1")
    size = raw.get("subgroup_size_params")
    _require(
        isinstance(size, int) and size >= 1,
        "subgroup_size_params must be an int >= 1",
    )

    ratio = raw.get("static_ratio", 0.0)
    _require(
        isinstance(ratio, (int, float)) and 0.0 <= ratio <= 1.0,
        "static_ratio must be in [0, 1]",
    )

    approaches = None
    if "approaches" in raw:
        _require(
            isinstance(raw["approaches"], list) and raw["approaches"],
            "approaches must be a non-empty list",
        )
        approaches = [
            _parse_approach(a, i) for i, a in enumerate(raw["approaches"])
        ]

    seed = raw.get("seed", 0)
    _require(isinstance(seed, int) and seed >= 0, "seed must be an int >= 0")

    return Scenario(
        profile=profile,
        num_subgroups=num,
        subgroup_size=size,
        stride=_parse_stride(raw.get("stride")),
        static_ratio=float(ratio),
        placement=_parse_placement(raw.get("placement")),
        iteration=_parse_iteration(raw.get("iteration")),
        approaches=approaches,
        seed=seed,
        raw=raw,
    )


def _resolved_stride(scenario: Scenario):
    if scenario.stride is None:
        return optimal_stride(scenario.profile).k
    return scenario.stride


def _stride_repr(stride) -> "int | str":
    return "all_cpu" if stride is ALL_CPU else stride


def _write_trace(timeline: Timeline, stream) -> None:
    writer = csv.writer(stream)
    writer.writerow(TRACE_HEADER)
    for ev in timeline.events:
        writer.writerow(
            [
                ev.action.id,
                ev.action.lane.value,
                ev.action.kind.value,
                ev.action.subgroup,
                ev.start_ns,
                ev.end_ns,
                ev.bytes,
            ]
        )


def _emit(args, summary: dict, rows: "list[dict] | None" = None) -> None:
    """Print the summary (JSON, or CSV rows where tabular)."""
    if args.format == "csv" and rows is not None:
        writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    else:
        json.dump(summary, sys.stdout, indent=2, default=str)
        sys.stdout.write("\n")


def _out_path(args, name: str) -> str | None:
    if not args.out:
        return None
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _save_json(path: str | None, payload: dict) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, default=str)
            fh.write("\n")


def cmd_plan(args) -> int:
    if args.scenario:
        scenario = load_scenario(args.scenario)
        profile = scenario.profile
        num, size = scenario.num_subgroups, scenario.subgroup_size
        ratio, placement = scenario.static_ratio, scenario.placement
    else:
        profile = get_profile(args.profile)
        num = args.num_subgroups
        size = args.subgroup_size
        ratio, placement = 0.0, Placement.STATIC_LAST

    result = optimal_stride(profile)
    summary = {
        "profile": profile.name,
        "k_real": result.k_real,
        "k": _stride_repr(result.k),
        "gpu_fraction": result.gpu_fraction,
    }
    if num is not None and size is not None:
        plan = build_plan(num, result.k, static_ratio=ratio, placement=placement)
        est = estimate_update_time(profile, num, size, result.k)
        report = footprint(num * size, size)
        summary.update(
            {
                "num_subgroups": num,
                "subgroup_size_params": size,
                "static_count": plan.static_count,
                "dynamic_fast_subgroups": list(plan.dynamic_fast),
                "cpu_subgroups": sum(1 for d in plan.devices if d.value == "cpu"),
                "estimate_update_s": est,
                "optimizer32_bytes": report.optimizer32_bytes,
                "per_subgroup_window_bytes": report.per_subgroup_state_bytes,
            }
        )
    if profile.caveat:
        summary["profile_caveat"] = profile.caveat
        print(f"note: {profile.caveat}", file=sys.stderr)
    _emit(args, summary)
    _save_json(_out_path(args, "plan.json"), summary)
    return 0


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    stride = _resolved_stride(scenario)
    plan = build_plan(
        scenario.num_subgroups,
        stride,
        static_ratio=scenario.static_ratio,
        placement=scenario.placement,
    )
    timeline = simulate_update_phase(plan, scenario.profile, scenario.subgroup_size)
    summary = {
        "profile": scenario.profile.name,
        "stride": _stride_repr(stride),
        "static_ratio": scenario.static_ratio,
        "num_subgroups": scenario.num_subgroups,
        "subgroup_size_params": scenario.subgroup_size,
        "makespan_ns": timeline.makespan_ns,
        "span_ns": timeline.span_ns,
        "spillover_ns": timeline.spillover_ns,
        "peak_fast_bytes": timeline.peak_fast_bytes,
        "lane_busy_ns": {lane.value: ns for lane, ns in timeline.lane_busy_ns.items()},
        "events": len(timeline.events),
    }
    if scenario.iteration is not None:
        approach = _scenario_approach(scenario, stride)
        report = simulate_iteration(
            approach,
            scenario.profile,
            scenario.num_subgroups,
            scenario.subgroup_size,
            scenario.iteration,
        )
        summary["iteration"] = report.as_row()

    trace_path = _out_path(args, "trace.csv")
    if trace_path:
        with open(trace_path, "w", encoding="utf-8", newline="") as fh:
            _write_trace(timeline, fh)
        summary["trace_csv"] = trace_path
    if args.emit_actions and not trace_path:
        _write_trace(timeline, sys.stdout)
        return 0
    _emit(args, summary)
    _save_json(_out_path(args, "simulate.json"), summary)
    return 0


def _scenario_approach(scenario: Scenario, stride) -> ApproachConfig:
    if stride is ALL_CPU:
        if scenario.static_ratio > 0:
            return ApproachConfig.blocking_hybrid(scenario.static_ratio)
        return ApproachConfig.blocking_host()
    return ApproachConfig.interleaved(
        stride, scenario.static_ratio, scenario.placement
    )


def cmd_execute(args) -> int:
    scenario = load_scenario(args.scenario)
    total = scenario.num_subgroups * scenario.subgroup_size
    if total > MAX_EXECUTE_PARAMS:
        raise ScenarioError(
            f"execute emulates numerics in memory; {total} params exceeds the "
            f"{MAX_EXECUTE_PARAMS} limit — shrink num_subgroups or "
            "subgroup_size_params"
        )
    stride = _resolved_stride(scenario)
    plan = build_plan(
        scenario.num_subgroups,
        stride,
        static_ratio=scenario.static_ratio,
        placement=scenario.placement,
    )
    optimizer = ShardedOptimizer.initialize(
        total, scenario.subgroup_size, seed=scenario.seed
    )
    reference = optimizer.copy()
    hyper = AdamHyper()
    result = execute_plan(
        optimizer,
        plan,
        scenario.profile,
        hyper,
        mode=ExecMode(args.mode),
        throttle_scale=args.throttle_scale,
    )
    sequential_oracle(reference, hyper)
    identical = result.optimizer.state_equal(reference)

    digest = hashlib.sha256()
    for arr in (
        result.optimizer.params32,
        result.optimizer.momentum32,
        result.optimizer.variance32,
        result.optimizer.model16,
    ):
        digest.update(arr.tobytes())

    summary = {
        "profile": scenario.profile.name,
        "stride": _stride_repr(stride),
        "static_ratio": scenario.static_ratio,
        "num_subgroups": scenario.num_subgroups,
        "subgroup_size_params": scenario.subgroup_size,
        "mode": result.mode.value,
        "step": result.step,
        "makespan_ns": result.timeline.makespan_ns,
        "spillover_ns": result.timeline.spillover_ns,
        "matches_sequential_oracle": identical,
        "state_sha256": digest.hexdigest(),
    }
    trace_path = _out_path(args, "execute_trace.csv")
    if trace_path:
        with open(trace_path, "w", encoding="utf-8", newline="") as fh:
            _write_trace(result.timeline, fh)
        summary["trace_csv"] = trace_path
    _emit(args, summary)
    _save_json(_out_path(args, "execute.json"), summary)
    return 0 if identical else 1


def _parse_k_range(text: str) -> range:
    try:
        lo_s, hi_s = text.split(":", 1)
        lo, hi = int(lo_s), int(hi_s)
    except ValueError:
        raise ScenarioError(f"--k-range expects 'LO:HI', got {text!r}") from None
    if lo < 1 or hi < lo:
        raise ScenarioError(f"--k-range needs 1 <= LO <= HI, got {text!r}")
    return range(lo, hi + 1)


def cmd_sweep(args) -> int:
    scenario = load_scenario(args.scenario)
    ks = _parse_k_range(args.k_range)
    result = sweep_stride(
        scenario.profile,
        scenario.num_subgroups,
        scenario.subgroup_size,
        ks,
        jobs=args.jobs,
    )
    rows = [
        {
            "k": e.k,
            "stride": e.stride,
            "makespan_ns": e.makespan_ns,
            "spillover_ns": e.spillover_ns,
            "per_subgroup_ns": e.per_subgroup_ns,
        }
        for e in result.entries
    ]
    summary = {
        "profile": result.profile_name,
        "num_subgroups": result.num_subgroups,
        "subgroup_size_params": result.subgroup_size,
        "best_k": result.best_k,
        "entries": rows,
    }
    csv_path = _out_path(args, "sweep.csv")
    if csv_path:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        summary["sweep_csv"] = csv_path
    _emit(args, summary, rows)
    _save_json(_out_path(args, "sweep.json"), summary)
    return 0


def cmd_compare(args) -> int:
    scenario = load_scenario(args.scenario)
    approaches = scenario.approaches or [
        ApproachConfig.blocking_host(),
        ApproachConfig.blocking_hybrid(0.3),
        ApproachConfig.interleaved(),
    ]
    rows = compare_approaches(
        approaches,
        scenario.profile,
        scenario.num_subgroups,
        scenario.subgroup_size,
        scenario.iteration,
    )
    summary = {
        "profile": scenario.profile.name,
        "num_subgroups": scenario.num_subgroups,
        "subgroup_size_params": scenario.subgroup_size,
        "rows": rows,
    }
    csv_path = _out_path(args, "compare.csv")
    if csv_path:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        summary["compare_csv"] = csv_path
    _emit(args, summary, rows)
    _save_json(_out_path(args, "compare.json"), summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="optistate",
        description="Plan, simulate and execute sharded optimizer-state offloading.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--out", help="directory for result files")
        p.add_argument(
            "--format",
            choices=["json", "csv"],
            default="json",
            help="stdout summary format (default json)",
        )

    p_plan = sub.add_parser("plan", help="choose a stride and show the assignment")
    p_plan.add_argument("--profile", choices=list_profiles())
    p_plan.add_argument("--scenario")
    p_plan.add_argument("--num-subgroups", type=int)
    p_plan.add_argument("--subgroup-size", type=int, metavar="PARAMS")
    common(p_plan)
    p_plan.set_defaults(func=cmd_plan)

    p_sim = sub.add_parser("simulate", help="time the update phase of a scenario")
    p_sim.add_argument("--scenario", required=True)
    p_sim.add_argument(
        "--emit-actions",
        action="store_true",
        help="write the event trace (CSV) to stdout when no --out is given",
    )
    common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_exec = sub.add_parser("execute", help="run the numerics of one update step")
    p_exec.add_argument("--scenario", required=True)
    p_exec.add_argument(
        "--mode", choices=[m.value for m in ExecMode], default="virtual"
    )
    p_exec.add_argument(
        "--throttle-scale",
        type=float,
        default=1e-3,
        help="wall seconds per virtual second in throttled mode",
    )
    common(p_exec)
    p_exec.set_defaults(func=cmd_execute)

    p_sweep = sub.add_parser("sweep", help="makespan vs interleave ratio")
    p_sweep.add_argument("--scenario", required=True)
    p_sweep.add_argument("--k-range", default="1:6", metavar="LO:HI")
    p_sweep.add_argument("--jobs", type=int, default=1)
    common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_cmp = sub.add_parser("compare", help="update/iteration time across approaches")
    p_cmp.add_argument("--scenario", required=True)
    common(p_cmp)
    p_cmp.set_defaults(func=cmd_compare)

    return parser


def main(argv: "list[str] | None" = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "plan" and not args.scenario and not args.profile:
        parser.error("plan needs --profile or --scenario")
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleConfigError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
