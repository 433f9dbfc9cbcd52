"""Command-line front end.

Subcommands: plan, simulate, cover, sweep-b, report. Exit codes: 0 success,
1 usage/config error, 2 infeasibility (memory violation, covering hypothesis
violation, or simulated OOM).
"""
from __future__ import annotations

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .graph import GraphError, OpGraph, ParseError, build_mlp, build_transformer_blocks, parse
from .inter import DEFAULT_DELTA, DEFAULT_EPSILON, InfeasiblePlanError, PipelinePlan, plan as run_plan, sweep_microbatches
from .intra import PlannerError
from .mesh import ClusterMesh, MeshError, SubmeshShape, cover, verify_cover
from .planio import PlanIOError, cluster_from_json, plan_json_text, runtime_from_json, cluster_to_json
from .reshard import SCHEDULES, ReshardError, emit_instructions
from .sharding import SpecError
from .sim import SimError, simulate

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class UsageError(ValueError):
    pass


def _load_doc(path: str) -> dict:
    p = Path(path)
    data = p.read_bytes()
    if p.suffix.lower() == ".toml":
        return tomllib.loads(data.decode("utf-8"))
    return json.loads(data)


def _load_cluster(args, config: dict) -> ClusterMesh:
    if getattr(args, "cluster", None):
        return cluster_from_json(_load_doc(args.cluster))
    if "cluster" in config:
        c = config["cluster"]
        return cluster_from_json(c if isinstance(c, dict) else _load_doc(c))
    raise UsageError("no cluster given: pass --cluster FILE or a [cluster] config section")


def _parse_builder(spec: str) -> OpGraph:
    name, _, rest = spec.partition(":")
    kwargs = {}
    if rest:
        for item in rest.split(","):
            k, _, v = item.partition("=")
            if not _ or not k:
                raise UsageError(f"bad builder argument {item!r}; want key=value")
            kwargs[k.strip()] = int(v)
    try:
        if name == "mlp":
            return build_mlp(kwargs.pop("layers", 2), kwargs.pop("batch", 8),
                             kwargs.pop("hidden", 8),
                             backward=bool(kwargs.pop("backward", 0)), **kwargs)
        if name == "transformer":
            return build_transformer_blocks(
                kwargs.pop("blocks", 1), kwargs.pop("batch", 2),
                kwargs.pop("seq", 4), kwargs.pop("hidden", 8),
                kwargs.pop("heads", 2),
                backward=bool(kwargs.pop("backward", 0)), **kwargs)
    except (GraphError, TypeError) as e:
        raise UsageError(f"builder {spec!r}: {e}") from None
    raise UsageError(f"unknown builder {name!r}; choose mlp or transformer")


def _load_graph(args, config: dict) -> OpGraph:
    graph = getattr(args, "graph", None) or config.get("graph")
    builder = getattr(args, "builder", None) or config.get("builder")
    if bool(graph) == bool(builder):
        raise UsageError("exactly one graph source required: --graph FILE or --builder SPEC")
    if graph:
        return parse(Path(graph).read_bytes())
    return _parse_builder(builder)


def _parse_epsilon(text: Optional[str]):
    if text is None:
        return DEFAULT_EPSILON
    try:
        return Fraction(text)
    except ValueError:
        try:
            return Fraction(float(text))
        except ValueError:
            raise UsageError(f"bad epsilon {text!r}") from None


def _plan_config(args, config: dict) -> dict:
    merged = dict(config)
    for key in ("b", "layers", "delta", "epsilon", "schedule", "seed", "workers"):
        v = getattr(args, key.replace("-", "_"), None)
        if v is not None:
            merged[key] = v
    merged.setdefault("b", 1)
    merged.setdefault("delta", DEFAULT_DELTA)
    merged.setdefault("schedule", "gpipe")
    merged.setdefault("seed", 0)
    merged.setdefault("workers", 1)
    if merged["b"] < 1:
        raise UsageError("b must be >= 1")
    if merged["workers"] < 1:
        raise UsageError("workers must be >= 1")
    if merged["schedule"] not in SCHEDULES:
        raise UsageError(f"schedule must be one of {SCHEDULES}")
    return merged


def _render_report(p: PipelinePlan) -> str:
    lines = [
        f"pipeline plan: {p.num_stages} stage(s), B={p.num_microbatches}, "
        f"T* = {float(p.t_star):.6e} s (= {p.t_star}), slowest stage {float(p.t_max):.6e} s",
        f"cluster: {p.cluster.num_hosts} host(s) x {p.cluster.devices_per_host} device(s)",
        f"{'stage':>5} {'layers':>8} {'ops':>4} {'submesh':>8} {'hosts':>8} "
        f"{'devs':>8} {'view':>6} {'t (s)':>12} {'mem_stage':>10} {'mem_act':>8}",
    ]
    for s in p.stages:
        lines.append(
            f"{s.index:>5} {f'[{s.layers[0]},{s.layers[1]})':>8} {len(s.op_ids):>4} "
            f"{f'{s.shape.n}x{s.shape.m}':>8} {str(list(s.assignment.host_range)):>8} "
            f"{str(list(s.assignment.device_range)):>8} {f'{s.view.n_l}x{s.view.m_l}':>6} "
            f"{float(s.t):>12.6e} {s.mem.mem_stage:>10} {s.mem.mem_act:>8}")
    lines.append("stats: " + json.dumps(p.stats, sort_keys=True))
    return "\n".join(lines) + "\n"


def _volume_factors(config: dict):
    raw = config.get("volume_factors")
    if not raw:
        return None
    from .planio import frac_from
    return {kind: frac_from(v) for kind, v in raw.items()}


def cmd_plan(args) -> int:
    config = _load_doc(args.config) if args.config else {}
    cluster = _load_cluster(args, config)
    graph = _load_graph(args, config)
    merged = _plan_config(args, config)
    epsilon = _parse_epsilon(str(merged["epsilon"]) if "epsilon" in merged else None)
    factors = _volume_factors(config)
    from .costs import CostModel
    p = run_plan(graph, cluster, merged["b"], num_layers=merged.get("layers"),
                 delta=float(merged["delta"]), epsilon=epsilon,
                 cost_model=CostModel(cluster, factors))
    echo = {
        "b": merged["b"], "layers": p.stats["layers"], "delta": float(merged["delta"]),
        "epsilon": [epsilon.numerator, epsilon.denominator],
        "schedule": merged["schedule"], "seed": merged["seed"],
        "workers": merged["workers"],
    }
    if factors:
        echo["volume_factors"] = {k: [v.numerator, v.denominator]
                                  for k, v in sorted(factors.items())}
    text = plan_json_text(p, echo)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(text)
    report = _render_report(p)
    (out / "report.txt").write_text(report)
    sys.stdout.write(report)
    sys.stdout.write(f"plan written to {out / 'plan.json'}\n")
    return 0


def cmd_simulate(args) -> int:
    doc = json.loads(Path(args.plan).read_text())
    runtime = runtime_from_json(doc)
    if args.cluster:
        given = cluster_from_json(_load_doc(args.cluster))
        if cluster_to_json(given) != cluster_to_json(runtime.cluster):
            raise UsageError("--cluster does not match the cluster embedded in the plan")
    schedule = args.schedule or doc.get("config", {}).get("schedule", "gpipe")
    program = emit_instructions(runtime, schedule)
    from .costs import CostModel
    factors = _volume_factors(doc.get("config", {}))
    result = simulate(program, CostModel(runtime.cluster, factors),
                      zero_transfer=(args.transfer == "zero"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sim.json").write_text(result.trace_json() + "\n")
    (out / "gantt.json").write_text(
        json.dumps(result.gantt_rows(program), sort_keys=True, indent=2) + "\n")
    diff = result.makespan - runtime.t_star
    sys.stdout.write(
        f"schedule={schedule} transfer={args.transfer}\n"
        f"T* (planned)      = {float(runtime.t_star):.6e} s\n"
        f"makespan (sim)    = {float(result.makespan):.6e} s\n"
        f"difference        = {float(diff):.6e} s\n")
    return 0


def cmd_cover(args) -> int:
    cluster = ClusterMesh(args.hosts, args.devices_per_host, 1, 1, 0, 1, 1)
    shapes = []
    for part in args.shapes.split(","):
        n, _, m = part.strip().partition("x")
        try:
            shapes.append(SubmeshShape(int(n), int(m)))
        except ValueError:
            raise UsageError(f"bad shape {part!r}; want NxM") from None
    assignments = cover(cluster, shapes)
    ok = verify_cover(cluster, assignments)
    doc = {
        "hosts": args.hosts, "devices_per_host": args.devices_per_host,
        "verified": ok,
        "assignments": [{
            "shape": [a.shape.n, a.shape.m],
            "hosts": list(a.host_range),
            "devices": list(a.device_range),
        } for a in assignments],
    }
    sys.stdout.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return 0 if ok else 2


def cmd_sweep_b(args) -> int:
    config = _load_doc(args.config) if args.config else {}
    cluster = _load_cluster(args, config)
    graph = _load_graph(args, config)
    merged = _plan_config(args, config)
    epsilon = _parse_epsilon(str(merged["epsilon"]) if "epsilon" in merged else None)
    try:
        b_list = [int(b) for b in args.b_list.split(",")]
    except ValueError:
        raise UsageError(f"bad --b-list {args.b_list!r}") from None
    plans = sweep_microbatches(graph, cluster, b_list,
                               num_layers=merged.get("layers"),
                               delta=float(merged["delta"]), epsilon=epsilon)
    rows = {str(b): {
        "t_star": [p.t_star.numerator, p.t_star.denominator],
        "t_star_seconds": float(p.t_star),
        "stages": p.num_stages,
    } for b, p in plans.items()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n")
    sys.stdout.write(f"{'B':>6} {'stages':>7} {'T* (s)':>14}\n")
    for b in b_list:
        p = plans[b]
        sys.stdout.write(f"{b:>6} {p.num_stages:>7} {float(p.t_star):>14.6e}\n")
    return 0


def cmd_report(args) -> int:
    doc = json.loads(Path(args.plan).read_text())
    if doc.get("kind") != "meshplan.plan":
        raise UsageError(f"{args.plan} is not a plan document")
    sys.stdout.write(
        f"plan: {len(doc['stages'])} stage(s), B={doc['num_microbatches']}, "
        f"T* = {doc['t_star_seconds']:.6e} s\n")
    for s in doc["stages"]:
        sys.stdout.write(
            f"  stage {s['index']}: layers {s['layers']}, submesh "
            f"{s['shape'][0]}x{s['shape'][1]} hosts {s['hosts']} devices {s['devices']}, "
            f"view {s['logical_view'][0]}x{s['logical_view'][1]}, "
            f"t = {s['t_seconds']:.6e} s, mem {s['mem_stage']}+{s['mem_act']} B\n")
        for oid in sorted(s["op_specs"], key=int):
            sys.stdout.write(f"    op {oid}: {s['op_specs'][oid]}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="meshplan",
                                 description="two-level parallelization planner")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--graph", help="graph JSON file")
        p.add_argument("--builder", help="builder spec, e.g. mlp:layers=2,batch=8,hidden=8")
        p.add_argument("--cluster", help="cluster TOML/JSON file")
        p.add_argument("--b", type=int, help="number of microbatches")
        p.add_argument("--layers", type=int, help="clustered layer count L")
        p.add_argument("--delta", type=float, help="layer FLOP imbalance tolerance")
        p.add_argument("--epsilon", help="t_max pruning gap in seconds")
        p.add_argument("--schedule", choices=SCHEDULES, help="pipeline schedule")
        p.add_argument("--seed", type=int, help="recorded in outputs")
        p.add_argument("--workers", type=int, help="worker count (planning is deterministic)")
        p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("plan", help="run the full planner")
    common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="simulate a plan file")
    p.add_argument("--plan", required=True, help="plan.json path")
    p.add_argument("--cluster", help="must match the embedded cluster")
    p.add_argument("--schedule", choices=SCHEDULES)
    p.add_argument("--transfer", choices=("model", "zero"), default="model",
                   help="inter-stage transfer cost mode")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cover", help="tile a cluster with submesh shapes")
    p.add_argument("--hosts", type=int, required=True)
    p.add_argument("--devices-per-host", type=int, required=True)
    p.add_argument("--shapes", required=True, help="comma list, e.g. 2x4,1x2,1x1,1x1")
    p.set_defaults(func=cmd_cover)

    p = sub.add_parser("sweep-b", help="plan across several microbatch counts")
    common(p)
    p.add_argument("--b-list", required=True, help="comma list of B values")
    p.set_defaults(func=cmd_sweep_b)

    p = sub.add_parser("report", help="pretty-print a plan file")
    p.add_argument("--plan", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InfeasiblePlanError as e:
        sys.stderr.write(f"infeasible: {e}\n")
        return 2
    except SimError as e:
        sys.stderr.write(f"simulation failed: {e}\n")
        return 2
    except MeshError as e:
        # Covering hypothesis violations are infeasibility, not usage errors.
        if args.command == "cover":
            sys.stderr.write(f"cover precondition violated: {e}\n")
            return 2
        sys.stderr.write(f"error: {e}\n")
        return 1
    except (UsageError, GraphError, ParseError, PlanIOError, PlannerError,
            SpecError, ReshardError, OSError, json.JSONDecodeError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
