"""Published plan-file format.

A plan document is self-contained: it embeds the graph, the cluster
description, and per-stage placement, latency, memory, and boundary tensor
layouts, so the orchestrator and simulator can run from the file alone.
Serialization is deterministic (sorted keys, exact rationals as [num, den]).
"""
from __future__ import annotations

import json
from fractions import Fraction
from typing import Optional, Union

from . import graph as graph_mod
from .inter import PipelinePlan
from .mesh import ClusterMesh, LogicalMesh
from .reshard import RuntimePlan, RuntimeStage
from .sharding import format_spec, parse_spec

PLAN_KIND = "meshplan.plan"


class PlanIOError(ValueError):
    """Raised when a plan or cluster document is rejected."""


def frac_pair(f: Fraction) -> list[int]:
    return [f.numerator, f.denominator]


def frac_from(v: Union[int, float, list, tuple]) -> Fraction:
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise PlanIOError(f"rational must be [num, den], got {v!r}")
        return Fraction(int(v[0]), int(v[1]))
    return Fraction(v)


_CLUSTER_KEYS = ("hosts", "devices_per_host", "intra_bw", "inter_bw", "alpha",
                 "device_flops", "device_memory")


def cluster_to_json(cluster: ClusterMesh) -> dict:
    return {
        "hosts": cluster.num_hosts,
        "devices_per_host": cluster.devices_per_host,
        "intra_bw": frac_pair(cluster.intra_host_bw),
        "inter_bw": frac_pair(cluster.inter_host_bw),
        "alpha": frac_pair(cluster.alpha_latency),
        "device_flops": frac_pair(cluster.device_flops),
        "device_memory": cluster.device_memory,
    }


def cluster_from_json(doc: dict) -> ClusterMesh:
    missing = [k for k in _CLUSTER_KEYS if k not in doc]
    if missing:
        raise PlanIOError(f"cluster config missing keys {missing}")
    unknown = set(doc) - set(_CLUSTER_KEYS)
    if unknown:
        raise PlanIOError(f"cluster config has unknown keys {sorted(unknown)}")
    return ClusterMesh(
        num_hosts=int(doc["hosts"]),
        devices_per_host=int(doc["devices_per_host"]),
        intra_host_bw=frac_from(doc["intra_bw"]),
        inter_host_bw=frac_from(doc["inter_bw"]),
        alpha_latency=frac_from(doc["alpha"]),
        device_flops=frac_from(doc["device_flops"]),
        device_memory=int(doc["device_memory"]),
    )


def plan_to_json(plan: PipelinePlan, config: Optional[dict] = None) -> dict:
    stages = []
    for s in plan.stages:
        sub = s.sub
        specs = s.evaluation.plan.node_specs()
        op_specs = {}
        for local, orig in enumerate(sub.orig_of):
            if local in sub.boundary_inputs:
                continue
            op_specs[str(orig)] = format_spec(specs[local])
        boundary_in = {str(sub.orig_of[local]): format_spec(specs[local])
                       for local in sub.boundary_inputs}
        boundary_out = {str(sub.orig_of[local]): format_spec(specs[local])
                        for local in sub.boundary_outputs}
        stages.append({
            "index": s.index,
            "layers": list(s.layers),
            "op_ids": list(s.op_ids),
            "shape": [s.shape.n, s.shape.m],
            "hosts": list(s.assignment.host_range),
            "devices": list(s.assignment.device_range),
            "logical_view": [s.view.n_l, s.view.m_l],
            "axis_bw": [frac_pair(b) for b in s.view.axis_bandwidth],
            "device_ids": list(s.view.device_ids),
            "t": frac_pair(s.t),
            "t_seconds": float(s.t),
            "num_inflight": s.num_inflight,
            "mem_stage": s.mem.mem_stage,
            "mem_act": s.mem.mem_act,
            "op_specs": op_specs,
            "boundary_inputs": boundary_in,
            "boundary_outputs": boundary_out,
            "ilp_certified": s.evaluation.plan.certified,
        })
    return {
        "version": 1,
        "kind": PLAN_KIND,
        "config": dict(config or {}),
        "cluster": cluster_to_json(plan.cluster),
        "graph": json.loads(graph_mod.serialize(plan.graph)),
        "clustering": {"boundaries": [list(b) for b in plan.clustering.boundaries]},
        "num_microbatches": plan.num_microbatches,
        "t_star": frac_pair(plan.t_star),
        "t_star_seconds": float(plan.t_star),
        "t_max": frac_pair(plan.t_max),
        "epsilon": frac_pair(plan.epsilon),
        "stats": plan.stats,
        "stages": stages,
    }


def plan_json_text(plan: PipelinePlan, config: Optional[dict] = None) -> str:
    return json.dumps(plan_to_json(plan, config), sort_keys=True, indent=2) + "\n"


def runtime_from_json(doc: dict) -> RuntimePlan:
    if doc.get("kind") != PLAN_KIND or doc.get("version") != 1:
        raise PlanIOError("not a meshplan plan document")
    graph = graph_mod.parse(json.dumps(doc["graph"]).encode("utf-8"))
    cluster = cluster_from_json(doc["cluster"])
    stages = []
    for sd in doc["stages"]:
        view = LogicalMesh(
            n_l=sd["logical_view"][0], m_l=sd["logical_view"][1],
            axis_bandwidth=(frac_from(sd["axis_bw"][0]), frac_from(sd["axis_bw"][1])),
            device_ids=tuple(sd["device_ids"]),
        )
        stages.append(RuntimeStage(
            index=sd["index"], view=view, op_ids=tuple(sd["op_ids"]),
            t=frac_from(sd["t"]), mem_stage=sd["mem_stage"], mem_act=sd["mem_act"],
            output_specs={int(k): parse_spec(v) for k, v in sd["boundary_outputs"].items()},
            input_specs={int(k): parse_spec(v) for k, v in sd["boundary_inputs"].items()},
        ))
    stages.sort(key=lambda s: s.index)
    seen_devices: set[int] = set()
    for s in stages:
        ids = set(s.view.device_ids)
        if ids & seen_devices:
            raise PlanIOError(f"stage {s.index} reuses devices of an earlier stage")
        seen_devices |= ids
    if seen_devices != set(range(cluster.num_devices)):
        raise PlanIOError("plan stages do not cover the cluster devices exactly")
    return RuntimePlan(graph, cluster, tuple(stages), int(doc["num_microbatches"]),
                       frac_from(doc["t_star"]))


def runtime_from_plan(plan: PipelinePlan) -> RuntimePlan:
    """Direct conversion without the file round-trip."""
    return runtime_from_json(plan_to_json(plan))
