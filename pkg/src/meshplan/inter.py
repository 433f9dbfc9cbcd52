"""Inter-operator pass: operator clustering into layers, the stage-slicing DP
over submesh shapes with t_max enumeration and early pruning, and physical
device assignment via the mesh covering.

Pipeline latency of S stages over B microbatches is
    T* = sum(t_i) + (B - 1) * max(t_i),
with every stage's memory checked as mem_stage + s * mem_act <= mem_device,
s being the 1F1B in-flight count at the stage's position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

from .costs import CostModel, MemoryReport
from .graph import OpGraph
from .intra import PlannerError, StageEvaluation, ViewReport, evaluate_stage, DEFAULT_SOLVER_BUDGET
from .mesh import (ClusterMesh, LogicalMesh, SubmeshAssignment, SubmeshShape,
                   admissible_shapes, concrete_view, cover)

DEFAULT_EPSILON = Fraction(1, 10**6)
DEFAULT_DELTA = 0.1


class InfeasiblePlanError(PlannerError):
    """No stage slicing fits device memory; carries the tightest violation."""

    def __init__(self, message: str, violation: Optional[dict] = None):
        super().__init__(message)
        self.violation = violation or {}


# --- operator clustering ----------------------------------------------------

@dataclass(frozen=True)
class LayerClustering:
    """Contiguous grouping of forward operators into L layers; backward
    operators follow their colocation tag into the same layer."""

    fwd_ids: tuple[int, ...]
    boundaries: tuple[tuple[int, int], ...]   # half-open position ranges
    layer_flop: tuple[int, ...]
    layer_inbound_bytes: tuple[int, ...]
    attached: dict[int, tuple[int, ...]]      # fwd id -> colocated backward ids

    @property
    def num_layers(self) -> int:
        return len(self.boundaries)

    def range_ops(self, lo: int, hi: int) -> list[int]:
        """Original node ids of layers [lo, hi), backward included."""
        out = []
        for layer in range(lo, hi):
            p0, p1 = self.boundaries[layer]
            for pos in range(p0, p1):
                fid = self.fwd_ids[pos]
                out.append(fid)
                out.extend(self.attached.get(fid, ()))
        return sorted(out)

    def range_flop(self, lo: int, hi: int) -> int:
        return sum(self.layer_flop[i] for i in range(lo, hi))

    @property
    def max_inbound_bytes(self) -> int:
        return max(self.layer_inbound_bytes)


def cluster_operators(graph: OpGraph, num_layers: int, delta: float = DEFAULT_DELTA) -> LayerClustering:
    """Optimal contiguous clustering: minimize the maximum bytes any single
    layer receives from earlier operators, subject to each layer's FLOP
    staying within (1 + delta) times the per-layer average; ties resolved by
    minimal per-layer FLOP variance."""
    fwd_ids = tuple(graph.forward_ids())
    K = len(fwd_ids)
    if not 1 <= num_layers <= K:
        raise PlannerError(f"need 1 <= L <= {K}, got {num_layers}")
    if delta < 0:
        raise PlannerError("delta must be >= 0")
    attached: dict[int, list[int]] = {}
    for n in graph.nodes:
        if n.colocate_with is not None:
            attached.setdefault(n.colocate_with, []).append(n.id)
    pos_of = {fid: p for p, fid in enumerate(fwd_ids)}
    flop = [graph.node(fid).flop + sum(graph.node(b).flop for b in attached.get(fid, ()))
            for fid in fwd_ids]
    prefix_flop = [0]
    for f in flop:
        prefix_flop.append(prefix_flop[-1] + f)
    cap = Fraction(prefix_flop[-1]) * (1 + Fraction(delta)) / num_layers

    inbound = _window_inbound_bytes(graph, fwd_ids, pos_of)

    INF = math.inf
    # G[k][r]: min over partitions of positions [0, k) into r layers of the
    # max single-layer inbound bytes.
    G = [[INF] * (num_layers + 1) for _ in range(K + 1)]
    G[0][0] = 0
    for k in range(1, K + 1):
        for r in range(1, min(num_layers, k) + 1):
            best = INF
            for i in range(r - 1, k):
                if prefix_flop[k] - prefix_flop[i] > cap or G[i][r - 1] == INF:
                    continue
                cand = max(G[i][r - 1], inbound[i][k - 1])
                if cand < best:
                    best = cand
            G[k][r] = best
    opt = G[K][num_layers]
    if opt == INF:
        raise PlannerError(
            f"no clustering of {K} operators into {num_layers} layers satisfies the "
            f"FLOP cap; try a larger delta (> {delta})")

    # Second pass: among cost-optimal partitions, minimize sum of squared
    # per-layer FLOPs (equivalent to minimal variance for a fixed mean).
    H: list[list] = [[None] * (num_layers + 1) for _ in range(K + 1)]
    parent = [[None] * (num_layers + 1) for _ in range(K + 1)]
    H[0][0] = 0
    for k in range(1, K + 1):
        for r in range(1, min(num_layers, k) + 1):
            for i in range(r - 1, k):
                w = prefix_flop[k] - prefix_flop[i]
                if w > cap or H[i][r - 1] is None or inbound[i][k - 1] > opt:
                    continue
                cand = H[i][r - 1] + w * w
                if H[k][r] is None or cand < H[k][r]:
                    H[k][r] = cand
                    parent[k][r] = i
    bounds = []
    k, r = K, num_layers
    while r > 0:
        i = parent[k][r]
        bounds.append((i, k))
        k, r = i, r - 1
    bounds.reverse()
    layer_flop = tuple(prefix_flop[b] - prefix_flop[a] for a, b in bounds)
    layer_in = tuple(inbound[a][b - 1] for a, b in bounds)
    return LayerClustering(fwd_ids, tuple(bounds), layer_flop, layer_in,
                           {k: tuple(v) for k, v in attached.items()})


def _window_inbound_bytes(graph: OpGraph, fwd_ids: tuple[int, ...],
                          pos_of: dict[int, int]) -> list[list[int]]:
    """inbound[i][k]: distinct tensor bytes entering positions [i, k] from
    positions before i (forward edges only)."""
    K = len(fwd_ids)
    producers: list[set[int]] = []
    for fid in fwd_ids:
        producers.append({pid for pid, _ in graph.node(fid).inputs if pid in pos_of})
    inbound = [[0] * K for _ in range(K)]
    for i in range(K):
        seen: set[int] = set()
        total = 0
        for k in range(i, K):
            for pid in producers[k]:
                if pos_of[pid] < i and pid not in seen:
                    seen.add(pid)
                    total += graph.node(pid).out_shape.byte_size
            inbound[i][k] = total
    return inbound


# --- pipeline plan ----------------------------------------------------------

@dataclass
class PlanStage:
    index: int
    layers: tuple[int, int]
    op_ids: tuple[int, ...]
    shape: SubmeshShape
    assignment: SubmeshAssignment
    view: LogicalMesh                  # concrete device ids attached
    evaluation: ViewReport
    t: Fraction
    num_inflight: int
    mem: MemoryReport

    @property
    def sub(self):
        return self.evaluation.plan.table.merged.sub


@dataclass
class PipelinePlan:
    graph: OpGraph
    cluster: ClusterMesh
    clustering: LayerClustering
    stages: list[PlanStage]
    num_microbatches: int
    t_star: Fraction
    t_max: Fraction
    epsilon: Fraction
    stats: dict = field(default_factory=dict)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def check_eq1(self) -> bool:
        total = sum((s.t for s in self.stages), Fraction(0))
        slowest = max(s.t for s in self.stages)
        return self.t_star == total + (self.num_microbatches - 1) * slowest


def plan(graph: OpGraph, cluster: ClusterMesh, num_microbatches: int,
         num_layers: Optional[int] = None, delta: float = DEFAULT_DELTA,
         epsilon: Fraction = DEFAULT_EPSILON, prune: bool = True,
         solver_budget: int = DEFAULT_SOLVER_BUDGET,
         cost_model: Optional[CostModel] = None) -> PipelinePlan:
    """Full inter-op pass: cluster, enumerate stage-mesh costs, slice via DP
    over t_max candidates, and assign physical devices.

    With epsilon = 0 the result is the exact optimum of the modeled search
    space; otherwise it is within B * epsilon of it.
    """
    if num_microbatches < 1:
        raise PlannerError("number of microbatches must be >= 1")
    if epsilon < 0:
        raise PlannerError("epsilon must be >= 0")
    cm = cost_model or CostModel(cluster)
    K = len(graph.forward_ids())
    if num_layers is not None:
        L = num_layers
        clustering = cluster_operators(graph, L, delta)
    else:
        # Heuristic default; back off when the FLOP cap admits no clustering
        # at this L (L = 1 always does).
        L = min(K, 2 * cluster.num_devices)
        while True:
            try:
                clustering = cluster_operators(graph, L, delta)
                break
            except PlannerError:
                if L <= 1:
                    raise
                L -= 1
    shapes = admissible_shapes(cluster)
    ND = cluster.num_devices
    max_stages = min(L, ND)

    # Stage-mesh cost table, Alg.-1 style: evaluate every contiguous layer
    # range on every submesh shape (each evaluation solves one ILP per
    # logical view and is memoized by construction).
    evals: dict[tuple[int, int, SubmeshShape], StageEvaluation] = {}
    ilp_solves = 0
    for lo in range(L):
        for hi in range(lo + 1, L + 1):
            ops = clustering.range_ops(lo, hi)
            for shape in shapes:
                if shape.num_devices > ND:
                    continue
                ev = evaluate_stage(graph, ops, shape, cluster, cm, solver_budget)
                ilp_solves += len(ev.views)
                evals[(lo, hi, shape)] = ev

    mem_device = cluster.device_memory

    def t_intra(lo: int, hi: int, shape: SubmeshShape, suffix_stages: int) -> Optional[ViewReport]:
        return evals[(lo, hi, shape)].t_intra(suffix_stages - 1, mem_device)

    candidates = sorted({
        vr.report.t_total
        for (lo, hi, shape), ev in evals.items()
        for s in range(1, max_stages + 1)
        for vr in [ev.t_intra(s - 1, mem_device)] if vr is not None
    })
    if not candidates:
        raise InfeasiblePlanError(*_tightest_violation(evals, mem_device))

    best_t_star: Optional[Fraction] = None
    best_stages: Optional[list[tuple[int, int, SubmeshShape]]] = None
    evaluated = 0
    shape_order = sorted((s for s in shapes if s.num_devices <= ND),
                         key=lambda s: (s.n, s.m))

    # Skip t_max candidates that are not at least epsilon above the previous
    # one by grouping the sorted values into epsilon-wide clusters and
    # evaluating each cluster's largest member. Any plan whose slowest stage
    # falls inside a cluster is admissible at the evaluated cap, which
    # over-charges its latency by less than (B - 1) * epsilon, so the final
    # answer stays within B * epsilon of the optimum (exact when epsilon = 0).
    eval_points = []
    idx = 0
    while idx < len(candidates):
        j = idx
        while j + 1 < len(candidates) and candidates[j + 1] - candidates[idx] < epsilon:
            j += 1
        eval_points.append(candidates[j])
        idx = j + 1

    for t_max in eval_points:
        if prune and best_t_star is not None and num_microbatches * t_max >= best_t_star:
            break
        evaluated += 1
        total, stages = _slice_dp(L, ND, max_stages, shape_order, t_intra, t_max)
        if total is None:
            continue
        t_star = total + (num_microbatches - 1) * t_max
        if best_t_star is None or t_star < best_t_star:
            best_t_star = t_star
            best_stages = stages

    if best_stages is None:
        raise InfeasiblePlanError(*_tightest_violation(evals, mem_device))

    plan_stages = _materialize_stages(graph, cluster, clustering, evals, best_stages)
    slowest = max(s.t for s in plan_stages)
    t_star = sum((s.t for s in plan_stages), Fraction(0)) \
        + (num_microbatches - 1) * slowest
    stats = {
        "layers": L,
        "ilp_solves": ilp_solves,
        "t_max_candidates": len(candidates),
        "t_max_evaluated": evaluated,
        "clustering_max_inbound_bytes": clustering.max_inbound_bytes,
    }
    return PipelinePlan(graph, cluster, clustering, plan_stages, num_microbatches,
                        t_star, slowest, epsilon, stats)


def _slice_dp(L, ND, max_stages, shape_order, t_intra, t_max):
    """Eq.-2 DP: F[s][k][d] = min total latency slicing layers k.. into s
    stages on exactly d devices, stage latencies capped at t_max."""
    INF = None
    F = [[[INF] * (ND + 1) for _ in range(L + 1)] for _ in range(max_stages + 1)]
    choice = [[[None] * (ND + 1) for _ in range(L + 1)] for _ in range(max_stages + 1)]
    F[0][L][0] = Fraction(0)
    for s in range(1, max_stages + 1):
        for k in range(L - 1, -1, -1):
            for d in range(1, ND + 1):
                best = INF
                best_choice = None
                for i in range(k, L):
                    for shape in shape_order:
                        nd = shape.num_devices
                        if nd > d:
                            continue
                        rest = F[s - 1][i + 1][d - nd]
                        if rest is INF:
                            continue
                        vr = t_intra(k, i + 1, shape, s)
                        if vr is None:
                            continue
                        t = vr.report.t_total
                        if t > t_max:
                            continue
                        cand = t + rest
                        if best is INF or cand < best:
                            best = cand
                            best_choice = (i, shape)
                F[s][k][d] = best
                choice[s][k][d] = best_choice
    best_total = INF
    best_s = None
    for s in range(1, max_stages + 1):
        v = F[s][0][ND]
        if v is not INF and (best_total is INF or v < best_total):
            best_total = v
            best_s = s
    if best_total is INF:
        return None, None
    stages = []
    s, k, d = best_s, 0, ND
    while s > 0:
        i, shape = choice[s][k][d]
        stages.append((k, i + 1, shape))
        s, k, d = s - 1, i + 1, d - shape.num_devices
    return best_total, stages


def _materialize_stages(graph, cluster, clustering, evals, stage_specs):
    S = len(stage_specs)
    # Devices assigned larger-first; cover places equal shapes consecutively,
    # keeping neighboring same-shaped stages adjacent.
    order = sorted(range(S), key=lambda idx: (-stage_specs[idx][2].num_devices, idx))
    assignments = cover(cluster, [stage_specs[idx][2] for idx in order])
    by_stage = {idx: a for idx, a in zip(order, assignments)}
    out = []
    for idx, (lo, hi, shape) in enumerate(stage_specs):
        suffix = S - idx
        vr = evals[(lo, hi, shape)].t_intra(suffix - 1, cluster.device_memory)
        assert vr is not None
        assignment = by_stage[idx]
        view = concrete_view(vr.view, assignment, cluster)
        mem = MemoryReport(vr.report.mem_stage, vr.report.mem_act,
                           vr.feasible(suffix, cluster.device_memory))
        out.append(PlanStage(
            index=idx, layers=(lo, hi),
            op_ids=tuple(clustering.range_ops(lo, hi)),
            shape=shape, assignment=assignment, view=view, evaluation=vr,
            t=vr.report.t_total, num_inflight=suffix, mem=mem))
    return out


def _tightest_violation(evals, mem_device):
    worst = None
    for (lo, hi, shape), ev in evals.items():
        for vr in ev.views:
            need = vr.report.mem_stage + vr.report.mem_act
            gap = need - mem_device
            if worst is None or gap < worst["gap"]:
                worst = {
                    "layers": (lo, hi), "shape": (shape.n, shape.m),
                    "view": (vr.view.n_l, vr.view.m_l),
                    "required_bytes": need, "device_memory": mem_device,
                    "gap": gap,
                }
    if worst is None:
        return "no stage evaluation produced any logical view", {}
    if worst["gap"] > 0:
        msg = (f"no feasible plan: tightest memory violation at layers "
               f"{worst['layers']} on shape {worst['shape']} view {worst['view']}: "
               f"needs {worst['required_bytes']} bytes/device, "
               f"device memory is {worst['device_memory']}")
    else:
        msg = (f"no feasible plan: some stage fragments fit device memory "
               f"(closest: layers {worst['layers']} on shape {worst['shape']} view "
               f"{worst['view']}, {worst['required_bytes']} of {worst['device_memory']} "
               f"bytes/device at one microbatch in flight), but no exact device "
               f"tiling satisfies the in-flight memory bound at every pipeline position")
    return msg, worst


def sweep_microbatches(graph: OpGraph, cluster: ClusterMesh,
                       b_list: Sequence[int], **kwargs) -> dict[int, PipelinePlan]:
    """plan() per microbatch count; no state is shared across B values."""
    return {b: plan(graph, cluster, b, **kwargs) for b in b_list}
