"""Intra-operator pass: stage subgraph extraction, trivial-op merging, the
per-stage strategy ILP (one-hot node strategies plus linearized edge
resharding terms) with an exact branch-and-bound solver, the ZeRO-style
all-reduce rewrite, and stage evaluation across logical mesh views.

Compute cost vectors d_v are kept at zero inside the objective (heavy
operators divide work evenly, so all strategies tie); the analytic compute
term is added at stage level instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

from .costs import ZERO, CostModel, StageCostReport
from .graph import OpGraph, OpKind, OpNode, TensorShape, TRIVIAL_KINDS
from .mesh import ClusterMesh, LogicalMesh, SubmeshShape, logical_views
from .sharding import (ALL_GATHER, ALL_REDUCE, REDUCE_SCATTER, Collective,
                       ParallelAlgorithm, ShardingSpec, SpecError,
                       enumerate_algorithms, replicated_spec, resharding_cost)

DEFAULT_SOLVER_BUDGET = 200_000


class PlannerError(ValueError):
    """Raised on malformed planner inputs."""


# --- stage subgraphs --------------------------------------------------------

@dataclass(frozen=True)
class StageSubgraph:
    """A contiguous operator range plus injected boundary inputs, re-indexed
    with dense local ids."""

    graph: OpGraph
    orig_of: tuple[int, ...]            # local id -> producing original node
    boundary_inputs: tuple[int, ...]    # local ids injected for external tensors
    boundary_outputs: tuple[int, ...]   # local ids leaving the stage
    grad_locals: frozenset[int]         # local ids producing parameter gradients

    def local_of(self, orig: int) -> int:
        return self.orig_of.index(orig)


def extract_stage(graph: OpGraph, op_ids: Sequence[int]) -> StageSubgraph:
    members = sorted(set(op_ids))
    member_set = set(members)
    externals = sorted({pid for oid in members for pid, _ in graph.node(oid).inputs
                        if pid not in member_set})
    local: dict[int, int] = {}
    nodes: list[OpNode] = []
    for pid in externals:
        local[pid] = len(nodes)
        nodes.append(OpNode(len(nodes), OpKind.INPUT, (), graph.node(pid).out_shape))
    grad_locals = set()
    for oid in members:
        n = graph.node(oid)
        local[oid] = len(nodes)
        if n.grad_of is not None:
            grad_locals.add(local[oid])
        nodes.append(OpNode(
            len(nodes), n.kind, tuple((local[pid], 0) for pid, _ in n.inputs),
            n.out_shape, n.flop, reduce_axis=n.reduce_axis))
    consumers = graph.consumers()
    boundary_out = [local[oid] for oid in members
                    if oid in graph.outputs
                    or any(c not in member_set for c in consumers[oid])]
    if not boundary_out:
        boundary_out = [local[members[-1]]]
    orig_of = tuple(externals + members)
    sub = OpGraph(tuple(nodes), tuple(boundary_out))
    return StageSubgraph(sub, orig_of, tuple(local[p] for p in externals),
                         tuple(boundary_out), frozenset(grad_locals))


# --- trivial-op merging -----------------------------------------------------

@dataclass(frozen=True)
class MergedGraph:
    """Reduced strategy graph: one entry per merge group, rooted at the node
    every trivial follower was folded into."""

    sub: StageSubgraph
    roots: tuple[int, ...]                       # local ids, topological order
    members: dict[int, tuple[int, ...]]          # root -> members (topo order)
    parent: dict[int, int]                       # member -> in-group operand
    # (producer_root, consumer_root) -> list of (producer_node, consumer_node, slot)
    edges: dict[tuple[int, int], tuple[tuple[int, int, int], ...]]


def merge_trivial(sub: StageSubgraph) -> MergedGraph:
    """Fold elementwise/reshape/reduction nodes into their deepest operand.

    Depth is the longest-path layer index from the stage inputs; merged nodes
    later take their group's propagated sharding spec and contribute no
    communication of their own.
    """
    g = sub.graph
    depth: dict[int, int] = {}
    for n in g.nodes:
        depth[n.id] = 1 + max((depth[pid] for pid, _ in n.inputs), default=-1)
    root: dict[int, int] = {}
    for n in g.nodes:
        if n.kind in TRIVIAL_KINDS and n.inputs:
            deepest = max(n.inputs, key=lambda e: depth[e[0]])[0]
            root[n.id] = root[deepest]
        else:
            root[n.id] = n.id
    roots = tuple(sorted({r for r in root.values()}))
    members: dict[int, list[int]] = {r: [] for r in roots}
    parent: dict[int, int] = {}
    for n in g.nodes:
        members[root[n.id]].append(n.id)
        if root[n.id] != n.id:
            parent[n.id] = max(n.inputs, key=lambda e: depth[e[0]])[0]
    edges: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
    for n in g.nodes:
        for slot, (pid, _) in enumerate(n.inputs):
            if root[pid] != root[n.id]:
                key = (root[pid], root[n.id])
                edges.setdefault(key, []).append((pid, n.id, slot))
    return MergedGraph(sub, roots, {r: tuple(m) for r, m in members.items()},
                       parent, {k: tuple(v) for k, v in edges.items()})


def propagate_specs(merged: MergedGraph, root_id: int,
                    root_spec: ShardingSpec) -> dict[int, ShardingSpec]:
    """Spec of every group member given the root's output spec."""
    g = merged.sub.graph
    specs = {root_id: root_spec}
    for mid in merged.members[root_id]:
        if mid == root_id:
            continue
        node = g.node(mid)
        src = specs[merged.parent[mid]]
        specs[mid] = _propagate_one(node, g.node(merged.parent[mid]).out_shape, src)
    return specs


def _propagate_one(node: OpNode, in_shape: TensorShape,
                   spec: ShardingSpec) -> ShardingSpec:
    if node.kind == OpKind.ELEMENTWISE:
        return spec
    if node.kind == OpKind.REDUCTION:
        dims = tuple(d for i, d in enumerate(spec.dims) if i != node.reduce_axis)
        return ShardingSpec(dims) if dims else replicated_spec(1)
    # Reshape: keep the spec through identity and pure transposes, otherwise
    # fall back to replicated (layout barrier).
    out_dims = node.out_shape.dims
    in_dims = in_shape.dims
    if out_dims == in_dims:
        return spec
    if len(in_dims) == 2 and out_dims == in_dims[::-1]:
        return ShardingSpec(spec.dims[::-1])
    if (len(in_dims) == 3 and len(out_dims) == 3 and out_dims[0] == in_dims[0]
            and out_dims[1:] == in_dims[:0:-1]):
        return ShardingSpec((spec.dims[0], spec.dims[2], spec.dims[1]))
    return replicated_spec(len(out_dims))


# --- strategy table & ILP ---------------------------------------------------

@dataclass
class StrategyTable:
    merged: MergedGraph
    mesh: LogicalMesh
    algorithms: list[list[ParallelAlgorithm]]    # per reduced node
    c: list[list[Fraction]]                      # communication seconds
    d: list[list[Fraction]]                      # compute seconds (all zero)
    edges: list[tuple[int, int, list[list[Fraction]]]]

    @property
    def num_nodes(self) -> int:
        return len(self.c)

    def k(self, i: int) -> int:
        return len(self.c[i])

    def search_space(self) -> int:
        out = 1
        for ci in self.c:
            out *= len(ci)
        return out

    def evaluate(self, choice: Sequence[int]) -> Fraction:
        total = ZERO
        for i, j in enumerate(choice):
            total += self.c[i][j] + self.d[i][j]
        for u, v, matrix in self.edges:
            total += matrix[choice[u]][choice[v]]
        return total


def build_ilp(merged: MergedGraph, mesh: LogicalMesh,
              cost_model: CostModel) -> StrategyTable:
    """Strategy table for the reduced stage graph on one logical mesh view."""
    g = merged.sub.graph
    index = {r: i for i, r in enumerate(merged.roots)}
    algorithms: list[list[ParallelAlgorithm]] = []
    specs_cache: list[list[dict[int, ShardingSpec]]] = []
    c: list[list[Fraction]] = []
    for r in merged.roots:
        node = g.node(r)
        in_shapes = tuple(g.node(pid).out_shape for pid, _ in node.inputs)
        algs = enumerate_algorithms(node, mesh, in_shapes)
        if not algs:
            raise PlannerError(f"no feasible strategy for node {r} ({node.kind.value}) "
                               f"on mesh {mesh.n_l}x{mesh.m_l}")
        algorithms.append(algs)
        specs_cache.append([propagate_specs(merged, r, a.output_spec) for a in algs])
        c.append([cost_model.collectives_time(a.comm, mesh) for a in algs])

    edges = []
    reshard_memo: dict = {}
    for (ur, vr), provenance in sorted(merged.edges.items()):
        u, v = index[ur], index[vr]
        matrix = [[ZERO] * len(algorithms[v]) for _ in range(len(algorithms[u]))]
        for i in range(len(algorithms[u])):
            for j in range(len(algorithms[v])):
                total = ZERO
                for producer, consumer, slot in provenance:
                    src = specs_cache[u][i][producer]
                    dst = _required_spec(merged, algorithms[v][j], specs_cache[v][j],
                                         consumer, slot)
                    shape = g.node(producer).out_shape
                    key = (src, dst, shape.dims, shape.elem_bytes)
                    t = reshard_memo.get(key)
                    if t is None:
                        t = cost_model.collectives_time(
                            resharding_cost(src, dst, shape, mesh), mesh)
                        reshard_memo[key] = t
                    total += t
                matrix[i][j] = total
        edges.append((u, v, matrix))
    d = [[ZERO] * len(a) for a in algorithms]
    return StrategyTable(merged, mesh, algorithms, c, d, edges)


def _required_spec(merged: MergedGraph, alg: ParallelAlgorithm,
                   group_specs: dict[int, ShardingSpec], consumer: int,
                   slot: int) -> ShardingSpec:
    # Consumer is either its group's root (use the algorithm's declared input
    # spec) or a spec-aligned trivial member (operands share its own spec).
    if consumer in merged.parent:
        return group_specs[consumer]
    return alg.input_specs[slot]


@dataclass
class Rewrite:
    """ZeRO-style realization of a gradient all-reduce."""

    reduced_index: int
    local_node: int
    original: Collective
    realized: tuple[Collective, Collective]


@dataclass
class IntraPlan:
    table: StrategyTable
    choice: list[int]
    objective: Fraction
    certified: bool
    rewrites: list[Rewrite] = field(default_factory=list)

    def node_specs(self) -> dict[int, ShardingSpec]:
        """Chosen sharding spec of every local node in the stage subgraph."""
        out: dict[int, ShardingSpec] = {}
        merged = self.table.merged
        for i, r in enumerate(merged.roots):
            alg = self.table.algorithms[i][self.choice[i]]
            out.update(propagate_specs(merged, r, alg.output_spec))
        return out

    def chosen_algorithms(self) -> list[ParallelAlgorithm]:
        return [self.table.algorithms[i][j] for i, j in enumerate(self.choice)]

    def edge_collectives(self) -> list[tuple[tuple[int, int], list[Collective]]]:
        """Resharding collectives per reduced edge at the chosen assignment."""
        merged = self.table.merged
        g = merged.sub.graph
        index = {r: i for i, r in enumerate(merged.roots)}
        out = []
        for (ur, vr), provenance in sorted(merged.edges.items()):
            u, v = index[ur], index[vr]
            specs_u = propagate_specs(merged, ur,
                                      self.table.algorithms[u][self.choice[u]].output_spec)
            alg_v = self.table.algorithms[v][self.choice[v]]
            specs_v = propagate_specs(merged, vr, alg_v.output_spec)
            collectives = []
            for producer, consumer, slot in provenance:
                src = specs_u[producer]
                dst = _required_spec(merged, alg_v, specs_v, consumer, slot)
                collectives.extend(resharding_cost(src, dst, g.node(producer).out_shape,
                                                   self.table.mesh))
            out.append(((ur, vr), collectives))
        return out

    def replicated_grad_bytes(self) -> int:
        """Per-device bytes of gradient tensors held fully replicated for the
        weight update; the ZeRO rewrite shards them across the reduce group."""
        merged = self.table.merged
        mesh = self.table.mesh
        rewritten = {(rw.reduced_index, rw.original) for rw in self.rewrites}
        total = 0
        for i, r in enumerate(merged.roots):
            if r not in merged.sub.grad_locals:
                continue
            for coll in self.table.algorithms[i][self.choice[i]].comm:
                if coll.kind != ALL_REDUCE:
                    continue
                d = mesh.group_extent(coll.axes)
                if (i, coll) in rewritten:
                    total += coll.bytes // d
                else:
                    total += coll.bytes
        return total


def solve_ilp(table: StrategyTable, budget: int = DEFAULT_SOLVER_BUDGET) -> IntraPlan:
    """Exact branch-and-bound over the one-hot strategy assignment.

    Lower bound: accumulated cost plus per-node minima (including already
    assigned incident edges) plus the matrix minimum of untouched edges.
    Deterministic: strategies explored in index order, strict improvement
    only, so ties resolve to the lowest strategy indices.
    """
    n = table.num_nodes
    if n == 0:
        raise PlannerError("empty strategy table")
    in_edges: list[list[tuple[int, list[list[Fraction]]]]] = [[] for _ in range(n)]
    for u, v, matrix in table.edges:
        lo, hi = (u, v) if u < v else (v, u)
        # Edge charged when its later endpoint is assigned.
        in_edges[hi].append((lo, matrix if lo == u else _transpose(matrix)))
    node_min = [min(ci) for ci in table.c]
    # Suffix bound: nodes >= t plus edges whose later endpoint is >= t.
    suffix = [ZERO] * (n + 1)
    for t in range(n - 1, -1, -1):
        suffix[t] = suffix[t + 1] + node_min[t]
        for _, matrix in in_edges[t]:
            suffix[t] += min(min(row) for row in matrix)

    greedy = _greedy_assignment(table, in_edges)
    best_choice = list(greedy)
    best_cost = table.evaluate(greedy)

    choice = [0] * n
    explored = 0
    certified = True

    def dfs(t: int, acc: Fraction) -> None:
        nonlocal best_cost, best_choice, explored, certified
        if explored >= budget:
            certified = False
            return
        explored += 1
        if t == n:
            if acc < best_cost:
                best_cost = acc
                best_choice = choice.copy()
            return
        options = []
        for j in range(table.k(t)):
            step = table.c[t][j]
            for lo, matrix in in_edges[t]:
                step += matrix[choice[lo]][j]
            options.append((step, j))
        for step, j in options:
            lb = acc + step + suffix[t + 1]
            if lb >= best_cost:
                continue
            choice[t] = j
            dfs(t + 1, acc + step)
            if explored >= budget:
                return

    dfs(0, ZERO)
    return IntraPlan(table, best_choice, best_cost, certified)


def _transpose(matrix: list[list[Fraction]]) -> list[list[Fraction]]:
    return [list(row) for row in zip(*matrix)]


def _greedy_assignment(table: StrategyTable,
                       in_edges: list[list[tuple[int, list[list[Fraction]]]]]) -> list[int]:
    choice: list[int] = []
    for t in range(table.num_nodes):
        best_j, best_val = 0, None
        for j in range(table.k(t)):
            val = table.c[t][j]
            for lo, matrix in in_edges[t]:
                val += matrix[choice[lo]][j]
            if best_val is None or val < best_val:
                best_j, best_val = j, val
        choice.append(best_j)
    return choice


def post_ilp_rewrite(plan: IntraPlan) -> IntraPlan:
    """Annotate gradient all-reduces as reduce-scatter + all-gather.

    Communication volume (and the modeled objective) is unchanged; the
    per-device replicated gradient bytes shrink by the reduce-group size.
    """
    merged = plan.table.merged
    rewrites = []
    for i, r in enumerate(merged.roots):
        if r not in merged.sub.grad_locals:
            continue
        for coll in plan.table.algorithms[i][plan.choice[i]].comm:
            if coll.kind != ALL_REDUCE:
                continue
            d = plan.table.mesh.group_extent(coll.axes)
            if d <= 1:
                continue
            realized = (Collective(REDUCE_SCATTER, coll.bytes, coll.axes),
                        Collective(ALL_GATHER, coll.bytes, coll.axes))
            rewrites.append(Rewrite(i, r, coll, realized))
    return IntraPlan(plan.table, plan.choice, plan.objective, plan.certified, rewrites)


def export_lp(table: StrategyTable) -> str:
    """CPLEX LP text of the stage ILP (one-hot strategy vectors s_v, linking
    edge variables e_uv) for cross-checking with any external solver."""
    obj_terms = []
    for v in range(table.num_nodes):
        for i in range(table.k(v)):
            coef = table.c[v][i] + table.d[v][i]
            if coef:
                obj_terms.append(f"{float(coef)!r} s_{v}_{i}")
    for u, v, matrix in table.edges:
        for i, row in enumerate(matrix):
            for j, val in enumerate(row):
                if val:
                    obj_terms.append(f"{float(val)!r} e_{u}_{v}_{i}_{j}")
    lines = ["Minimize", " obj: " + (" + ".join(obj_terms) if obj_terms else "0"),
             "Subject To"]
    for v in range(table.num_nodes):
        lhs = " + ".join(f"s_{v}_{i}" for i in range(table.k(v)))
        lines.append(f" onehot_{v}: {lhs} = 1")
    for u, v, _ in table.edges:
        for i in range(table.k(u)):
            lhs = " + ".join(f"e_{u}_{v}_{i}_{j}" for j in range(table.k(v)))
            lines.append(f" row_{u}_{v}_{i}: {lhs} - s_{u}_{i} = 0")
        for j in range(table.k(v)):
            lhs = " + ".join(f"e_{u}_{v}_{i}_{j}" for i in range(table.k(u)))
            lines.append(f" col_{u}_{v}_{j}: {lhs} - s_{v}_{j} = 0")
    lines.append("Binary")
    for v in range(table.num_nodes):
        for i in range(table.k(v)):
            lines.append(f" s_{v}_{i}")
    for u, v, matrix in table.edges:
        for i in range(len(matrix)):
            for j in range(len(matrix[0])):
                lines.append(f" e_{u}_{v}_{i}_{j}")
    lines.append("End")
    return "\n".join(lines) + "\n"


# --- stage evaluation across logical views ----------------------------------

@dataclass(frozen=True)
class ViewReport:
    view: LogicalMesh
    plan: IntraPlan
    report: StageCostReport

    def feasible(self, num_inflight: int, device_memory: int) -> bool:
        return self.report.mem_stage + num_inflight * self.report.mem_act <= device_memory


@dataclass(frozen=True)
class StageEvaluation:
    sub: StageSubgraph
    views: tuple[ViewReport, ...]

    def t_intra(self, subsequent: int, device_memory: int) -> Optional[ViewReport]:
        """Cheapest feasible view with `subsequent` later stages under the
        1F1B in-flight bound; None when no view fits (t_intra = infinity)."""
        best = None
        for vr in self.views:
            if not vr.feasible(subsequent + 1, device_memory):
                continue
            if best is None or vr.report.t_total < best.report.t_total:
                best = vr
        return best


def evaluate_stage(graph: OpGraph, op_ids: Sequence[int], shape: SubmeshShape,
                   cluster: ClusterMesh, cost_model: CostModel,
                   solver_budget: int = DEFAULT_SOLVER_BUDGET) -> StageEvaluation:
    """Solve the stage ILP on every logical view of a submesh shape."""
    sub = extract_stage(graph, op_ids)
    merged = merge_trivial(sub)
    total_flop = sub.graph.total_flop()
    views = []
    for view in logical_views(shape, cluster):
        try:
            table = build_ilp(merged, view, cost_model)
        except (PlannerError, SpecError):
            continue  # no legal strategy on this view (e.g. indivisible extents)
        plan = post_ilp_rewrite(solve_ilp(table, solver_budget))
        specs = plan.node_specs()
        mem = cost_model.stage_memory(sub.graph, specs, sub.boundary_outputs,
                                      view, 1)
        report = StageCostReport(
            t_compute=cost_model.compute_time(total_flop, view.num_devices),
            t_comm=plan.objective,
            mem_stage=mem.mem_stage,
            mem_act=mem.mem_act,
        )
        views.append(ViewReport(view, plan, report))
    return StageEvaluation(sub, tuple(views))
