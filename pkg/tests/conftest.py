"""Shared fixtures and oracles for the test suite."""
from fractions import Fraction

import pytest

from meshplan.costs import CostModel
from meshplan.mesh import ClusterMesh, LogicalMesh


def make_cluster(hosts=2, devices=2, intra=10**9, inter=10**8, alpha=Fraction(1, 10**6),
                 flops=10**11, memory=10**9) -> ClusterMesh:
    return ClusterMesh(hosts, devices, intra, inter, alpha, flops, memory)


@pytest.fixture
def cluster22() -> ClusterMesh:
    return make_cluster(2, 2)


@pytest.fixture
def cluster24() -> ClusterMesh:
    return make_cluster(2, 4)


@pytest.fixture
def cost_model(cluster22) -> CostModel:
    return CostModel(cluster22)


def abstract_mesh(n0: int, n1: int, bw0=10**9, bw1=10**9) -> LogicalMesh:
    return LogicalMesh(n0, n1, (Fraction(bw0), Fraction(bw1)))


def brute_force_table_min(table):
    """Exhaustive minimum of a strategy ILP via numpy broadcasting.

    Independent of the branch-and-bound path: builds the full objective tensor
    over the strategy grid and takes its minimum.
    """
    import numpy as np
    from fractions import Fraction

    ks = [table.k(i) for i in range(table.num_nodes)]
    values = [table.c[i][j] + table.d[i][j]
              for i in range(table.num_nodes) for j in range(ks[i])]
    values += [x for _, _, m in table.edges for row in m for x in row]
    integral = all(f.denominator == 1 for f in values)
    dtype = np.int64 if integral else object
    convert = (lambda f: int(f)) if integral else (lambda f: f)
    total = np.zeros(tuple(ks), dtype=dtype)
    for i in range(table.num_nodes):
        shape = [1] * table.num_nodes
        shape[i] = ks[i]
        vec = np.array([convert(table.c[i][j] + table.d[i][j]) for j in range(ks[i])],
                       dtype=dtype).reshape(shape)
        total = total + vec
    for u, v, matrix in table.edges:
        if u > v:
            u, v, matrix = v, u, [list(col) for col in zip(*matrix)]
        shape = [1] * table.num_nodes
        shape[u], shape[v] = ks[u], ks[v]
        arr = np.array([[convert(x) for x in row] for row in matrix],
                       dtype=dtype).reshape(shape)
        total = total + arr
    out = total.min()
    return Fraction(int(out)) if integral else out


def compositions(n):
    """All slicings of range(n) into contiguous nonempty runs."""
    if n == 0:
        yield []
        return
    for first in range(1, n + 1):
        for rest in compositions(n - first):
            yield [(0, first)] + [(lo + first, hi + first) for lo, hi in rest]


def brute_force_pipeline(graph, cluster, num_microbatches, num_layers, delta=0.1):
    """Exhaustive Eq.-1 minimum over every (slicing, submesh assignment,
    logical view) combination; independent of the planner's DP and t_max
    enumeration (feasibility and the latency formula are re-derived here)."""
    import itertools

    from meshplan.costs import CostModel
    from meshplan.inter import cluster_operators
    from meshplan.intra import evaluate_stage
    from meshplan.mesh import admissible_shapes

    cm = CostModel(cluster)
    clustering = cluster_operators(graph, num_layers, delta)
    shapes = admissible_shapes(cluster)
    ND = cluster.num_devices
    memo = {}

    def views(lo, hi, shape):
        key = (lo, hi, shape)
        if key not in memo:
            ops = clustering.range_ops(lo, hi)
            memo[key] = evaluate_stage(graph, ops, shape, cluster, cm).views
        return memo[key]

    best = None
    for slicing in compositions(num_layers):
        S = len(slicing)
        if S > ND:
            continue
        for assign in itertools.product(shapes, repeat=S):
            if sum(sh.num_devices for sh in assign) != ND:
                continue
            ts = []
            ok = True
            for idx, ((lo, hi), sh) in enumerate(zip(slicing, assign)):
                inflight = S - idx
                best_t = None
                for vr in views(lo, hi, sh):
                    if vr.report.mem_stage + inflight * vr.report.mem_act \
                            <= cluster.device_memory:
                        t = vr.report.t_compute + vr.report.t_comm
                        if best_t is None or t < best_t:
                            best_t = t
                if best_t is None:
                    ok = False
                    break
                ts.append(best_t)
            if ok:
                val = sum(ts) + (num_microbatches - 1) * max(ts)
                if best is None or val < best:
                    best = val
    return best
