"""End-to-end pipeline planning: cluster a transformer into layers, slice it
into stages on submeshes, and sweep the microbatch count.

Run: python demos/05_pipeline_planning.py
"""
from fractions import Fraction

from meshplan import ClusterMesh, build_transformer_blocks, plan, sweep_microbatches
from meshplan.inter import InfeasiblePlanError

graph = build_transformer_blocks(4, 4, 8, 16, 2)
print(f"graph: {len(graph)} operators, {graph.total_flop()} FLOP")

roomy = ClusterMesh(2, 2, 10**9, 10**8, Fraction(1, 10**6), 10**10, 10**9)
tight = ClusterMesh(2, 2, 10**9, 10**8, Fraction(1, 10**6), 10**10, 26000)


def show(p):
    print(f"  T* = {float(p.t_star):.4e} s over {p.num_stages} stage(s), "
          f"B = {p.num_microbatches}, slowest stage {float(p.t_max):.4e} s")
    for s in p.stages:
        print(f"    stage {s.index}: layers [{s.layers[0]},{s.layers[1]}) on "
              f"({s.shape.n},{s.shape.m}) hosts {list(s.assignment.host_range)} "
              f"devices {list(s.assignment.device_range)} as {s.view.n_l}x{s.view.m_l}, "
              f"t = {float(s.t):.4e} s, mem {s.mem.mem_stage}+{s.num_inflight}"
              f"*{s.mem.mem_act} B")


print("\n=== plenty of device memory ===")
show(plan(graph, roomy, 4, num_layers=4, epsilon=Fraction(0)))

print("\n=== tight device memory forces pipelining ===")
show(plan(graph, tight, 4, num_layers=4, epsilon=Fraction(0)))

print("\n=== even tighter memory is reported, not papered over ===")
try:
    plan(graph, ClusterMesh(2, 2, 10**9, 10**8, Fraction(1, 10**6), 10**10, 8000),
         4, num_layers=4, epsilon=Fraction(0))
except InfeasiblePlanError as e:
    print(f"  infeasible: {e}")

print("\n=== sweeping the microbatch count ===")
plans = sweep_microbatches(graph, tight, [1, 2, 4, 8], num_layers=4,
                           epsilon=Fraction(0))
for b, p in plans.items():
    print(f"  B={b}: T* = {float(p.t_star):.4e} s with {p.num_stages} stage(s)")
