"""The per-stage strategy ILP: column-then-row partitioning of a 2-layer MLP
emerges as the optimum, and gradient all-reduces get the ZeRO-style rewrite.

Run: python demos/03_stage_ilp.py
"""
from fractions import Fraction

from meshplan import ClusterMesh, SubmeshShape, build_mlp, evaluate_stage, export_lp
from meshplan.costs import CostModel
from meshplan.graph import TensorShape, _Builder
from meshplan.intra import build_ilp, extract_stage, merge_trivial
from meshplan.sharding import format_spec

cluster = ClusterMesh(1, 2, 10**9, 10**8, Fraction(1, 10**6), 10**11, 10**9)
cm = CostModel(cluster)

# An odd batch keeps the batch axis unsplittable on 2 devices, so the solver
# must partition the weights instead.
b = _Builder()
x = b.input(TensorShape((3, 8)))
w1 = b.parameter(TensorShape((8, 32)))
h = b.matmul(x, w1)
w2 = b.parameter(TensorShape((32, 8)))
y = b.matmul(h, w2)
g = b.graph([y])

print("=== solving the stage ILP on a 1x2 mesh ===")
ev = evaluate_stage(g, range(len(g)), SubmeshShape(1, 2), cluster, cm)
vr = ev.t_intra(0, cluster.device_memory)
plan = vr.plan
print(f"  chosen logical view: {vr.view.n_l}x{vr.view.m_l}")
print(f"  modeled communication: {float(plan.objective):.3e} s "
      f"(exact {plan.objective})")
for i, alg in enumerate(plan.chosen_algorithms()):
    root = plan.table.merged.roots[i]
    node = plan.table.merged.sub.graph.node(root)
    comm = ", ".join(f"{c.kind}({c.bytes}B)" for c in alg.comm) or "-"
    print(f"  node {root} {node.kind.value:<10} out={format_spec(alg.output_spec):<8} "
          f"comm: {comm}")
print("  -> up-projection is column-partitioned, down-projection is "
      "row-partitioned, one all_reduce of the output")

print("\n=== LP export of the same ILP (for external cross-checking) ===")
table = build_ilp(merge_trivial(extract_stage(g, range(len(g)))), vr.view, cm)
text = export_lp(table)
print("\n".join("  " + line for line in text.splitlines()[:8]))
print(f"  ... {len(text.splitlines())} lines total")

print("\n=== ZeRO-style rewrite on a data-parallel backward graph ===")
gb = build_mlp(2, 16, 4, backward=True)
evb = evaluate_stage(gb, range(len(gb)), SubmeshShape(1, 2), cluster, cm)
planb = evb.t_intra(0, cluster.device_memory).plan
print(f"  gradient all_reduces rewritten: {len(planb.rewrites)}")
for rw in planb.rewrites:
    print(f"    node {rw.local_node}: all_reduce({rw.original.bytes}B) -> "
          f"reduce_scatter + all_gather (same volume)")
print(f"  per-device replicated gradient bytes: "
      f"{planb.replicated_grad_bytes()} (halved by the rewrite)")
