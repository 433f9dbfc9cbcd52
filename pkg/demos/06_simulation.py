"""Validate a plan by discrete-event simulation: static GPipe/1F1B instruction
lists, exact agreement with the predicted latency, and Gantt-style output.

Run: python demos/06_simulation.py
"""
import json
from fractions import Fraction

from meshplan import (ClusterMesh, build_mlp, emit_instructions, plan,
                      runtime_from_plan, simulate)
from meshplan.costs import CostModel

cluster = ClusterMesh(2, 2, 10**9, 10**8, Fraction(1, 10**6), 10**10, 60000)
graph = build_mlp(4, 16, 32, backward=True)
p = plan(graph, cluster, 4, num_layers=4, epsilon=Fraction(0))
print(f"plan: {p.num_stages} stages, predicted T* = {float(p.t_star):.4e} s")

rt = runtime_from_plan(p)
cm = CostModel(cluster)

print("\n=== zero-transfer simulation reproduces T* exactly ===")
for schedule in ("gpipe", "1f1b"):
    prog = emit_instructions(rt, schedule)
    res = simulate(prog, cm, zero_transfer=True, enforce_memory=False)
    peak = max(res.peak_bytes.values())
    print(f"  {schedule:>5}: makespan {float(res.makespan):.4e} s "
          f"(== T*: {res.makespan == p.t_star}), peak {peak} B/device")

print("\n=== modeled transfers only add time ===")
prog = emit_instructions(rt, "gpipe")
res = simulate(prog, cm, zero_transfer=False, enforce_memory=False)
print(f"  makespan {float(res.makespan):.4e} s, "
      f"excess over T*: {float(res.makespan - p.t_star):.4e} s")
print(f"  utilization per stage: "
      f"{ {k: round(float(v), 3) for k, v in res.utilization.items()} }")

print("\n=== instruction list of stage 0 (first microbatch only) ===")
for ins in prog.stages[0].instructions[:8]:
    print(f"  {json.dumps(ins.to_json(), sort_keys=True)}")

print("\n=== Gantt rows (per device, [start, end, label]) ===")
rows = res.gantt_rows(prog)
for dev in sorted(rows, key=int)[:2]:
    head = ", ".join(f"[{s:.2e},{e:.2e},{l}]" for s, e, l in rows[dev][:4])
    print(f"  device {dev}: {head}, ... ({len(rows[dev])} events)")
