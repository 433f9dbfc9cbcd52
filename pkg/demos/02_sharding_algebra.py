"""Sharding specs, per-operator parallel algorithms, and resharding costs on
a 2x2 logical mesh.

Run: python demos/02_sharding_algebra.py
"""
from fractions import Fraction

from meshplan import enumerate_algorithms, format_spec, parse_spec, resharding_cost
from meshplan.graph import OpKind, OpNode, TensorShape
from meshplan.mesh import LogicalMesh
from meshplan.sharding import enumerate_specs

mesh = LogicalMesh(2, 2, (Fraction(10**9), Fraction(10**9)))

print("=== all sharding specs of a (8, 8) tensor on a 2x2 mesh ===")
print("  " + "  ".join(format_spec(s) for s in enumerate_specs(TensorShape((8, 8)), mesh)))

print("\n=== parallel algorithms of a batched matmul C[b,i,j] = sum_k A B ===")
node = OpNode(2, OpKind.BATCHED_MATMUL, ((0, 0), (1, 0)), TensorShape((8, 8, 8)),
              2 * 8 ** 4)
algs = enumerate_algorithms(node, mesh, (TensorShape((8, 8, 8)), TensorShape((8, 8, 8))))
print(f"  {len(algs)} algorithms; every non-trivial mesh axis is always used")
print(f"  {'mapping':<18} {'output':<10} {'lhs':<10} {'rhs':<10} comm")
for a in algs:
    loops = ",".join(f"{n}->{''.join(map(str, ax))}" for n, ax in a.loop_mapping if ax)
    comm = ", ".join(f"{c.kind}({c.bytes}B, axes {list(c.axes)})" for c in a.comm) or "-"
    print(f"  {loops:<18} {format_spec(a.output_spec):<10} "
          f"{format_spec(a.input_specs[0]):<10} {format_spec(a.input_specs[1]):<10} {comm}")

print("\n=== resharding a (8, 8) tensor (256 bytes) between layouts ===")
cases = [("RR", "S^0S^1"), ("S^0R", "RR"), ("S^0S^1", "S^0R"),
         ("S^0R", "RS^0"), ("S^0S^1", "S^{01}R"), ("RS^1", "S^1R")]
for src, dst in cases:
    colls = resharding_cost(parse_spec(src), parse_spec(dst), TensorShape((8, 8)), mesh)
    desc = ", ".join(f"{c.kind}({c.bytes}B, axes {list(c.axes)})" for c in colls) or "free"
    print(f"  {src:>8} -> {dst:<8}: {desc}")
