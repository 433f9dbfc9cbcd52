"""Build computation graphs, inspect them, and round-trip the JSON format.

Run: python demos/01_graphs_and_serialization.py
"""
from meshplan import build_mlp, build_transformer_blocks, parse, serialize

print("=== a 2-layer MLP (batch 8, hidden 16) ===")
mlp = build_mlp(2, 8, 16)
for n in mlp.nodes:
    ins = ",".join(str(p) for p, _ in n.inputs)
    print(f"  node {n.id:2d} {n.kind.value:<12} inputs=[{ins:<5}] "
          f"shape={n.out_shape.dims} flop={n.flop}")
print(f"total flop: {mlp.total_flop()}")

print("\n=== one transformer block (batch 2, seq 4, hidden 8, 2 heads) ===")
tfm = build_transformer_blocks(1, 2, 4, 8, 2)
kinds = {}
for n in tfm.nodes:
    kinds[n.kind.value] = kinds.get(n.kind.value, 0) + 1
print(f"  {len(tfm)} nodes: {kinds}")

print("\n=== mirrored backward option ===")
bwd = build_mlp(2, 8, 16, backward=True)
tagged = [n for n in bwd.nodes if n.colocate_with is not None]
grads = [n for n in bwd.nodes if n.grad_of is not None]
print(f"  {len(bwd)} nodes total; {len(tagged)} backward nodes carry a "
      f"colocation tag; {len(grads)} produce parameter gradients")

print("\n=== JSON round-trip ===")
blob = serialize(mlp)
print(f"  serialized to {len(blob)} bytes")
assert parse(blob) == mlp
print("  parse(serialize(g)) == g  [ok]")
print(f"  first 120 bytes: {blob[:120].decode()}...")
