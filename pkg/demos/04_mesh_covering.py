"""Tiling the physical cluster with stage submeshes: the covering always
succeeds when piece sizes sum to the cluster size and every piece is either a
single-row power of two or a full-width band.

Run: python demos/04_mesh_covering.py
"""
import random

from meshplan import ClusterMesh, SubmeshShape, admissible_shapes, cover, verify_cover
from meshplan.mesh import logical_views

cluster = ClusterMesh(4, 8, 10**9, 10**8, 0, 10**11, 10**9)
print("=== admissible stage submesh shapes on a 4x8 cluster ===")
print("  " + ", ".join(f"({s.n},{s.m})" for s in admissible_shapes(cluster)))


def render(cluster, assignments):
    grid = [["." for _ in range(cluster.devices_per_host)]
            for _ in range(cluster.num_hosts)]
    for label, a in zip("ABCDEFGHIJKLMNOP", assignments):
        for h, d in a.cells():
            grid[h][d] = label
    return "\n".join("  " + " ".join(row) for row in grid)


print("\n=== covering 4x8 with {(2,8), (1,8), (1,4), (1,2), (1,1), (1,1)} ===")
pieces = [SubmeshShape(2, 8), SubmeshShape(1, 8), SubmeshShape(1, 4),
          SubmeshShape(1, 2), SubmeshShape(1, 1), SubmeshShape(1, 1)]
asg = cover(cluster, pieces)
print(render(cluster, asg))
print(f"  verified: {verify_cover(cluster, asg)}")

print("\n=== 5 random hypothesis-satisfying multisets, all verified ===")
rng = random.Random(4)
for trial in range(5):
    pieces = []
    rows = cluster.num_hosts
    if rng.random() < 0.5:
        n = rng.randint(2, rows)
        pieces.append(SubmeshShape(n, 8))
        rows -= n
    rem = rows * 8
    while rem > 0:
        m = rng.choice([m for m in (1, 2, 4, 8) if m <= rem])
        pieces.append(SubmeshShape(1, m))
        rem -= m
    rng.shuffle(pieces)
    asg = cover(cluster, pieces)
    ok = verify_cover(cluster, asg)
    print(f"  trial {trial}: {[(p.n, p.m) for p in pieces]} -> verified {ok}")
    assert ok

print("\n=== logical views of a (2, 8) submesh (with per-axis bandwidth) ===")
for v in logical_views(SubmeshShape(2, 8), cluster):
    bw = [f"{float(b):.0e}" for b in v.axis_bandwidth]
    print(f"  {v.n_l}x{v.m_l:<2} axis bandwidths {bw}")
