"""Physical N x M cluster mesh, rectangular submeshes, 2-D logical views with
per-axis bandwidths, and a constructive full-mesh covering with verifier.

The covering follows the induction that proves it always exists: full-width
submeshes tile whole row bands, then single-row power-of-two pieces are paired
(smallest powers first) into the next power of two until the remaining grid is
one column wide.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

Numeric = Union[int, float, str, Fraction]


class MeshError(ValueError):
    """Raised on invalid mesh parameters or covering preconditions."""


def _frac(x: Numeric) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


def _is_pow2(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


@dataclass(frozen=True)
class ClusterMesh:
    num_hosts: int
    devices_per_host: int
    intra_host_bw: Fraction   # bytes/sec along links within a host
    inter_host_bw: Fraction   # bytes/sec along links across hosts
    alpha_latency: Fraction   # seconds per collective launch
    device_flops: Fraction    # FLOP/sec per device
    device_memory: int        # bytes per device

    def __post_init__(self):
        object.__setattr__(self, "intra_host_bw", _frac(self.intra_host_bw))
        object.__setattr__(self, "inter_host_bw", _frac(self.inter_host_bw))
        object.__setattr__(self, "alpha_latency", _frac(self.alpha_latency))
        object.__setattr__(self, "device_flops", _frac(self.device_flops))
        if self.num_hosts < 1:
            raise MeshError("num_hosts must be >= 1")
        if not _is_pow2(self.devices_per_host):
            raise MeshError(f"devices_per_host must be a power of 2, got {self.devices_per_host}")
        if not self.intra_host_bw >= self.inter_host_bw > 0:
            raise MeshError("need intra_host_bw >= inter_host_bw > 0")
        if self.alpha_latency < 0 or self.device_flops <= 0 or self.device_memory <= 0:
            raise MeshError("alpha must be >= 0; device_flops and device_memory positive")

    @property
    def num_devices(self) -> int:
        return self.num_hosts * self.devices_per_host


@dataclass(frozen=True, order=True)
class SubmeshShape:
    n: int
    m: int

    @property
    def num_devices(self) -> int:
        return self.n * self.m

    def is_admissible(self, cluster: ClusterMesh) -> bool:
        if self.n == 1:
            return _is_pow2(self.m) and self.m <= cluster.devices_per_host
        return self.m == cluster.devices_per_host and 2 <= self.n <= cluster.num_hosts


@dataclass(frozen=True)
class SubmeshAssignment:
    shape: SubmeshShape
    host_range: tuple[int, int]    # half-open host rows
    device_range: tuple[int, int]  # half-open device columns

    def cells(self):
        for h in range(*self.host_range):
            for d in range(*self.device_range):
                yield (h, d)

    def device_ids(self, cluster: ClusterMesh) -> list[int]:
        """Global ids (host * M + device), row-major over the rectangle."""
        return [h * cluster.devices_per_host + d for h, d in self.cells()]


@dataclass(frozen=True)
class LogicalMesh:
    n_l: int
    m_l: int
    axis_bandwidth: tuple[Fraction, Fraction]
    # Global device ids, row-major; None for an abstract planning view.
    device_ids: Optional[tuple[int, ...]] = None

    @property
    def num_devices(self) -> int:
        return self.n_l * self.m_l

    def extent(self, axis: int) -> int:
        return (self.n_l, self.m_l)[axis]

    def group_extent(self, axes: tuple[int, ...]) -> int:
        out = 1
        for a in axes:
            out *= self.extent(a)
        return out

    def coord_device(self, i: int, j: int) -> int:
        if self.device_ids is None:
            raise MeshError("logical mesh has no concrete device assignment")
        return self.device_ids[i * self.m_l + j]


def admissible_shapes(cluster: ClusterMesh) -> list[SubmeshShape]:
    """All stage submesh shapes: (1, 2^p) up to one host row, plus full-width
    (n, M) bands. Sorted by device count descending, then n descending."""
    shapes = []
    m = 1
    while m <= cluster.devices_per_host:
        shapes.append(SubmeshShape(1, m))
        m *= 2
    for n in range(2, cluster.num_hosts + 1):
        shapes.append(SubmeshShape(n, cluster.devices_per_host))
    shapes.sort(key=lambda s: (-s.num_devices, -s.n))
    return shapes


def cover(cluster: ClusterMesh, shapes: list[SubmeshShape]) -> list[SubmeshAssignment]:
    """Tile the full N x M mesh with the given admissible shape multiset.

    Never fails when the preconditions hold (sum of sizes equals N*M and every
    shape is admissible); result[i] is the rectangle of shapes[i].
    """
    N, M = cluster.num_hosts, cluster.devices_per_host
    total = sum(s.num_devices for s in shapes)
    if total != N * M:
        raise MeshError(f"shape sizes sum to {total}, expected {N * M}")
    for s in shapes:
        if not s.is_admissible(cluster):
            raise MeshError(f"shape ({s.n}, {s.m}) is not admissible on a {N}x{M} cluster")

    result: list[Optional[SubmeshAssignment]] = [None] * len(shapes)

    # Full-width bands first, widest on top.
    type2 = sorted((i for i, s in enumerate(shapes) if s.n > 1),
                   key=lambda i: (-shapes[i].n, i))
    row = 0
    for i in type2:
        result[i] = SubmeshAssignment(shapes[i], (row, row + shapes[i].n), (0, M))
        row += shapes[i].n

    type1 = [i for i, s in enumerate(shapes) if s.n == 1]
    for i, (r, c) in zip(type1, _place_power_pieces([shapes[i].m for i in type1], M)):
        result[i] = SubmeshAssignment(shapes[i], (row + r, row + r + 1), (c, c + shapes[i].m))
    return result  # type: ignore[return-value]


def _place_power_pieces(sizes: list[int], width: int) -> list[tuple[int, int]]:
    """Place power-of-two pieces into full rows of `width` columns.

    Follows the covering induction: equal smallest pieces are paired into the
    next power of two until every (possibly composite) piece fills a full row.
    Returns the (row, col) of each input piece, in input order.
    """
    items: list[tuple[tuple, int]] = [(("leaf", i), sz) for i, sz in enumerate(sizes)]
    unit = 1
    while unit < width:
        small = [key for key, sz in items if sz == unit]
        # The sum hypothesis forces an even count of smallest pieces.
        paired = [(("pair", 2 * unit, small[k], small[k + 1]), 2 * unit)
                  for k in range(0, len(small), 2)]
        items = [(key, sz) for key, sz in items if sz > unit] + paired
        unit *= 2
    out: list[Optional[tuple[int, int]]] = [None] * len(sizes)
    for r, (key, _) in enumerate(items):
        _unfold_piece(key, r, 0, out)
    return out  # type: ignore[return-value]


def _unfold_piece(key: tuple, row: int, col: int,
                  out: list[Optional[tuple[int, int]]]) -> None:
    if key[0] == "leaf":
        out[key[1]] = (row, col)
    else:
        _, size, left, right = key
        _unfold_piece(left, row, col, out)
        _unfold_piece(right, row, col + size // 2, out)


def verify_cover(cluster: ClusterMesh, assignments: list[SubmeshAssignment]) -> bool:
    """True iff the rectangles are pairwise disjoint, in bounds, single-host
    for (1, 2^p) pieces, and together cover every cell of the cluster."""
    seen: set[tuple[int, int]] = set()
    for a in assignments:
        h0, h1 = a.host_range
        d0, d1 = a.device_range
        if not (0 <= h0 < h1 <= cluster.num_hosts and 0 <= d0 < d1 <= cluster.devices_per_host):
            return False
        if (h1 - h0, d1 - d0) != (a.shape.n, a.shape.m):
            return False
        if a.shape.n == 1 and h1 - h0 != 1:
            return False
        for cell in a.cells():
            if cell in seen:
                return False
            seen.add(cell)
    return len(seen) == cluster.num_devices


def logical_views(shape: SubmeshShape, cluster: ClusterMesh) -> list[LogicalMesh]:
    """All 2-D logical reshapes (n_l, m_l) of the submesh's devices, with
    per-axis bandwidths derived from the physical row-major layout.

    An axis whose groups stay within one host gets the intra-host bandwidth;
    any group crossing hosts pulls the axis down to the worst link.
    """
    if not shape.is_admissible(cluster):
        raise MeshError(f"shape ({shape.n}, {shape.m}) is not admissible")
    count = shape.num_devices
    views = []
    for n_l in range(1, count + 1):
        if count % n_l:
            continue
        m_l = count // n_l
        views.append(LogicalMesh(n_l, m_l, _axis_bandwidths(shape, n_l, m_l, cluster)))
    return views


def concrete_view(view: LogicalMesh, assignment: SubmeshAssignment,
                  cluster: ClusterMesh) -> LogicalMesh:
    """Attach global device ids (row-major over the rectangle) to a view."""
    ids = assignment.device_ids(cluster)
    if len(ids) != view.num_devices:
        raise MeshError("assignment size does not match logical view")
    return LogicalMesh(view.n_l, view.m_l, view.axis_bandwidth, tuple(ids))


def _axis_bandwidths(shape: SubmeshShape, n_l: int, m_l: int,
                     cluster: ClusterMesh) -> tuple[Fraction, Fraction]:
    # Canonical placement at the origin; all rectangles of one shape are
    # isomorphic w.r.t. host boundaries.
    host_of = [k // shape.m for k in range(shape.num_devices)]
    bws = []
    for axis in (0, 1):
        groups_ok = True
        outer = m_l if axis == 0 else n_l
        for fixed in range(outer):
            if axis == 0:
                members = [host_of[i * m_l + fixed] for i in range(n_l)]
            else:
                members = [host_of[fixed * m_l + j] for j in range(m_l)]
            if len(set(members)) > 1:
                groups_ok = False
                break
        bws.append(cluster.intra_host_bw if groups_ok else cluster.inter_host_bw)
    return (bws[0], bws[1])
