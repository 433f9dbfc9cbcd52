"""Sharding-spec algebra over 2-D logical meshes: per-operator parallel
algorithm enumeration and resharding collective synthesis.

A spec assigns each tensor dimension either R (replicated) or S with the mesh
axes it is partitioned along, e.g. "RS^0S^1" or "S^{01}R". Each mesh axis may
partition at most one tensor dimension, and partitioning is always even.
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass

from .graph import OpKind, OpNode, TensorShape
from .mesh import LogicalMesh


class SpecError(ValueError):
    """Raised on invalid sharding specs or unsupported operators."""


ALL_REDUCE = "all_reduce"
ALL_GATHER = "all_gather"
ALL_TO_ALL = "all_to_all"
REDUCE_SCATTER = "reduce_scatter"


@dataclass(frozen=True)
class DimSharding:
    """Partition state of one tensor dimension: () means replicated."""

    axes: tuple[int, ...] = ()

    def __post_init__(self):
        if len(set(self.axes)) != len(self.axes):
            raise SpecError(f"duplicate mesh axes in {self.axes}")

    @property
    def is_replicated(self) -> bool:
        return not self.axes


R = DimSharding(())


def S(*axes: int) -> DimSharding:
    return DimSharding(tuple(axes))


@dataclass(frozen=True)
class ShardingSpec:
    dims: tuple[DimSharding, ...]

    def __post_init__(self):
        used = [a for d in self.dims for a in d.axes]
        if len(set(used)) != len(used):
            raise SpecError(f"mesh axis used by more than one dimension in {self}")

    @property
    def rank(self) -> int:
        return len(self.dims)

    def used_axes(self) -> tuple[int, ...]:
        return tuple(sorted(a for d in self.dims for a in d.axes))

    def dim_of_axis(self, axis: int):
        for i, d in enumerate(self.dims):
            if axis in d.axes:
                return i
        return None

    def replication_axes(self, mesh: LogicalMesh) -> tuple[int, ...]:
        """Mesh axes along which the tensor is replicated (unused by splits)."""
        used = set(self.used_axes())
        return tuple(a for a in (0, 1) if a not in used)

    def is_fully_replicated(self) -> bool:
        return all(d.is_replicated for d in self.dims)

    def shard_factor(self, mesh: LogicalMesh) -> int:
        out = 1
        for d in self.dims:
            for a in d.axes:
                out *= mesh.extent(a)
        return out

    def local_bytes(self, shape: TensorShape, mesh: LogicalMesh) -> int:
        return shape.byte_size // self.shard_factor(mesh)

    def local_dims(self, shape: TensorShape, mesh: LogicalMesh) -> tuple[int, ...]:
        return tuple(ext // mesh.group_extent(d.axes)
                     for ext, d in zip(shape.dims, self.dims))

    def __str__(self) -> str:
        return format_spec(self)


def replicated_spec(rank: int) -> ShardingSpec:
    return ShardingSpec((R,) * rank)


def format_spec(spec: ShardingSpec) -> str:
    parts = []
    for d in spec.dims:
        if d.is_replicated:
            parts.append("R")
        elif len(d.axes) == 1:
            parts.append(f"S^{d.axes[0]}")
        else:
            parts.append("S^{%s}" % "".join(str(a) for a in d.axes))
    return "".join(parts)


_SPEC_TOKEN = re.compile(r"R|S\^(\d|\{\d+\})")


def parse_spec(text: str) -> ShardingSpec:
    dims = []
    pos = 0
    while pos < len(text):
        m = _SPEC_TOKEN.match(text, pos)
        if not m:
            raise SpecError(f"bad sharding spec {text!r} at offset {pos}")
        tok = m.group(0)
        if tok == "R":
            dims.append(R)
        else:
            digits = m.group(1).strip("{}")
            dims.append(DimSharding(tuple(int(c) for c in digits)))
        pos = m.end()
    if not dims:
        raise SpecError("empty sharding spec")
    return ShardingSpec(tuple(dims))


def validate_spec(spec: ShardingSpec, shape: TensorShape, mesh: LogicalMesh) -> None:
    if spec.rank != shape.rank:
        raise SpecError(f"spec {spec} has rank {spec.rank}, tensor has rank {shape.rank}")
    for ext, d in zip(shape.dims, spec.dims):
        factor = mesh.group_extent(d.axes)
        for a in d.axes:
            if a not in (0, 1):
                raise SpecError(f"unknown mesh axis {a}")
        if ext % factor:
            raise SpecError(f"extent {ext} not divisible by mesh factor {factor} in {spec}")


def spec_equal(a: ShardingSpec, b: ShardingSpec) -> bool:
    return a == b


@dataclass(frozen=True)
class Collective:
    """Symbolic collective: kind, byte argument, participating mesh axes.

    Byte conventions follow the cost tables: all_reduce carries the per-device
    partial-tensor size, all_gather the gathered result size, all_to_all the
    per-device local size.
    """

    kind: str
    bytes: int
    axes: tuple[int, ...]


@dataclass(frozen=True)
class ParallelAlgorithm:
    node_id: int
    loop_mapping: tuple[tuple[str, tuple[int, ...]], ...]
    output_spec: ShardingSpec
    input_specs: tuple[ShardingSpec, ...]
    comm: tuple[Collective, ...]

    def describe(self) -> str:
        loops = ",".join(f"{name}->{''.join(map(str, axes))}"
                         for name, axes in self.loop_mapping if axes)
        return f"[{loops or 'replicated'}] out={self.output_spec} " \
               f"in=({','.join(str(s) for s in self.input_specs)})"


def _canon_axes(axes: tuple[int, ...], mesh: LogicalMesh) -> tuple[int, ...]:
    # Splitting along a 1-extent axis is replication; drop it.
    return tuple(sorted(a for a in axes if mesh.extent(a) > 1))


_AXIS_SUBSETS = ((), (0,), (1,), (0, 1))


def enumerate_specs(shape: TensorShape, mesh: LogicalMesh) -> list[ShardingSpec]:
    """All legal sharding specs of a tensor on the mesh, deduplicated after
    canonicalization, fully replicated first."""
    out = []
    seen = set()
    choices = [None] + list(range(shape.rank))
    for assign in itertools.product(choices, repeat=2):
        dims = []
        ok = True
        for i, ext in enumerate(shape.dims):
            axes = _canon_axes(tuple(a for a in (0, 1) if assign[a] == i), mesh)
            if ext % mesh.group_extent(axes):
                ok = False
                break
            dims.append(DimSharding(axes))
        if not ok:
            continue
        spec = ShardingSpec(tuple(dims))
        if spec not in seen:
            seen.add(spec)
            out.append(spec)
    return out


# Loop structure of the matmul family: loop name -> dimension index carrying
# it in (lhs, rhs, out); None when the tensor does not carry the loop.
_MATMUL_LOOPS: dict[OpKind, list[tuple[str, tuple]]] = {
    OpKind.MATMUL: [("i", (0, None, 0)), ("j", (None, 1, 1)), ("k", (1, 0, None))],
    OpKind.BATCHED_MATMUL: [("b", (0, 0, 0)), ("i", (1, None, 1)),
                            ("j", (None, 2, 2)), ("k", (2, 1, None))],
}


def enumerate_algorithms(node: OpNode, mesh: LogicalMesh,
                         input_shapes: tuple[TensorShape, ...]) -> list[ParallelAlgorithm]:
    """Every parallel algorithm of one operator on a logical mesh.

    Matmul family: all assignments of the loop indices to disjoint mesh axis
    sets that use every non-trivial axis (replicated computation of heavy
    operators is forbidden) and divide extents evenly; a mapped contraction
    loop costs an all_reduce of the output partial sums. Elementwise and
    inputs enumerate legal specs communication-free; a reduction over a split
    dimension costs an all_reduce.
    """
    if node.kind in _MATMUL_LOOPS:
        return _matmul_algorithms(node, mesh, input_shapes)
    if node.kind == OpKind.ELEMENTWISE:
        return [
            ParallelAlgorithm(node.id, (("*", spec.used_axes()),), spec,
                              (spec,) * len(node.inputs), ())
            for spec in enumerate_specs(node.out_shape, mesh)
        ]
    if node.kind in (OpKind.INPUT, OpKind.PARAMETER):
        return [
            ParallelAlgorithm(node.id, (), spec, (), ())
            for spec in enumerate_specs(node.out_shape, mesh)
        ]
    if node.kind == OpKind.REDUCTION:
        return _reduction_algorithms(node, mesh, input_shapes[0])
    if node.kind == OpKind.RESHAPE:
        rep_in = replicated_spec(input_shapes[0].rank)
        return [ParallelAlgorithm(node.id, (), replicated_spec(node.out_shape.rank),
                                  (rep_in,), ())]
    raise SpecError(f"no parallel algorithms for operator kind {node.kind.value}")


def _matmul_algorithms(node: OpNode, mesh: LogicalMesh,
                       input_shapes: tuple[TensorShape, ...]) -> list[ParallelAlgorithm]:
    loops = _MATMUL_LOOPS[node.kind]
    shapes = (input_shapes[0], input_shapes[1], node.out_shape)
    loop_extent = {}
    for name, dims in loops:
        for shape, dim in zip(shapes, dims):
            if dim is not None:
                loop_extent[name] = shape.dims[dim]
    required = {a for a in (0, 1) if mesh.extent(a) > 1}
    out = []
    seen = set()
    for combo in itertools.product(_AXIS_SUBSETS, repeat=len(loops)):
        used = [a for axes in combo for a in axes]
        if len(set(used)) != len(used):
            continue
        mapping = {name: _canon_axes(axes, mesh) for (name, _), axes in zip(loops, combo)}
        if {a for axes in mapping.values() for a in axes} != required:
            continue
        if any(loop_extent[name] % mesh.group_extent(axes)
               for name, axes in mapping.items()):
            continue
        specs = []
        for t, shape in enumerate(shapes):
            dims = [R] * shape.rank
            for name, where in loops:
                if where[t] is not None:
                    dims[where[t]] = DimSharding(mapping[name])
            specs.append(ShardingSpec(tuple(dims)))
        comm: tuple[Collective, ...] = ()
        k_axes = mapping["k"]
        if k_axes:
            scale = 1
            for name, axes in mapping.items():
                if name != "k":
                    scale *= mesh.group_extent(axes)
            comm = (Collective(ALL_REDUCE, node.out_shape.byte_size // scale, k_axes),)
        key = (specs[2], specs[0], specs[1], comm)
        if key in seen:
            continue
        seen.add(key)
        out.append(ParallelAlgorithm(
            node.id, tuple((name, mapping[name]) for name, _ in loops),
            specs[2], (specs[0], specs[1]), comm))
    return out


def _reduction_algorithms(node: OpNode, mesh: LogicalMesh,
                          in_shape: TensorShape) -> list[ParallelAlgorithm]:
    axis = node.reduce_axis
    out = []
    for spec in enumerate_specs(in_shape, mesh):
        out_dims = tuple(d for i, d in enumerate(spec.dims) if i != axis)
        if not out_dims:
            out_dims = (R,)
        out_spec = ShardingSpec(out_dims)
        comm: tuple[Collective, ...] = ()
        reduced = spec.dims[axis].axes
        if reduced:
            scale = 1
            for d in out_spec.dims:
                scale *= mesh.group_extent(d.axes)
            comm = (Collective(ALL_REDUCE, node.out_shape.byte_size // scale, reduced),)
        out.append(ParallelAlgorithm(node.id, (("r", reduced),), out_spec, (spec,), comm))
    return out


def resharding_cost(src: ShardingSpec, dst: ShardingSpec, shape: TensorShape,
                    mesh: LogicalMesh) -> list[Collective]:
    """Collectives converting layout src -> dst, processed axis 0 then axis 1.

    Per axis: gone from dst -> all_gather of the gathered bytes; moved to a
    different dimension -> all_to_all of the local shard bytes; newly split ->
    free local slice. Identical specs cost nothing.
    """
    validate_spec(src, shape, mesh)
    validate_spec(dst, shape, mesh)
    out: list[Collective] = []
    divisor = src.shard_factor(mesh)
    current = {a: src.dim_of_axis(a) for a in (0, 1)}
    for a in (0, 1):
        ext = mesh.extent(a)
        if ext == 1:
            continue
        p, q = current[a], dst.dim_of_axis(a)
        if p == q:
            continue
        if p is not None and q is None:
            out.append(Collective(ALL_GATHER, shape.byte_size // divisor * ext, (a,)))
            divisor //= ext
        elif p is not None and q is not None:
            out.append(Collective(ALL_TO_ALL, shape.byte_size // divisor, (a,)))
        else:
            divisor *= ext
        current[a] = q
    return out
