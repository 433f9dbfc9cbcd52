"""Analytic cost model: ring-collective time, evenly divided compute time, and
the stage memory estimate used by the pipeline feasibility check
(mem_stage + s * mem_act <= mem_device).

All times are exact `Fraction` seconds so planner/simulator agreement can be
asserted with equality.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Optional

from .graph import OpGraph, OpKind
from .mesh import ClusterMesh, LogicalMesh, MeshError
from .sharding import (ALL_GATHER, ALL_REDUCE, ALL_TO_ALL, REDUCE_SCATTER,
                       Collective, ShardingSpec)

ZERO = Fraction(0)

# Ring bounds: all-reduce moves 2(d-1)/d of the payload per device, the
# others (d-1)/d.
VOLUME_FACTORS = {
    ALL_REDUCE: 2,
    ALL_GATHER: 1,
    ALL_TO_ALL: 1,
    REDUCE_SCATTER: 1,
}


@dataclass(frozen=True)
class MemoryReport:
    mem_stage: int
    mem_act: int
    feasible: bool


@dataclass(frozen=True)
class StageCostReport:
    t_compute: Fraction
    t_comm: Fraction
    mem_stage: int
    mem_act: int

    @property
    def t_total(self) -> Fraction:
        return self.t_compute + self.t_comm


@dataclass(frozen=True)
class CostModel:
    cluster: ClusterMesh
    # Optional per-kind overrides of the ring volume factors.
    volume_factors: Optional[Mapping[str, Fraction]] = None

    def _factor(self, kind: str) -> Fraction:
        if self.volume_factors and kind in self.volume_factors:
            return Fraction(self.volume_factors[kind])
        if kind not in VOLUME_FACTORS:
            raise MeshError(f"unknown collective kind {kind!r}")
        return Fraction(VOLUME_FACTORS[kind])

    def collective_time(self, kind: str, nbytes: int, axes: tuple[int, ...],
                        mesh: LogicalMesh) -> Fraction:
        factor = self._factor(kind)
        for a in axes:
            if a not in (0, 1):
                raise MeshError(f"unknown mesh axis {a}")
        d = mesh.group_extent(axes)
        if d <= 1:
            return ZERO
        volume = factor * Fraction((d - 1) * nbytes, d)
        bw = min(mesh.axis_bandwidth[a] for a in axes)
        return self.cluster.alpha_latency + volume / bw

    def collectives_time(self, collectives: Iterable[Collective],
                         mesh: LogicalMesh) -> Fraction:
        total = ZERO
        for c in collectives:
            total += self.collective_time(c.kind, c.bytes, c.axes, mesh)
        return total

    def compute_time(self, flop: int, device_count: int) -> Fraction:
        if device_count < 1:
            raise MeshError("device_count must be >= 1")
        return Fraction(flop) / (device_count * self.cluster.device_flops)

    def transfer_time(self, nbytes: int) -> Fraction:
        """Point-to-point cross-mesh transfer over the slow links."""
        if nbytes == 0:
            return ZERO
        return self.cluster.alpha_latency + Fraction(nbytes) / self.cluster.inter_host_bw

    def stage_memory(self, subgraph: OpGraph, specs: Mapping[int, ShardingSpec],
                     boundary_outputs: Iterable[int], mesh: LogicalMesh,
                     num_inflight: int) -> MemoryReport:
        """Per-device stage memory under a chosen spec assignment.

        mem_stage is sharded parameter bytes plus the largest single operator
        working set; mem_act is the stage-boundary activation bytes of one
        microbatch. Feasible iff mem_stage + s * mem_act fits device memory.
        """
        if num_inflight < 1:
            raise MeshError("num_inflight must be >= 1")

        def local(nid: int) -> int:
            node = subgraph.node(nid)
            return specs[nid].local_bytes(node.out_shape, mesh)

        param_bytes = sum(local(n.id) for n in subgraph.nodes
                          if n.kind == OpKind.PARAMETER)
        working = 0
        for n in subgraph.nodes:
            if n.kind in (OpKind.INPUT, OpKind.PARAMETER):
                continue
            ws = local(n.id) + sum(local(pid) for pid, _ in n.inputs)
            working = max(working, ws)
        mem_stage = param_bytes + working
        mem_act = sum(local(nid) for nid in boundary_outputs)
        feasible = mem_stage + num_inflight * mem_act <= self.cluster.device_memory
        return MemoryReport(mem_stage, mem_act, feasible)
