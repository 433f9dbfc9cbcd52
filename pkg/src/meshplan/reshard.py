"""Cross-mesh resharding between adjacent pipeline stages and static per-mesh
instruction lists realizing a GPipe or 1F1B schedule.

Resharding runs in two passes: first compute tile correspondences between the
source and destination partitions and emit point-to-point sends, then rewrite
sends toward replicated destinations so each distinct tile crosses the slow
inter-mesh link once and is completed by an all-gather on the faster
destination mesh.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from .graph import OpGraph, TensorShape
from .mesh import ClusterMesh, LogicalMesh
from .sharding import ShardingSpec, validate_spec

GPIPE = "gpipe"
ONE_F_ONE_B = "1f1b"
SCHEDULES = (GPIPE, ONE_F_ONE_B)

Box = tuple[tuple[int, int], ...]


class ReshardError(ValueError):
    """Raised on invalid cross-mesh resharding inputs."""


@dataclass(frozen=True)
class Transfer:
    src_device: int
    dst_device: int
    nbytes: int
    box: Box


@dataclass(frozen=True)
class GatherOp:
    devices: tuple[int, ...]
    axes: tuple[int, ...]
    nbytes: int           # gathered result bytes per participating device


@dataclass(frozen=True)
class CrossMeshPlan:
    transfers: tuple[Transfer, ...]
    gathers: tuple[GatherOp, ...]

    @property
    def inter_mesh_bytes(self) -> int:
        return sum(t.nbytes for t in self.transfers)


def _box_bytes(box: Box, elem_bytes: int) -> int:
    out = elem_bytes
    for lo, hi in box:
        out *= hi - lo
    return out


def _box_intersect(a: Box, b: Box) -> Optional[Box]:
    out = []
    for (alo, ahi), (blo, bhi) in zip(a, b):
        lo, hi = max(alo, blo), min(ahi, bhi)
        if lo >= hi:
            return None
        out.append((lo, hi))
    return tuple(out)


def shard_box(shape: TensorShape, spec: ShardingSpec, mesh: LogicalMesh,
              coords: tuple[int, int]) -> Box:
    """Index box held by the device at logical coordinates (i, j)."""
    box = []
    for ext, d in zip(shape.dims, spec.dims):
        blocks = mesh.group_extent(d.axes)
        idx = 0
        for a in d.axes:
            idx = idx * mesh.extent(a) + coords[a]
        length = ext // blocks
        box.append((idx * length, (idx + 1) * length))
    return tuple(box)


def _device_boxes(shape: TensorShape, spec: ShardingSpec,
                  mesh: LogicalMesh) -> list[tuple[int, Box]]:
    out = []
    for i in range(mesh.n_l):
        for j in range(mesh.m_l):
            out.append((mesh.coord_device(i, j), shard_box(shape, spec, mesh, (i, j))))
    return out


def _piece_sources(piece: Box, src_boxes: list[tuple[int, Box]],
                   dst_device: int, elem_bytes: int) -> list[Transfer]:
    """One send per overlap with a distinct source tile, lowest holder id."""
    holders: dict[Box, int] = {}
    for dev, box in src_boxes:
        inter = _box_intersect(piece, box)
        if inter is None:
            continue
        if inter not in holders or dev < holders[inter]:
            holders[inter] = dev
    return [Transfer(dev, dst_device, _box_bytes(box, elem_bytes), box)
            for box, dev in sorted(holders.items(), key=lambda kv: kv[0])]


def cross_mesh_plan(shape: TensorShape, src_spec: ShardingSpec, src_mesh: LogicalMesh,
                    dst_spec: ShardingSpec, dst_mesh: LogicalMesh,
                    optimize: bool = True) -> CrossMeshPlan:
    """Send/recv tiles (plus local all-gathers when optimize=True) that
    materialize dst_spec on dst_mesh from src_spec on src_mesh."""
    validate_spec(src_spec, shape, src_mesh)
    validate_spec(dst_spec, shape, dst_mesh)
    if src_mesh.device_ids is None or dst_mesh.device_ids is None:
        raise ReshardError("cross-mesh resharding needs concrete device ids")
    if set(src_mesh.device_ids) & set(dst_mesh.device_ids):
        raise ReshardError("source and destination meshes share devices")

    src_boxes = _device_boxes(shape, src_spec, src_mesh)
    dst_boxes = _device_boxes(shape, dst_spec, dst_mesh)

    transfers: list[Transfer] = []
    gathers: list[GatherOp] = []
    if not optimize:
        for dev, box in dst_boxes:
            transfers.extend(_piece_sources(box, src_boxes, dev, shape.elem_bytes))
        return CrossMeshPlan(tuple(transfers), tuple(gathers))

    # Replica groups: destination devices needing the identical tile.
    groups: dict[Box, list[int]] = {}
    for dev, box in dst_boxes:
        groups.setdefault(box, []).append(dev)
    rep_axes = dst_spec.replication_axes(dst_mesh)
    for box, devices in sorted(groups.items()):
        devices.sort()
        if len(devices) == 1:
            transfers.extend(_piece_sources(box, src_boxes, devices[0], shape.elem_bytes))
            continue
        # Scatter the tile across the group (one inter-mesh copy total), then
        # complete it with a local all-gather along the replication axes.
        g = len(devices)
        lo0, hi0 = box[0]
        span = hi0 - lo0
        for r, dev in enumerate(devices):
            cut0 = lo0 + (span * r) // g
            cut1 = lo0 + (span * (r + 1)) // g
            if cut0 >= cut1:
                continue
            piece = ((cut0, cut1),) + box[1:]
            transfers.extend(_piece_sources(piece, src_boxes, dev, shape.elem_bytes))
        gathers.append(GatherOp(tuple(devices), rep_axes,
                                _box_bytes(box, shape.elem_bytes)))
    return CrossMeshPlan(tuple(transfers), tuple(gathers))


def materialization_ok(plan: CrossMeshPlan, shape: TensorShape,
                       dst_spec: ShardingSpec, dst_mesh: LogicalMesh) -> bool:
    """Exhaustive cell-level check that every destination device ends up with
    exactly the tile its spec demands. Intended for small tensors."""
    held: dict[int, set[tuple[int, ...]]] = {d: set() for d in dst_mesh.device_ids}
    for t in plan.transfers:
        held[t.dst_device].update(itertools.product(*[range(lo, hi) for lo, hi in t.box]))
    for g in plan.gathers:
        union: set[tuple[int, ...]] = set()
        for d in g.devices:
            union |= held[d]
        for d in g.devices:
            held[d] = set(union)
    for i in range(dst_mesh.n_l):
        for j in range(dst_mesh.m_l):
            dev = dst_mesh.coord_device(i, j)
            box = shard_box(shape, dst_spec, dst_mesh, (i, j))
            want = set(itertools.product(*[range(lo, hi) for lo, hi in box]))
            if held[dev] != want:
                return False
    return True


# --- static instruction lists -----------------------------------------------

@dataclass(frozen=True)
class Instruction:
    op: str                              # alloc|free|recv|compute|send|all_gather|sync
    stage: int
    microbatch: Optional[int] = None
    phase: Optional[str] = None          # fwd|bwd on compute
    buffer: Optional[str] = None
    nbytes: int = 0                      # per-device bytes for alloc/free
    peer: Optional[int] = None
    tag: Optional[str] = None
    duration: Optional[Fraction] = None  # compute only
    pairs: tuple[tuple[int, int, int], ...] = ()   # (src_dev, dst_dev, bytes)
    axes: tuple[int, ...] = ()

    def to_json(self) -> dict:
        d = {"op": self.op, "stage": self.stage}
        for k in ("microbatch", "phase", "buffer", "peer", "tag"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        if self.nbytes:
            d["bytes"] = self.nbytes
        if self.duration is not None:
            d["duration"] = [self.duration.numerator, self.duration.denominator]
        if self.pairs:
            d["pairs"] = [list(p) for p in self.pairs]
        if self.axes:
            d["axes"] = list(self.axes)
        return d


@dataclass
class StageProgram:
    stage: int
    device_ids: tuple[int, ...]
    view: LogicalMesh
    resident_bytes: int
    instructions: list[Instruction]


@dataclass
class Program:
    stages: list[StageProgram]
    num_microbatches: int
    schedule: str
    has_backward: bool
    t_star: Fraction

    def to_json(self) -> dict:
        return {
            "schedule": self.schedule,
            "num_microbatches": self.num_microbatches,
            "has_backward": self.has_backward,
            "t_star": [self.t_star.numerator, self.t_star.denominator],
            "stages": [{
                "stage": sp.stage,
                "devices": list(sp.device_ids),
                "resident_bytes": sp.resident_bytes,
                "instructions": [i.to_json() for i in sp.instructions],
            } for sp in self.stages],
        }


@dataclass(frozen=True)
class RuntimeStage:
    """Everything the orchestrator needs about one stage, as published in the
    plan file: placement, latency, memory, and boundary tensor layouts."""

    index: int
    view: LogicalMesh                       # concrete device ids attached
    op_ids: tuple[int, ...]
    t: Fraction
    mem_stage: int
    mem_act: int
    output_specs: dict[int, ShardingSpec]   # boundary outputs by original id
    input_specs: dict[int, ShardingSpec]    # boundary inputs by producer id


@dataclass(frozen=True)
class RuntimePlan:
    graph: OpGraph
    cluster: ClusterMesh
    stages: tuple[RuntimeStage, ...]
    num_microbatches: int
    t_star: Fraction

    @property
    def has_backward(self) -> bool:
        return self.graph.has_backward


@dataclass(frozen=True)
class _Boundary:
    """Aggregated cross-mesh traffic between a producer/consumer stage pair.

    Producer < consumer carries activations during the forward phase;
    producer > consumer carries gradients during the backward phase (gradient
    tensors are explicit graph edges in backward-carrying graphs).
    """

    producer: int
    consumer: int
    plan: CrossMeshPlan
    recv_bytes: int       # per-device bytes landing on the consumer

    @property
    def phase(self) -> str:
        return "fwd" if self.producer < self.consumer else "bwd"

    @property
    def tag_prefix(self) -> str:
        return "f" if self.phase == "fwd" else "b"


def _stage_boundaries(plan: RuntimePlan) -> list[_Boundary]:
    produced_in = {}
    for s in plan.stages:
        for oid in s.op_ids:
            produced_in[oid] = s.index
    out = []
    for s in plan.stages:
        by_producer: dict[int, list[int]] = {}
        for orig in sorted(s.input_specs):
            p = produced_in.get(orig)
            if p is None or p == s.index:
                continue  # graph input, not staged
            by_producer.setdefault(p, []).append(orig)
        for p, tensors in sorted(by_producer.items()):
            src_stage = plan.stages[p]
            transfers: list[Transfer] = []
            gathers: list[GatherOp] = []
            recv_bytes = 0
            for orig in tensors:
                shape = plan.graph.node(orig).out_shape
                sspec = src_stage.output_specs[orig]
                dspec = s.input_specs[orig]
                cm = cross_mesh_plan(shape, sspec, src_stage.view, dspec, s.view)
                transfers.extend(cm.transfers)
                gathers.extend(cm.gathers)
                recv_bytes += dspec.local_bytes(shape, s.view)
            out.append(_Boundary(p, s.index,
                                 CrossMeshPlan(tuple(transfers), tuple(gathers)),
                                 recv_bytes))
    return out


def _schedule_phases(schedule: str, stage: int, num_stages: int, B: int,
                     backward: bool) -> list[tuple[str, int]]:
    if not backward:
        return [("fwd", b) for b in range(B)]
    if schedule == GPIPE:
        return [("fwd", b) for b in range(B)] + [("bwd", b) for b in range(B)]
    # 1F1B: warmup forwards, then alternate one backward with one forward.
    warmup = min(B, num_stages - stage)
    phases = [("fwd", b) for b in range(warmup)]
    for r in range(B):
        phases.append(("bwd", r))
        if warmup + r < B:
            phases.append(("fwd", warmup + r))
    return phases


def emit_instructions(plan: RuntimePlan, schedule: str = GPIPE) -> Program:
    """Static per-mesh instruction lists realizing the schedule for B
    microbatches; every Recv pairs with exactly one Send by tag."""
    if schedule not in SCHEDULES:
        raise ReshardError(f"unknown schedule {schedule!r}; choose from {SCHEDULES}")
    B = plan.num_microbatches
    S = len(plan.stages)
    backward = plan.has_backward
    boundaries = _stage_boundaries(plan)

    def incoming(i: int, phase: str) -> list[_Boundary]:
        return [b for b in boundaries if b.consumer == i and b.phase == phase]

    def outgoing(i: int, phase: str) -> list[_Boundary]:
        return [b for b in boundaries if b.producer == i and b.phase == phase]

    durations = _phase_durations(plan)
    programs = []
    for s in plan.stages:
        i = s.index
        ins: list[Instruction] = []
        for phase, b in _schedule_phases(schedule, i, S, B, backward):
            dur = durations[i][0] if phase == "fwd" else durations[i][1]
            for bd in incoming(i, phase):
                buf = f"{bd.tag_prefix}.{bd.producer}to{i}.{b}"
                ins.append(Instruction("alloc", i, b, buffer=buf, nbytes=bd.recv_bytes))
                ins.append(Instruction("recv", i, b, buffer=buf, peer=bd.producer,
                                       nbytes=bd.plan.inter_mesh_bytes,
                                       tag=f"{bd.tag_prefix}:{bd.producer}>{i}:{b}"))
                for g in bd.plan.gathers:
                    ins.append(Instruction("all_gather", i, b, nbytes=g.nbytes,
                                           axes=g.axes))
            if phase == "fwd":
                ins.append(Instruction("alloc", i, b, buffer=f"act{i}.{b}",
                                       nbytes=s.mem_act))
            ins.append(Instruction("compute", i, b, phase=phase, duration=dur))
            for bd in outgoing(i, phase):
                ins.append(Instruction("send", i, b, peer=bd.consumer,
                                       nbytes=bd.plan.inter_mesh_bytes,
                                       tag=f"{bd.tag_prefix}:{i}>{bd.consumer}:{b}",
                                       pairs=tuple((t.src_device, t.dst_device, t.nbytes)
                                                   for t in bd.plan.transfers)))
            # Gradient inputs retire immediately; activation inputs are
            # retained until the colocated backward compute has run.
            if phase == "bwd" or not backward:
                for bd in incoming(i, "fwd"):
                    ins.append(Instruction("free", i, b,
                                           buffer=f"f.{bd.producer}to{i}.{b}",
                                           nbytes=bd.recv_bytes))
                for bd in incoming(i, "bwd"):
                    ins.append(Instruction("free", i, b,
                                           buffer=f"b.{bd.producer}to{i}.{b}",
                                           nbytes=bd.recv_bytes))
                ins.append(Instruction("free", i, b, buffer=f"act{i}.{b}",
                                       nbytes=s.mem_act))
        ins.append(Instruction("sync", i))
        programs.append(StageProgram(i, tuple(s.view.device_ids), s.view,
                                     s.mem_stage, ins))
    return Program(programs, B, schedule, backward, plan.t_star)


def _phase_durations(plan: RuntimePlan) -> dict[int, tuple[Fraction, Fraction]]:
    """Exact (fwd, bwd) compute durations per stage; they sum to the stage's
    modeled latency, split by FLOP share when a backward pass exists."""
    out = {}
    for s in plan.stages:
        if not plan.has_backward:
            out[s.index] = (s.t, Fraction(0))
            continue
        fwd_flop = sum(plan.graph.node(oid).flop for oid in s.op_ids
                       if plan.graph.node(oid).colocate_with is None)
        total = sum(plan.graph.node(oid).flop for oid in s.op_ids)
        if total == 0:
            fwd = s.t / 2
        else:
            fwd = s.t * Fraction(fwd_flop, total)
        out[s.index] = (fwd, s.t - fwd)
    return out
