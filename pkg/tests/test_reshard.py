import itertools
import random
from fractions import Fraction

import pytest

from conftest import make_cluster
from meshplan.graph import TensorShape, _Builder
from meshplan.mesh import LogicalMesh
from meshplan.reshard import (GPIPE, ONE_F_ONE_B, ReshardError, RuntimePlan,
                              RuntimeStage, cross_mesh_plan, emit_instructions,
                              materialization_ok)
from meshplan.sharding import enumerate_specs, parse_spec


def concrete(n0, n1, first_id, bw=10**9):
    ids = tuple(range(first_id, first_id + n0 * n1))
    return LogicalMesh(n0, n1, (Fraction(bw), Fraction(bw)), ids)


def test_equal_meshes_identical_specs_point_to_point():
    shape = TensorShape((8, 8))
    src, dst = concrete(1, 2, 0), concrete(1, 2, 2)
    spec = parse_spec("RS^1")
    p = cross_mesh_plan(shape, spec, src, spec, dst)
    assert p.inter_mesh_bytes == shape.byte_size
    assert len(p.transfers) == 2
    assert {(t.src_device, t.dst_device) for t in p.transfers} == {(0, 2), (1, 3)}
    assert materialization_ok(p, shape, spec, dst)


def test_replicated_destination_sends_once():
    shape = TensorShape((8, 8))
    for d in (2, 4):
        src = concrete(1, d, 0)
        dst = concrete(1, d, d)
        src_spec = parse_spec("RS^0" if d == 1 else "S^0R")
        dst_spec = parse_spec("RR")
        optimized = cross_mesh_plan(shape, src_spec, src, dst_spec, dst)
        naive = cross_mesh_plan(shape, src_spec, src, dst_spec, dst, optimize=False)
        assert optimized.inter_mesh_bytes == shape.byte_size
        assert naive.inter_mesh_bytes == d * shape.byte_size
        assert optimized.gathers
        assert materialization_ok(optimized, shape, dst_spec, dst)
        assert materialization_ok(naive, shape, dst_spec, dst)


def test_replicated_source_zero_redundancy():
    shape = TensorShape((8, 8))
    src = concrete(2, 2, 0)
    dst = concrete(2, 2, 4)
    p = cross_mesh_plan(shape, parse_spec("RR"), src, parse_spec("S^0S^1"), dst)
    # Every destination tile arrives exactly once, from the lowest holder.
    assert p.inter_mesh_bytes == shape.byte_size
    assert all(t.src_device == 0 for t in p.transfers)
    seen = set()
    for t in p.transfers:
        assert (t.dst_device, t.box) not in seen
        seen.add((t.dst_device, t.box))
    assert materialization_ok(p, shape, parse_spec("S^0S^1"), dst)


def test_disjoint_device_sets_required():
    shape = TensorShape((4, 4))
    src = concrete(1, 2, 0)
    with pytest.raises(ReshardError):
        cross_mesh_plan(shape, parse_spec("RR"), src, parse_spec("RR"), src)


def mesh_choices():
    out = []
    for n0, n1 in [(1, 1), (1, 2), (2, 1), (2, 2), (1, 4), (4, 1), (2, 4), (4, 4)]:
        out.append((n0, n1))
    return out


@pytest.mark.parametrize("seed", range(4))
def test_randomized_local_all_gather_reduction(seed):
    rng = random.Random(seed)
    shape = TensorShape((8, 8))
    for _ in range(60):
        sn, sm = rng.choice(mesh_choices())
        dn, dm = rng.choice(mesh_choices())
        src = concrete(sn, sm, 0)
        dst = concrete(dn, dm, sn * sm)
        src_spec = rng.choice(enumerate_specs(shape, src))
        dst_spec = rng.choice(enumerate_specs(shape, dst))
        optimized = cross_mesh_plan(shape, src_spec, src, dst_spec, dst)
        naive = cross_mesh_plan(shape, src_spec, src, dst_spec, dst, optimize=False)
        assert optimized.inter_mesh_bytes <= naive.inter_mesh_bytes
        nontrivial = any(dst.extent(a) > 1
                         for a in dst_spec.replication_axes(dst))
        if nontrivial:
            assert optimized.inter_mesh_bytes < naive.inter_mesh_bytes
        assert materialization_ok(optimized, shape, dst_spec, dst)
        assert materialization_ok(naive, shape, dst_spec, dst)


def test_materialization_exhaustive_small_meshes():
    shape = TensorShape((8, 8))
    for (sn, sm), (dn, dm) in itertools.product([(1, 2), (2, 2)], repeat=2):
        src = concrete(sn, sm, 0)
        dst = concrete(dn, dm, 16)
        for src_spec in enumerate_specs(shape, src):
            for dst_spec in enumerate_specs(shape, dst):
                p = cross_mesh_plan(shape, src_spec, src, dst_spec, dst)
                assert materialization_ok(p, shape, dst_spec, dst)


# --- instruction lists ------------------------------------------------------

def synthetic_runtime(stage_times, B, backward=False, act_bytes=64,
                      boundary_dims=(4, 4)):
    """Chain graph with one compute node per stage and prescribed latencies."""
    S = len(stage_times)
    b = _Builder()
    cur = b.input(TensorShape(boundary_dims))
    fwd = []
    for _ in range(S):
        cur = b.elementwise(cur)
        fwd.append(cur)
    if backward:
        g_node = b.elementwise(cur, colocate_with=cur)
        bwd = [g_node]
        for i in range(S - 1, 0, -1):
            g_node = b.elementwise(g_node, colocate_with=fwd[i - 1])
            bwd.append(g_node)
        bwd_of = {fwd[S - 1 - j]: bwd[j] for j in range(S)}
    graph = b.graph([b.nodes[-1].id])
    cluster = make_cluster(S if S > 1 else 1, 1, memory=10**9)
    rr = parse_spec("RR")
    stages = []
    for i in range(S):
        ops = [fwd[i]] + ([bwd_of[fwd[i]]] if backward else [])
        inputs = {}
        src = graph.node(fwd[i]).inputs[0][0]
        if i > 0:
            inputs[src] = rr
        if backward and i < S - 1:
            grad_src = graph.node(bwd_of[fwd[i]]).inputs[0][0]
            inputs[grad_src] = rr
        outputs = {fwd[i]: rr}
        if backward:
            outputs[bwd_of[fwd[i]]] = rr
        stages.append(RuntimeStage(
            index=i, view=concrete(1, 1, i), op_ids=tuple(sorted(ops)),
            t=Fraction(stage_times[i]), mem_stage=0, mem_act=act_bytes,
            output_specs=outputs, input_specs=inputs))
    total = sum(Fraction(t) for t in stage_times)
    t_star = total + (B - 1) * max(Fraction(t) for t in stage_times)
    return RuntimePlan(graph, cluster, tuple(stages), B, t_star)


def test_single_stage_three_microbatches():
    rt = synthetic_runtime([2], 3)
    prog = emit_instructions(rt, GPIPE)
    ins = prog.stages[0].instructions
    computes = [i for i in ins if i.op == "compute"]
    assert [(c.phase, c.microbatch) for c in computes] == [("fwd", b) for b in range(3)]
    assert not any(i.op in ("send", "recv") for i in ins)


def test_single_stage_backward_adds_bwd_computes():
    rt = synthetic_runtime([2], 3, backward=True)
    prog = emit_instructions(rt, GPIPE)
    computes = [i for i in prog.stages[0].instructions if i.op == "compute"]
    assert sum(1 for c in computes if c.phase == "fwd") == 3
    assert sum(1 for c in computes if c.phase == "bwd") == 3


def test_gpipe_two_stage_pairing():
    rt = synthetic_runtime([1, 1], 2)
    prog = emit_instructions(rt, GPIPE)
    ops0 = [(i.op, i.microbatch) for i in prog.stages[0].instructions
            if i.op in ("compute", "send")]
    assert ops0 == [("compute", 0), ("send", 0), ("compute", 1), ("send", 1)]
    sends = {i.tag for sp in prog.stages for i in sp.instructions if i.op == "send"}
    recvs = [i.tag for sp in prog.stages for i in sp.instructions if i.op == "recv"]
    assert sends == set(recvs) and len(recvs) == len(sends)


def test_every_alloc_freed_after_last_use():
    rt = synthetic_runtime([1, 2, 1], 3, backward=True)
    prog = emit_instructions(rt, ONE_F_ONE_B)
    for sp in prog.stages:
        events = {}
        for idx, i in enumerate(sp.instructions):
            if i.buffer:
                events.setdefault(i.buffer, []).append((idx, i.op))
        for buf, evs in events.items():
            ops = [op for _, op in evs]
            assert ops.count("alloc") == 1 and ops.count("free") == 1
            assert ops[0] == "alloc" and ops[-1] == "free"


@pytest.mark.parametrize("S,B", [(2, 4), (3, 5), (4, 6)])
def test_1f1b_inflight_bound(S, B):
    """Activations in flight at a stage never exceed subsequent stages + 1."""
    rt = synthetic_runtime([1] * S, B, backward=True)
    prog = emit_instructions(rt, ONE_F_ONE_B)
    for sp in prog.stages:
        cap = S - sp.stage
        live = 0
        peak = 0
        for i in sp.instructions:
            if i.buffer and i.buffer.startswith("act"):
                if i.op == "alloc":
                    live += 1
                    peak = max(peak, live)
                elif i.op == "free":
                    live -= 1
        assert peak <= cap
        if B >= cap:
            assert peak == cap


def test_gpipe_inflight_is_all_microbatches():
    S, B = 3, 5
    rt = synthetic_runtime([1] * S, B, backward=True)
    prog = emit_instructions(rt, GPIPE)
    sp = prog.stages[0]
    live = peak = 0
    for i in sp.instructions:
        if i.buffer and i.buffer.startswith("act"):
            live += 1 if i.op == "alloc" else -1
            peak = max(peak, live)
    assert peak == B


def test_unknown_schedule_rejected():
    rt = synthetic_runtime([1], 1)
    with pytest.raises(ReshardError):
        emit_instructions(rt, "pipedream")


def test_program_json_roundtrippable():
    import json
    rt = synthetic_runtime([1, 2], 2, backward=True)
    prog = emit_instructions(rt, GPIPE)
    doc = json.loads(json.dumps(prog.to_json()))
    assert doc["schedule"] == "gpipe"
    assert len(doc["stages"]) == 2
    ops = {i["op"] for sp in doc["stages"] for i in sp["instructions"]}
    assert ops >= {"alloc", "free", "compute", "send", "recv", "sync"}
