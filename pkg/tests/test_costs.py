from fractions import Fraction

import pytest

from conftest import abstract_mesh, make_cluster
from meshplan.costs import CostModel
from meshplan.graph import OpGraph, OpKind, OpNode, TensorShape
from meshplan.mesh import LogicalMesh, MeshError
from meshplan.sharding import ALL_GATHER, ALL_REDUCE, parse_spec


def test_zero_byte_collective_costs_alpha():
    cm = CostModel(make_cluster(alpha=Fraction(3, 1000)))
    mesh = abstract_mesh(2, 2)
    assert cm.collective_time(ALL_GATHER, 0, (0,), mesh) == Fraction(3, 1000)


def test_all_reduce_ring_formula_by_hand():
    # 2 * (d-1)/d * bytes / bw with d=2, bytes=8, bw=1, alpha=0 -> 8 s.
    cm = CostModel(make_cluster(intra=1, inter=1, alpha=0))
    mesh = abstract_mesh(2, 1, bw0=1, bw1=1)
    assert cm.collective_time(ALL_REDUCE, 8, (0,), mesh) == Fraction(8)


def test_single_device_axis_is_free():
    cm = CostModel(make_cluster(alpha=Fraction(1, 100)))
    mesh = abstract_mesh(1, 4)
    assert cm.collective_time(ALL_REDUCE, 10**6, (0,), mesh) == 0


def test_unknown_axis_and_kind_rejected():
    cm = CostModel(make_cluster())
    mesh = abstract_mesh(2, 2)
    with pytest.raises(MeshError):
        cm.collective_time(ALL_GATHER, 8, (2,), mesh)
    with pytest.raises(MeshError):
        cm.collective_time("broadcast", 8, (0,), mesh)


def test_collective_time_monotone_in_bytes():
    cm = CostModel(make_cluster())
    mesh = abstract_mesh(2, 2)
    times = [cm.collective_time(ALL_GATHER, b, (0, 1), mesh) for b in range(0, 4096, 64)]
    assert all(a <= b for a, b in zip(times, times[1:]))


def test_compute_time_examples():
    cm = CostModel(make_cluster(flops=10))
    assert cm.compute_time(0, 4) == 0
    assert cm.compute_time(100, 1) == 10


def test_compute_time_monotone_in_devices():
    cm = CostModel(make_cluster())
    times = [cm.compute_time(10**9, d) for d in range(1, 16)]
    assert all(a >= b for a, b in zip(times, times[1:]))


def test_empty_collective_list_is_free():
    cm = CostModel(make_cluster())
    assert cm.collectives_time([], abstract_mesh(2, 2)) == 0


def _weight_stage():
    w = OpNode(0, OpKind.PARAMETER, (), TensorShape((8, 8)))
    x = OpNode(1, OpKind.INPUT, (), TensorShape((4, 8)))
    mm = OpNode(2, OpKind.MATMUL, ((1, 0), (0, 0)), TensorShape((4, 8)), 2 * 4 * 8 * 8)
    return OpGraph((w, x, mm), (2,))


def test_sharded_parameter_bytes_by_hand():
    # (8,8) fp32 split S^0R on a 2x1 mesh: 8*8*4/2 = 128 bytes per device.
    g = _weight_stage()
    mesh = abstract_mesh(2, 1)
    cm = CostModel(make_cluster())
    specs = {0: parse_spec("S^0R"), 1: parse_spec("S^0R"), 2: parse_spec("S^0R")}
    rep = cm.stage_memory(g, specs, [2], mesh, 1)
    # params 128; working set = matmul inputs (64 + 128) + output 64 = 256.
    assert rep.mem_stage == 128 + 256
    assert rep.mem_act == 64


def test_memory_feasibility_arithmetic():
    # mem_stage = W 256 + (x 128 + W 256 + out 128) = 768; mem_act = 128.
    g = _weight_stage()
    mesh = abstract_mesh(1, 1)
    specs = {i: parse_spec("RR") for i in range(3)}
    cm = CostModel(make_cluster(memory=768 + 2 * 128))
    r2 = cm.stage_memory(g, specs, [2], mesh, 2)
    assert (r2.mem_stage, r2.mem_act) == (768, 128) and r2.feasible
    cm_small = CostModel(make_cluster(memory=768 + 2 * 128 - 1))
    assert not cm_small.stage_memory(g, specs, [2], mesh, 2).feasible


def test_memory_feasibility_monotone_in_inflight():
    g = _weight_stage()
    mesh = abstract_mesh(1, 1)
    specs = {i: parse_spec("RR") for i in range(3)}
    cm = CostModel(make_cluster(memory=1100))
    feas = [cm.stage_memory(g, specs, [2], mesh, s).feasible for s in range(1, 8)]
    # Once infeasible, stays infeasible as s grows.
    assert feas == sorted(feas, reverse=True)


def test_volume_factor_overrides():
    from conftest import abstract_mesh
    base = CostModel(make_cluster(intra=1, inter=1, alpha=0))
    doubled = CostModel(make_cluster(intra=1, inter=1, alpha=0),
                        volume_factors={ALL_GATHER: Fraction(2)})
    mesh = abstract_mesh(2, 1, bw0=1, bw1=1)
    assert doubled.collective_time(ALL_GATHER, 8, (0,), mesh) == \
        2 * base.collective_time(ALL_GATHER, 8, (0,), mesh)
    # Untouched kinds keep the ring default.
    assert doubled.collective_time(ALL_REDUCE, 8, (0,), mesh) == \
        base.collective_time(ALL_REDUCE, 8, (0,), mesh)
