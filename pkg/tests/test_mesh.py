import random
from fractions import Fraction

import pytest

from conftest import make_cluster
from meshplan.mesh import (ClusterMesh, MeshError, SubmeshShape,
                           admissible_shapes, concrete_view, cover,
                           logical_views, verify_cover)


def shapes_of(cluster):
    return {(s.n, s.m) for s in admissible_shapes(cluster)}


def test_admissible_shapes_2x4():
    assert shapes_of(make_cluster(2, 4)) == {(1, 1), (1, 2), (1, 4), (2, 4)}


def test_admissible_shapes_degenerate():
    assert shapes_of(make_cluster(1, 1)) == {(1, 1)}


def test_admissible_shapes_4x8():
    # 4 one-dimensional + 3 full-width shapes.
    got = shapes_of(make_cluster(4, 8))
    assert got == {(1, 1), (1, 2), (1, 4), (1, 8), (2, 8), (3, 8), (4, 8)}
    assert len(got) == 7


def test_admissible_shapes_sorted_descending():
    sizes = [s.num_devices for s in admissible_shapes(make_cluster(4, 8))]
    assert sizes == sorted(sizes, reverse=True)


def test_devices_per_host_must_be_power_of_two():
    with pytest.raises(MeshError):
        make_cluster(2, 3)


def test_cover_row_bands():
    cluster = make_cluster(3, 4)
    asg = cover(cluster, [SubmeshShape(2, 4), SubmeshShape(1, 4)])
    assert verify_cover(cluster, asg)
    assert asg[0].host_range == (0, 2) and asg[0].device_range == (0, 4)
    assert asg[1].host_range == (2, 3) and asg[1].device_range == (0, 4)


def test_cover_pairs_units():
    cluster = make_cluster(2, 4)
    shapes = [SubmeshShape(1, 4), SubmeshShape(1, 2), SubmeshShape(1, 1), SubmeshShape(1, 1)]
    asg = cover(cluster, shapes)
    assert verify_cover(cluster, asg)
    # Result is parallel to the input multiset.
    assert [a.shape for a in asg] == shapes


def test_cover_sum_mismatch():
    with pytest.raises(MeshError, match="sum"):
        cover(make_cluster(1, 2), [SubmeshShape(1, 1)])


def test_cover_inadmissible_shape():
    with pytest.raises(MeshError, match="admissible"):
        cover(make_cluster(2, 4), [SubmeshShape(2, 2), SubmeshShape(1, 4)])


def test_verify_cover_rejects_overlap_and_gap():
    cluster = make_cluster(1, 2)
    a = cover(cluster, [SubmeshShape(1, 1), SubmeshShape(1, 1)])
    assert verify_cover(cluster, a)
    assert not verify_cover(cluster, [a[0], a[0]])   # overlap
    assert not verify_cover(cluster, [a[0]])         # missing cell


def random_piece_multiset(rng, N, M):
    """Random multiset satisfying the covering hypotheses."""
    shapes = []
    rows = N
    while rows > 0 and rng.random() < 0.5 and rows >= 2:
        n = rng.randint(2, rows)
        shapes.append(SubmeshShape(n, M))
        rows -= n
    remaining = rows * M
    while remaining > 0:
        max_p = 1
        while max_p * 2 <= min(M, remaining):
            max_p *= 2
        choices = []
        p = 1
        while p <= max_p:
            choices.append(p)
            p *= 2
        m = rng.choice(choices)
        shapes.append(SubmeshShape(1, m))
        remaining -= m
    rng.shuffle(shapes)
    return shapes


@pytest.mark.parametrize("seed", range(5))
def test_cover_randomized(seed):
    rng = random.Random(seed)
    for _ in range(200):
        N = rng.randint(1, 8)
        M = 2 ** rng.randint(0, 4)
        cluster = make_cluster(N, M)
        shapes = random_piece_multiset(rng, N, M)
        asg = cover(cluster, shapes)
        assert verify_cover(cluster, asg)


def test_single_row_pieces_stay_on_one_host():
    rng = random.Random(7)
    for _ in range(300):
        N = rng.randint(1, 6)
        M = 2 ** rng.randint(0, 3)
        cluster = make_cluster(N, M)
        for a in cover(cluster, random_piece_multiset(rng, N, M)):
            if a.shape.n == 1:
                assert a.host_range[1] - a.host_range[0] == 1


def test_logical_views_2x4():
    views = [(v.n_l, v.m_l) for v in logical_views(SubmeshShape(2, 4), make_cluster(2, 4))]
    assert views == [(1, 8), (2, 4), (4, 2), (8, 1)]


def test_logical_views_1x1():
    assert [(v.n_l, v.m_l) for v in logical_views(SubmeshShape(1, 1), make_cluster(2, 4))] \
        == [(1, 1)]


def test_logical_views_1x4():
    views = [(v.n_l, v.m_l) for v in logical_views(SubmeshShape(1, 4), make_cluster(2, 4))]
    assert views == [(1, 4), (2, 2), (4, 1)]


def test_logical_views_include_physical_shape():
    cluster = make_cluster(4, 4)
    for shape in admissible_shapes(cluster):
        views = [(v.n_l, v.m_l) for v in logical_views(shape, cluster)]
        assert (shape.n, shape.m) in views


def test_axis_bandwidths_worst_link():
    cluster = make_cluster(2, 4, intra=100, inter=10)
    for view in logical_views(SubmeshShape(2, 4), cluster):
        if (view.n_l, view.m_l) == (2, 4):
            assert view.axis_bandwidth == (Fraction(10), Fraction(100))
        if (view.n_l, view.m_l) == (1, 8):
            # Single axis mixes intra- and inter-host hops: worst link.
            assert view.axis_bandwidth[1] == Fraction(10)
    for view in logical_views(SubmeshShape(1, 4), cluster):
        # Everything within one host.
        assert view.axis_bandwidth == (Fraction(100), Fraction(100))


def test_concrete_view_device_ids():
    cluster = make_cluster(2, 4)
    asg = cover(cluster, [SubmeshShape(2, 4)])[0]
    view = logical_views(SubmeshShape(2, 4), cluster)[1]
    cv = concrete_view(view, asg, cluster)
    assert cv.device_ids == (0, 1, 2, 3, 4, 5, 6, 7)
    assert cv.coord_device(1, 0) == 4
