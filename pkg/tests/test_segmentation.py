import math
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadsage.errors import AttributeMissingError, ConfigError, DomainError
from roadsage.graph import RoadEdge, RoadGraph, RoadNode, arc_length
from roadsage.segmentation import (
    SegmentationConfig,
    interpolate_along,
    number_of_pieces,
    segment_by_attribute,
    segment_pipeline,
)


def one_edge_graph(geom, travel_time=10.0, **kw):
    nodes = [RoadNode("a", *geom[0]), RoadNode("b", *geom[-1])]
    return RoadGraph(nodes, [RoadEdge.from_geometry("e", "a", "b", geom, travel_time_s=travel_time, throughput_vpd=500.0, **kw)])


def test_interpolate_midpoint():
    p, before, after = interpolate_along([(0, 0), (100, 0)], 0.5)
    assert p == pytest.approx((50, 0))
    np.testing.assert_allclose(before, [(0, 0), (50, 0)])
    np.testing.assert_allclose(after, [(50, 0), (100, 0)])


def test_interpolate_end_is_last_vertex():
    geom = [(0, 0), (30, 40), (60, 0)]
    p, _, after = interpolate_along(geom, 1.0)
    assert p == pytest.approx(geom[-1])
    assert arc_length(after) == 0.0


def test_interpolate_l_shape():
    p, _, _ = interpolate_along([(0, 0), (100, 0), (100, 100)], 0.75)
    assert p == pytest.approx((100, 50))


def test_interpolate_rejects_bad_fraction():
    with pytest.raises(DomainError):
        interpolate_along([(0, 0), (1, 0)], 1.5)


def test_length_300_target_120():
    g = segment_by_attribute(one_edge_graph([(0, 0), (300, 0)]), "length_m", 120.0)
    assert len(g.edges) == 3 and len(g.nodes) == 4
    assert [e.length_m for e in g.edges.values()] == pytest.approx([100, 100, 100])
    assert [e.id for e in g.edges.values()] == ["e#1", "e#2", "e#3"]
    assert {e.parent_id for e in g.edges.values()} == {"e"}


def test_length_below_target_unchanged():
    g0 = one_edge_graph([(0, 0), (100, 0)])
    g = segment_by_attribute(g0, "length_m", 120.0)
    assert list(g.edges) == ["e"] and g.edges["e"] is g0.edges["e"]


def test_travel_time_45_target_15():
    g = segment_by_attribute(one_edge_graph([(0, 0), (90, 0)], travel_time=45.0), "travel_time_s", 15.0)
    assert [e.travel_time_s for e in g.edges.values()] == pytest.approx([15, 15, 15])


def test_pipeline_time_then_length():
    g = segment_pipeline(one_edge_graph([(0, 0), (240, 0)], travel_time=40.0), SegmentationConfig(15, 120))
    assert len(g.edges) == 3
    for e in g.edges.values():
        assert e.length_m == pytest.approx(80.0)
        assert e.travel_time_s == pytest.approx(40 / 3)


def test_pipeline_length_only():
    g = segment_pipeline(one_edge_graph([(0, 0), (500, 0)], travel_time=10.0))
    assert len(g.edges) == 5
    for e in g.edges.values():
        assert e.length_m == pytest.approx(100.0)
        assert e.travel_time_s == pytest.approx(2.0)


def test_empty_graph():
    g = segment_pipeline(RoadGraph([], []))
    assert len(g.edges) == 0 and len(g.nodes) == 0


def test_zero_attribute_kept():
    g = segment_by_attribute(one_edge_graph([(0, 0), (500, 0)], travel_time=0.0), "travel_time_s", 15.0)
    assert list(g.edges) == ["e"]


def test_missing_attribute_raises():
    with pytest.raises(AttributeMissingError):
        segment_by_attribute(one_edge_graph([(0, 0), (500, 0)], travel_time=None), "travel_time_s", 15.0)


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_nonpositive_target(bad):
    with pytest.raises(ConfigError):
        SegmentationConfig(bad, 120.0)


@given(st.floats(0, 1e5), st.floats(1e-3, 1e3))
def test_number_of_pieces_bound(a, t):
    n = number_of_pieces(a, t)
    assert n >= 1 and a / n <= t
    assert n == 1 or a / (n - 1) > t


def _random_polyline(rng):
    k = int(rng.integers(2, 7))
    steps = rng.normal(0, 150, size=(k - 1, 2))
    pts = np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)])
    return [tuple(p) for p in pts]


def random_road_graph(rng, n_edges):
    nodes, edges = [], []
    for i in range(n_edges):
        geom = [(x + 5000.0 * i, y) for x, y in _random_polyline(rng)]
        nodes += [RoadNode(f"a{i}", *geom[0]), RoadNode(f"b{i}", *geom[-1])]
        edges.append(RoadEdge.from_geometry(f"e{i:04d}", f"a{i}", f"b{i}", geom, travel_time_s=float(rng.uniform(0, 120)), throughput_vpd=1.0))
    return RoadGraph(nodes, edges)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pipeline_properties(seed):
    cfg = SegmentationConfig()
    orn = random_road_graph(np.random.default_rng(seed), 8)
    srn = segment_pipeline(orn, cfg)
    groups = defaultdict(list)
    for e in srn.edges.values():
        assert e.length_m <= cfg.target_length_m * (1 + 1e-12)
        assert e.travel_time_s <= cfg.target_traveltime_s * (1 + 1e-12)
        groups[e.parent_id].append(e)
    assert set(groups) == set(orn.edges)
    for pid, kids in groups.items():
        parent = orn.edges[pid]
        kids.sort(key=lambda e: [int(x) for x in e.id.split("#")[1:]])
        assert math.isclose(sum(e.length_m for e in kids), parent.length_m, rel_tol=1e-6)
        assert math.isclose(sum(e.travel_time_s for e in kids), parent.travel_time_s, rel_tol=1e-6, abs_tol=1e-12)
        # children chain from the parent's tail to its head
        assert kids[0].u == parent.u and kids[-1].v == parent.v
        for a, b in zip(kids[:-1], kids[1:]):
            assert a.v == b.u
        # geometry conservation: concatenated child geometry has the parent's arc length and vertices
        joined = [kids[0].geometry[0]] + [p for e in kids for p in e.geometry[1:]]
        assert math.isclose(arc_length(joined), parent.length_m, rel_tol=1e-9)
        for v in parent.geometry:
            assert min(math.dist(v, q) for q in joined) < 1e-9
    # idempotence
    again = segment_pipeline(srn, cfg)
    assert list(again.edges) == list(srn.edges)
    assert {(e.u, e.v) for e in again.edges.values()} == {(e.u, e.v) for e in srn.edges.values()}
