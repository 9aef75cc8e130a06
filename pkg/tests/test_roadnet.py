from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import Delaunay

import oracles
from drivebench.roadnet import (JUNCTION_HALF, LANE_OFFSET, Lane, NoPath, RoadNetwork, TrafficLight, build_town,
                                plan_route, project_onto_route)


def test_two_block_town_has_four_connected_intersections():
    net = build_town(7, 2, (80.0, 120.0))
    assert len(net.intersections) == 4
    assert oracles.strongly_connected(net.to_dict())
    assert net.is_connected()


def test_same_seed_same_town():
    a = build_town(7, 3, (80.0, 120.0), drop_prob=0.3)
    b = build_town(7, 3, (80.0, 120.0), drop_prob=0.3)
    assert a.to_dict() == b.to_dict()
    assert build_town(8, 3, (80.0, 120.0)).to_dict() != a.to_dict()


@pytest.mark.parametrize("blocks", [0, 1])
def test_degenerate_town_rejected(blocks):
    with pytest.raises(ValueError):
        build_town(7, blocks, (80.0, 120.0))


def test_grid_counts(grid3):
    assert len(grid3.intersections) == 9


@pytest.mark.parametrize("seed", [0, 11, 12, 13, 99])
def test_lane_and_intersection_invariants(seed):
    net = build_town(seed, 5, (50.0, 70.0), drop_prob=0.2)
    assert oracles.strongly_connected(net.to_dict())
    for lane in net.lanes:
        assert len(lane.points) >= 2
        assert np.all(np.hypot(*np.diff(lane.points, axis=0).T) > 0)
        for s in lane.successors:
            assert lane.id in net.lanes[s].predecessors
        for p in lane.predecessors:
            assert lane.id in net.lanes[p].successors
    for it in net.intersections:
        assert len(it.incident_lanes) >= 3
        if isinstance(it.control, TrafficLight):
            assert min(it.control.green, it.control.yellow, it.control.red) > 0
        ends = []
        for lid in it.incident_lanes:
            ends += [net.lanes[lid].points[0], net.lanes[lid].points[-1]]
        ends = np.array(ends)
        if len(it.incident_lanes) >= 6:
            assert Delaunay(ends).find_simplex(np.array(it.center)) >= 0
        else:
            # two-street grid corner: the center sits in the elbow of the L
            assert np.min(np.hypot(*(ends - np.array(it.center)).T)) <= JUNCTION_HALF + LANE_OFFSET


def test_light_rejects_nonpositive_durations():
    with pytest.raises(ValueError):
        TrafficLight(green=0.0)


def test_serialization_round_trip(town, tmp_path):
    town.save(tmp_path / "t.json")
    back = RoadNetwork.load(tmp_path / "t.json")
    assert back.to_dict() == town.to_dict()
    assert back.to_dict()["format"] == 1


def _corner_point(net, corner, toward):
    """A point 25 m from an intersection center along a street."""
    c = np.array(corner)
    return c + 25.0 * np.asarray(toward, dtype=float)


def test_opposite_corners_match_dijkstra(grid3):
    cs = np.array([it.center for it in grid3.intersections])
    lo = cs[np.argmin(cs.sum(axis=1))]
    hi = cs[np.argmax(cs.sum(axis=1))]
    a = _corner_point(grid3, lo, (1, 0))
    b = _corner_point(grid3, hi, (-1, 0))
    plan = plan_route(grid3, a, b)
    la, sa, _ = grid3.nearest_lane(a)
    lb, sb, _ = grid3.nearest_lane(b)
    assert plan.total_length == pytest.approx(oracles.dijkstra_length(grid3.to_dict(), (la, sa), (lb, sb)), abs=1e-6)


def test_plan_length_equals_lane_arc_length(town, short_routes):
    for r in short_routes:
        plan = r.plan
        total = 0.0
        for k, lid in enumerate(plan.lane_trace):
            L = oracles._polyline_length(town.lanes[lid].points.tolist())
            a = plan.start_offset if k == 0 else 0.0
            b = plan.end_offset if k == len(plan.lane_trace) - 1 else L
            total += b - a
        assert plan.total_length == pytest.approx(total, abs=1e-6)
        for u, v in zip(plan.lane_trace[:-1], plan.lane_trace[1:]):
            assert v in town.lanes[u].successors


def test_start_equals_end_gives_single_waypoint(town):
    p = town.lanes[0].point_at(10.0)
    plan = plan_route(town, p, p)
    assert plan.total_length == 0.0
    assert plan.G == 1


def test_disconnected_component_raises_nopath():
    lanes = [Lane(0, np.array([[0.0, 0.0], [50.0, 0.0]]), "road"),
             Lane(1, np.array([[0.0, 100.0], [50.0, 100.0]]), "road")]
    net = RoadNetwork(lanes, [], 0)
    with pytest.raises(NoPath):
        plan_route(net, (10.0, 0.0), (10.0, 100.0))


def test_twin_lane_routes_have_equal_length(grid3):
    # along one street the two directions mirror each other exactly
    roads = [l for l in grid3.lanes if l.kind == "road"]
    for lane in roads[:6]:
        p, q = lane.point_at(5.0), lane.point_at(lane.length - 5.0)
        off = np.array([-(q - p)[1], (q - p)[0]]) / np.linalg.norm(q - p) * 3.5
        fwd = plan_route(grid3, p, q).total_length
        back = plan_route(grid3, q + off, p + off).total_length
        assert fwd == pytest.approx(back, abs=1e-6)


def test_projection_endpoints(short_routes):
    plan = short_routes[0].plan
    s, d = project_onto_route(plan, plan.waypoints[0])
    assert (s, d) == pytest.approx((0.0, 0.0), abs=1e-9)
    s, d = project_onto_route(plan, plan.waypoints[-1])
    assert (s, d) == pytest.approx((plan.total_length, 0.0), abs=1e-6)


def test_projection_three_meters_left_of_straight_midpoint():
    lanes = [Lane(0, np.column_stack([np.arange(0.0, 101.0), np.zeros(101)]), "road")]
    net = RoadNetwork(lanes, [], 0)
    plan = plan_route(net, (0.0, 0.0), (100.0, 0.0))
    s, d = project_onto_route(plan, (50.0, 3.0))
    s_o, d_o = oracles.polyline_scan(plan.points.tolist(), (50.0, 3.0))
    assert (s, d) == pytest.approx((50.0, 3.0), abs=1e-6)
    assert (s, d) == pytest.approx((s_o, d_o), abs=1e-2)


def test_projection_matches_brute_force_on_random_points(short_routes):
    rng = np.random.default_rng(0)
    plan = short_routes[1].plan
    pts = plan.points.tolist()
    lo = plan.points.min(axis=0) - 20
    hi = plan.points.max(axis=0) + 20
    for p in rng.uniform(lo, hi, size=(1000, 2)):
        _, d = project_onto_route(plan, p)
        assert d == pytest.approx(oracles.segment_distance(pts, p), abs=1e-4)
    for p in rng.uniform(lo, hi, size=(5, 2)):
        s, d = project_onto_route(plan, p)
        s_o, d_o = oracles.polyline_scan(pts, p)
        assert d == pytest.approx(d_o, abs=1e-2)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.0))
def test_projection_idempotent(frac):
    net = build_town(3, 3, (80.0, 120.0))
    lane = net.lanes[0]
    plan = plan_route(net, lane.point_at(1.0), lane.point_at(lane.length - 1.0))
    s, _ = project_onto_route(plan, plan.point_at(frac * plan.total_length) + np.array([0.7, -1.3]))
    s2, d2 = project_onto_route(plan, plan.point_at(s))
    assert d2 == pytest.approx(0.0, abs=1e-9)
    assert 0.0 <= s <= plan.total_length
    assert math.isclose(s2, s, abs_tol=1e-6)
