from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from drivebench.control import ControlCommand
from drivebench.expert import ExpertDriver, ZeroDriver
from drivebench.roadnet import StopSign, TrafficLight
from drivebench.simcore import (Actor, ActorKind, EventKind, InfractionMonitor, Pose, RouteContext, SimConfig,
                                VehicleParams, WorldState, ego_update, init_world, run_episode, spawn_scenario,
                                step)

P = VehicleParams()
DT = 0.05


def test_rest_without_input_stays_put():
    p = ego_update(Pose(3.0, 4.0, 0.3, 0.0), ControlCommand(), DT, P)
    assert (p.x, p.y, p.speed) == (3.0, 4.0, 0.0)
    assert p.heading == pytest.approx(0.3, abs=1e-15)


def test_full_throttle_matches_closed_form():
    ref = oracles.speed_sequence(600, DT, P.a_max, P.drag, P.v_max)
    pose = Pose(0.0, 0.0, 0.0, 0.0)
    speeds = []
    for _ in range(600):
        pose = ego_update(pose, ControlCommand(0.0, 1.0, 0.0), DT, P)
        speeds.append(pose.speed)
    np.testing.assert_allclose(speeds, ref, rtol=0, atol=1e-9)
    capped = speeds.index(P.v_max)
    assert all(b > a for a, b in zip(speeds[:capped], speeds[1:capped + 1]))
    assert all(v == P.v_max for v in speeds[capped:])


def test_straight_steer_keeps_heading_and_left_is_negative():
    pose = Pose(0.0, 0.0, 0.7, 5.0)
    for _ in range(40):
        pose = ego_update(pose, ControlCommand(0.0, 0.2, 0.0), DT, P)
    assert pose.heading == pytest.approx(0.7, abs=1e-12)
    left = ego_update(Pose(0.0, 0.0, 0.0, 5.0), ControlCommand(-0.5, 0.0, 0.0), DT, P)
    assert left.heading > 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 20))
def test_control_clamped_and_speed_nonnegative(steer, throttle, brake, v):
    p = ego_update(Pose(0.0, 0.0, 0.0, v), ControlCommand(steer, throttle, brake), DT, P)
    assert 0.0 <= p.speed <= P.v_max
    c = ControlCommand(steer, throttle, brake).clamped()
    assert -1 <= c.steer <= 1 and 0 <= c.throttle <= 1 and 0 <= c.brake <= 1


def test_time_budget():
    assert SimConfig().time_budget(400.0) == pytest.approx(400.0 / 5.0 * 2.0)


def _ctx(town, route, **cfg):
    return RouteContext(town, route, SimConfig(**cfg))


def _empty_world(ctx, s=0.0, speed=0.0, tick=0):
    p = ctx.plan.point_at(s)
    return WorldState(tick, DT, Pose(float(p[0]), float(p[1]), ctx.plan.heading_at(s), speed), [],
                      np.random.default_rng(0))


def _drive_to(world, ctx, mon, s_to, speed=5.0, ds=0.25):
    """Teleport the ego along the route in small steps, collecting events."""
    events = []
    s = world.route_s
    while s < s_to:
        s = min(s + ds, s_to)
        p = ctx.plan.point_at(s)
        world.ego = Pose(float(p[0]), float(p[1]), ctx.plan.heading_at(s), speed)
        world.tick += 1
        events += mon.update(world)
    return events


def test_collision_debounced(town, tiny_routes):
    ctx = _ctx(town, tiny_routes[0])
    world = _empty_world(ctx)
    world.actors = [Actor(0, ActorKind.PEDESTRIAN, Pose(world.ego.x, world.ego.y, 0.0, 0.0), 4.0, 4.0, 1.7)]
    mon = InfractionMonitor(ctx)
    mon.reset(world)
    events = []
    for _ in range(40):
        world, ev = step(world, ControlCommand(), ctx, mon)
        events += ev
    kinds = [e.kind for e in events]
    assert kinds.count(EventKind.COLLISION_PEDESTRIAN) == 1
    # separate, then touch again: a second event
    world.actors[0].pose = Pose(world.ego.x + 50.0, world.ego.y, 0.0, 0.0)
    world, ev = step(world, ControlCommand(), ctx, mon)
    assert ev == [] or all(e.kind is not EventKind.COLLISION_PEDESTRIAN for e in ev)
    world.actors[0].pose = Pose(world.ego.x, world.ego.y, 0.0, 0.0)
    world, ev = step(world, ControlCommand(), ctx, mon)
    assert [e.kind for e in ev].count(EventKind.COLLISION_PEDESTRIAN) == 1


@pytest.mark.parametrize("kind", [ActorKind.VEHICLE, ActorKind.STATIC])
def test_collision_kinds(town, tiny_routes, kind):
    ctx = _ctx(town, tiny_routes[0])
    world = _empty_world(ctx)
    world.actors = [Actor(0, kind, Pose(world.ego.x + 1.0, world.ego.y, 0.0, 0.0), 2.0, 1.0, 1.5)]
    mon = InfractionMonitor(ctx)
    mon.reset(world)
    world.tick += 1
    ev = mon.update(world)
    expected = EventKind.COLLISION_VEHICLE if kind is ActorKind.VEHICLE else EventKind.COLLISION_STATIC
    assert [e.kind for e in ev] == [expected]


def _route_with(control_type, routes, town):
    for r in routes:
        ctx = RouteContext(town, r)
        for k, j in enumerate(ctx.junctions):
            if isinstance(j[3], control_type) and j[0] > 25.0:
                return ctx, k
    pytest.skip(f"no route with a {control_type.__name__} junction")


def _light_time(ctrl, axis, want, span=4.0):
    for t10 in range(0, int(ctrl.cycle * 100)):
        t = t10 / 100
        if all(ctrl.state(t + u, axis) == want for u in np.linspace(0, span, 9)):
            return t
    raise AssertionError("no window")


@pytest.mark.parametrize("color,expected", [("green", 0), ("red", 1)])
def test_red_light_detection(town, tiny_routes, short_routes, color, expected):
    ctx, k = _route_with(TrafficLight, tiny_routes + short_routes, town)
    s_in, _, _, ctrl, axis, _ = ctx.junctions[k]
    t = _light_time(ctrl, axis, color)
    world = _empty_world(ctx, s=s_in - 6.0, speed=5.0, tick=int(round(t / DT)))
    mon = InfractionMonitor(ctx)
    mon.s = world.route_s = s_in - 6.0
    mon.last_xy = (world.ego.x, world.ego.y)
    ev = _drive_to(world, ctx, mon, s_in + 3.0)
    assert [e.kind for e in ev].count(EventKind.RED_LIGHT) == expected


@pytest.mark.parametrize("stop_first,expected", [(False, 1), (True, 0)])
def test_stop_sign_detection(town, tiny_routes, short_routes, stop_first, expected):
    ctx, k = _route_with(StopSign, tiny_routes + short_routes, town)
    s_in = ctx.junctions[k][0]
    world = _empty_world(ctx, s=s_in - 15.0, speed=5.0)
    mon = InfractionMonitor(ctx)
    mon.s = world.route_s = s_in - 15.0
    mon.last_xy = (world.ego.x, world.ego.y)
    ev = _drive_to(world, ctx, mon, s_in - 3.0)
    if stop_first:
        ev += _drive_to(world, ctx, mon, s_in - 2.9, speed=0.0, ds=0.1)
    ev += _drive_to(world, ctx, mon, s_in + 3.0)
    assert [e.kind for e in ev].count(EventKind.STOP_SIGN) == expected


def test_route_deviation_and_offroad(town, short_routes):
    ctx = _ctx(town, short_routes[0])
    world = _empty_world(ctx, s=20.0, speed=3.0)
    mon = InfractionMonitor(ctx)
    mon.reset(world)
    h = world.ego.heading
    normal = np.array([-math.sin(h), math.cos(h)])
    ev = []
    for k in range(1, 40):
        p = ctx.plan.point_at(20.0) + normal * k
        world.ego = Pose(float(p[0]), float(p[1]), h, 3.0)
        world.tick += 1
        ev += mon.update(world)
        if mon.terminal is not None:
            break
    kinds = [e.kind for e in ev]
    assert mon.terminal is EventKind.ROUTE_DEVIATION
    assert kinds[-1] is EventKind.ROUTE_DEVIATION
    assert mon.d > 30.0
    assert kinds.count(EventKind.OFF_ROAD) == 1
    assert mon.offroad_distance > 0.0


def test_spawn_is_seeded(town, short_routes):
    ctx = RouteContext(town, short_routes[0])
    a = init_world(ctx, 3)
    b = init_world(ctx, 3)
    c = init_world(ctx, 4)
    key = lambda w: [(x.kind, x.pose.x, x.pose.y, x.pose.heading, x.target_speed) for x in w.actors]  # noqa: E731
    assert key(a) == key(b)
    assert key(a) != key(c)


def _jaywalkers(world):
    return [a for a in world.actors if a.kind is ActorKind.PEDESTRIAN and math.isfinite(a.trigger_s)]


@pytest.mark.parametrize("seed", range(5))
def test_jaywalker_probability(town, short_routes, seed):
    from drivebench.roadnet import project_onto_route

    for r in short_routes:
        ctx0 = RouteContext(town, r, SimConfig(p_jay=0.0))
        w0 = spawn_scenario(_empty_world(ctx0), ctx0, np.random.default_rng(seed))
        assert _jaywalkers(w0) == []
        ctx1 = RouteContext(town, r, SimConfig(p_jay=1.0))
        w1 = spawn_scenario(_empty_world(ctx1), ctx1, np.random.default_rng(seed))
        jw = _jaywalkers(w1)
        assert len(jw) == 1
        mid = jw[0].path.mean(axis=0)
        s, d = project_onto_route(r.plan, mid)
        assert 0.0 < s <= 100.0
        assert d < 3.0


def test_zero_driver_blocks_after_sixty_seconds(town, short_routes):
    r = next(x for x in short_routes if x.length >= 160.0)
    log = run_episode(town, r, ZeroDriver(), seed=0)
    assert log.completed == "AgentBlocked"
    assert log.duration == pytest.approx(60.0, abs=DT)
    assert all(c == (0.0, 0.0, 1.0) for c in log.controls)
    assert log.driven_distance == 0.0


def test_episode_log_invariants(town, tiny_routes):
    for r in tiny_routes[:4]:
        log = run_episode(town, r, ExpertDriver(), seed=1)
        start = r.plan.points[0]
        xy = np.vstack([start, np.array(log.poses)[:, :2]])
        assert log.driven_distance == pytest.approx(np.hypot(*np.diff(xy, axis=0).T).sum(), abs=1e-6)
        assert log.driven_distance >= min(log.s_final, r.length) - 1e-6
        assert min(p[3] for p in log.poses) >= 0.0
        assert log.completed in {"Finished", "RouteDeviation", "AgentBlocked", "RouteTimeout"}
        ticks = [e.tick for e in log.events]
        assert ticks == sorted(ticks)


def test_replay_is_byte_identical(town, tiny_routes):
    a = run_episode(town, tiny_routes[2], ExpertDriver(), seed=7)
    b = run_episode(town, tiny_routes[2], ExpertDriver(), seed=7)
    assert a.to_ndjson() == b.to_ndjson()


def test_record_mode_samples_at_two_hz(town, short_routes):
    log = run_episode(town, short_routes[0], ExpertDriver(), seed=0, mode="record")
    assert abs(len(log.frames) - 2 * log.duration) <= 1
    assert all(f.expert_waypoints.shape == (4, 2) for f in log.frames)
    assert [f.tick for f in log.frames] == list(range(0, 10 * len(log.frames), 10))


def test_policy_failure_is_terminal(town, tiny_routes):
    class Broken:
        needs_observation = False

        def reset(self, ctx):
            pass

        def __call__(self, world, ctx, obs):
            return np.full((4, 2), np.nan)

    log = run_episode(town, tiny_routes[0], Broken(), seed=0)
    assert log.completed == "PolicyError"
    assert "non-finite" in log.error


def test_route_timeout_fires_after_budget(town, tiny_routes):
    class Crawl:
        needs_observation = False

        def reset(self, ctx):
            pass

        def __call__(self, world, ctx, obs):
            return np.array([[0.25, 0.0], [0.5, 0.0], [0.75, 0.0], [1.0, 0.0]])

    r = tiny_routes[0]
    log = run_episode(town, r, Crawl(), seed=0, config=SimConfig(vehicle_density=0, pedestrian_density=0, p_jay=0))
    budget = SimConfig().time_budget(r.length)
    assert log.completed == "RouteTimeout"
    assert log.duration > budget
    assert log.duration <= budget + 2 * DT
