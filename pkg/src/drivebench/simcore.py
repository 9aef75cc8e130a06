"""Deterministic seeded world simulation.

One tick advances, in order: ego (kinematic bicycle), actors, traffic
lights (time-driven), then infraction detection. Identical world state,
control and RNG state always yield the identical successor.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import _kernels
from .control import ControlCommand, PidGains, PidState, pid
from .roadnet import JUNCTION_HALF, ROAD_HALF_WIDTH, RoadNetwork, StopSign, TrafficLight, project_onto_route
from .routegen import Maneuver, Route, segment_maneuvers


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.5
    max_steer: float = math.radians(35.0)
    a_max: float = 3.0
    b_max: float = 8.0
    v_max: float = 15.0
    drag: float = 0.1
    half_length: float = 2.25
    half_width: float = 1.0
    height: float = 1.5


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.05
    policy_every: int = 10
    blocked_time: float = 60.0
    blocked_speed: float = 0.1
    deviation_radius: float = 30.0
    offroad_threshold: float = 2.0
    timeout_speed: float = 5.0
    timeout_factor: float = 2.0
    finish_tolerance: float = 2.0
    stop_sign_window: float = 20.0
    stop_speed: float = 0.1
    collision_pushback: float = 0.5
    # scenario density: expected background actors per 100 m of route
    vehicle_density: float = 1.0
    pedestrian_density: float = 0.6
    prop_spacing: float = 20.0
    p_jay: float = 0.3
    actor_plan_every: int = 2

    def time_budget(self, route_length: float) -> float:
        return route_length / self.timeout_speed * self.timeout_factor


class ActorKind(str, enum.Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    STATIC = "static"


class EventKind(str, enum.Enum):
    COLLISION_PEDESTRIAN = "CollisionPedestrian"
    COLLISION_VEHICLE = "CollisionVehicle"
    COLLISION_STATIC = "CollisionStatic"
    RED_LIGHT = "RedLight"
    STOP_SIGN = "StopSign"
    ROUTE_DEVIATION = "RouteDeviation"
    AGENT_BLOCKED = "AgentBlocked"
    ROUTE_TIMEOUT = "RouteTimeout"
    OFF_ROAD = "OffRoad"


TERMINAL_EVENTS = {EventKind.ROUTE_DEVIATION, EventKind.AGENT_BLOCKED, EventKind.ROUTE_TIMEOUT}
COLLISION_KIND = {
    ActorKind.PEDESTRIAN: EventKind.COLLISION_PEDESTRIAN,
    ActorKind.VEHICLE: EventKind.COLLISION_VEHICLE,
    ActorKind.STATIC: EventKind.COLLISION_STATIC,
}


@dataclass(frozen=True)
class InfractionEvent:
    kind: EventKind
    tick: int
    position: tuple[float, float]

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "tick": self.tick, "position": [self.position[0], self.position[1]]}


@dataclass
class Pose:
    x: float
    y: float
    heading: float
    speed: float = 0.0

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class Actor:
    id: int
    kind: ActorKind
    pose: Pose
    half_length: float
    half_width: float
    height: float
    # behavior state
    lane: int = -1
    s: float = 0.0
    next_lanes: list = field(default_factory=list)
    target_speed: float = 0.0
    desired_speed: float = 0.0
    wait: float = 0.0
    served_lane: int = -1
    path: np.ndarray | None = None
    path_cum: np.ndarray | None = None
    trigger_s: float = math.inf
    active: bool = True

    def box(self) -> tuple[float, float, float, float, float]:
        return (self.pose.x, self.pose.y, self.half_length, self.half_width, self.pose.heading)


@dataclass
class WorldState:
    tick: int
    dt: float
    ego: Pose
    actors: list[Actor]
    rng: np.random.Generator
    seed: int = 0
    route_s: float = 0.0
    route_d: float = 0.0
    stops_served: set = field(default_factory=set)

    @property
    def time(self) -> float:
        return self.tick * self.dt

    def light_state(self, net: RoadNetwork, node: int, axis: int) -> str:
        ctrl = net.intersection(node).control
        if isinstance(ctrl, TrafficLight):
            return ctrl.state(self.time, axis)
        return "none"


def ego_box(world: WorldState, params: VehicleParams) -> tuple[float, float, float, float, float]:
    e = world.ego
    return (e.x, e.y, params.half_length, params.half_width, e.heading)


class RouteContext:
    """A route on its town with the lookups the simulator, expert and monitors need."""

    def __init__(self, net: RoadNetwork, route: Route, config: SimConfig = SimConfig()):
        self.net = net
        self.route = route
        self.plan = route.plan
        self.config = config
        self.segments = segment_maneuvers(self.plan)
        # (s_in, s_out, node, control, approach axis, turn)
        stops = []
        for lid, a, b in self.plan.lane_spans:
            lane = net.lanes[lid]
            if lane.kind != "connector" or b - a <= 1e-9:
                continue
            ctrl = net.intersection(lane.node).control
            stops.append((a, b, lane.node, ctrl, lane.axis, lane.turn))
        self.junctions = stops
        self.budget = config.time_budget(self.plan.total_length)

    def maneuver_at(self, s: float) -> Maneuver:
        for a, b, label in self.segments:
            if s < b:
                return label
        return self.segments[-1][2] if self.segments else Maneuver.FOLLOW_LANE


# dynamics


def ego_update(pose: Pose, control: ControlCommand, dt: float, params: VehicleParams) -> Pose:
    """Kinematic bicycle step. Negative steer turns left (counter clockwise)."""
    steer = min(max(control.steer, -1.0), 1.0)
    throttle = min(max(control.throttle, 0.0), 1.0)
    brake = min(max(control.brake, 0.0), 1.0)
    v = pose.speed
    x = pose.x + v * dt * math.cos(pose.heading)
    y = pose.y + v * dt * math.sin(pose.heading)
    heading = pose.heading - v / params.wheelbase * math.tan(steer * params.max_steer) * dt
    heading = (heading + math.pi) % (2 * math.pi) - math.pi
    v = v + (throttle * params.a_max - brake * params.b_max - params.drag * v) * dt
    v = min(max(v, 0.0), params.v_max)
    return Pose(x, y, heading, v)


def _lane_pose(net: RoadNetwork, lane_id: int, s: float) -> tuple[float, float, float]:
    lane = net.lanes[lane_id]
    s = min(max(s, 0.0), lane.length)
    cum = lane.cum
    i = int(np.searchsorted(cum, s, side="right")) - 1
    i = min(max(i, 0), len(cum) - 2)
    p0 = lane.points[i]
    p1 = lane.points[i + 1]
    seg = cum[i + 1] - cum[i]
    t = (s - cum[i]) / seg if seg > 0 else 0.0
    x = p0[0] + t * (p1[0] - p0[0])
    y = p0[1] + t * (p1[1] - p0[1])
    return x, y, math.atan2(p1[1] - p0[1], p1[0] - p0[0])


def _vehicle_path(net: RoadNetwork, a: Actor, horizon: float) -> tuple[np.ndarray, np.ndarray]:
    """Points along the vehicle's planned lanes from its position out to ``horizon`` m."""
    lane = net.lanes[a.lane]
    k = int(np.searchsorted(lane.cum, a.s, side="right"))
    pts = [np.array([[a.pose.x, a.pose.y]]), lane.points[k:]]
    dist = lane.length - a.s
    for nl in a.next_lanes:
        if dist >= horizon:
            break
        pts.append(net.lanes[nl].points[1:])
        dist += net.lanes[nl].length
    p = np.concatenate(pts)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(p, axis=0).T))])
    m = int(np.searchsorted(cum, horizon)) + 1
    return p[:m], cum[:m]


def _extend_plan(net: RoadNetwork, a: Actor, rng: np.random.Generator) -> None:
    while len(a.next_lanes) < 3:
        last = a.next_lanes[-1] if a.next_lanes else a.lane
        succ = net.lanes[last].successors
        a.next_lanes.append(succ[int(rng.integers(len(succ)))])


def _plan_vehicle(world: WorldState, ctx: RouteContext, a: Actor, boxes: np.ndarray, ids: list,
                  params: VehicleParams) -> None:
    """Desired speed from headway to anything on the vehicle's path and from signals."""
    net = ctx.net
    path, cum = _vehicle_path(net, a, 30.0)
    gap = math.inf
    if len(boxes):
        # distance from each path point to each oriented box
        dx = path[:, 0:1] - boxes[None, :, 0]
        dy = path[:, 1:2] - boxes[None, :, 1]
        c, sn = np.cos(boxes[:, 4]), np.sin(boxes[:, 4])
        lx = np.maximum(np.abs(c * dx + sn * dy) - boxes[:, 2], 0.0)
        ly = np.maximum(np.abs(-sn * dx + c * dy) - boxes[:, 3], 0.0)
        d = np.hypot(lx, ly)
        near = d < a.half_width + 0.4
        for j in np.nonzero(near.any(axis=0))[0]:
            if ids[j] == a.id:
                continue
            first = int(np.argmax(near[:, j]))
            if first == 0:
                continue
            gap = min(gap, cum[first] - a.half_length)
    speed = a.target_speed if gap == math.inf else math.sqrt(max(0.0, 2 * 3.0 * (gap - 2.5)))
    if gap < 2.5:
        speed = 0.0
    lane = net.lanes[a.lane]
    if lane.kind == "road":
        # distance from the front bumper to the stop line, less a small margin
        to_line = lane.length - a.s - a.half_length - 0.5
        ctrl = net.intersection(lane.node).control
        must_stop = False
        if isinstance(ctrl, TrafficLight):
            st = ctrl.state(world.time, lane.axis)
            must_stop = st == "red" or (st == "yellow" and to_line > 4.0)
        elif isinstance(ctrl, StopSign) and a.served_lane != a.lane:
            must_stop = True
            if to_line < 2.0 and a.pose.speed < 0.1:
                a.wait += ctx.config.dt * ctx.config.actor_plan_every
                if a.wait > 1.0:
                    a.served_lane = a.lane
                    a.wait = 0.0
        if must_stop and to_line > -1.0:
            speed = min(speed, 0.0 if to_line < 0.3 else math.sqrt(2 * 3.0 * to_line))
    a.desired_speed = min(a.target_speed, speed)


def _advance_vehicle(world: WorldState, ctx: RouteContext, a: Actor, dt: float) -> None:
    net = ctx.net
    v = a.pose.speed
    if v < a.desired_speed:
        v = min(a.desired_speed, v + 2.0 * dt)
    else:
        v = max(a.desired_speed, v - 6.0 * dt)
    a.s += v * dt
    while a.s > net.lanes[a.lane].length:
        a.s -= net.lanes[a.lane].length
        a.lane = a.next_lanes.pop(0)
        _extend_plan(net, a, world.rng)
    x, y, h = _lane_pose(net, a.lane, a.s)
    a.pose = Pose(x, y, h, v)


def _advance_walker(world: WorldState, a: Actor, dt: float) -> None:
    if a.path is None or a.path_cum is None or not a.active:
        return
    if a.kind is ActorKind.PEDESTRIAN and math.isfinite(a.trigger_s):
        # jaywalker: waits until the ego comes close along the route, crosses once
        if world.route_s < a.trigger_s:
            return
        if a.s >= a.path_cum[-1]:
            a.pose = Pose(a.pose.x, a.pose.y, a.pose.heading, 0.0)
            return
    L = a.path_cum[-1]
    a.s = a.s + a.target_speed * dt
    if not math.isfinite(a.trigger_s):
        a.s %= L
    else:
        a.s = min(a.s, L)
    x = float(np.interp(a.s, a.path_cum, a.path[:, 0]))
    y = float(np.interp(a.s, a.path_cum, a.path[:, 1]))
    h = math.atan2(y - a.pose.y, x - a.pose.x) if (x, y) != (a.pose.x, a.pose.y) else a.pose.heading
    a.pose = Pose(x, y, h, a.target_speed)


def step(world: WorldState, control: ControlCommand, ctx: RouteContext, monitor: "InfractionMonitor",
         params: VehicleParams = VehicleParams()) -> tuple[WorldState, list[InfractionEvent]]:
    """Advance one tick: ego, actors, lights (time-driven), then detection."""
    dt = world.dt
    world.ego = ego_update(world.ego, control, dt, params)
    vehicles = [a for a in world.actors if a.kind is ActorKind.VEHICLE]
    if world.tick % ctx.config.actor_plan_every == 0 and vehicles:
        movers = [a for a in world.actors if a.kind is not ActorKind.STATIC]
        boxes = np.array([a.box() for a in movers] + [ego_box(world, params)])
        ids = [a.id for a in movers] + [-1]
        for a in vehicles:
            _plan_vehicle(world, ctx, a, boxes, ids, params)
    for a in world.actors:
        if a.kind is ActorKind.VEHICLE:
            _advance_vehicle(world, ctx, a, dt)
        elif a.kind is ActorKind.PEDESTRIAN:
            _advance_walker(world, a, dt)
    world.tick += 1
    events = monitor.update(world)
    return world, events


# scenario


def _sidewalk_loops(net: RoadNetwork) -> list[np.ndarray]:
    xs = sorted({it.center[0] for it in net.intersections})
    ys = sorted({it.center[1] for it in net.intersections})
    off = ROAD_HALF_WIDTH + 1.5
    loops = []
    for i in range(len(xs) - 1):
        for j in range(len(ys) - 1):
            x0, x1 = xs[i] + off, xs[i + 1] - off
            y0, y1 = ys[j] + off, ys[j + 1] - off
            loops.append(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]))
    return loops


def spawn_scenario(world: WorldState, ctx: RouteContext, rng: np.random.Generator,
                   params: VehicleParams = VehicleParams()) -> WorldState:
    """Seed background vehicles, sidewalk pedestrians, static props and an optional jaywalker."""
    net, plan, cfg = ctx.net, ctx.plan, ctx.config
    L = plan.total_length
    actors: list[Actor] = []
    start = plan.points[0]

    # background vehicles on road lanes near the route
    route_pts = plan.points[:: max(1, len(plan.points) // 200)]
    near = []
    for lane in net.lanes:
        if lane.kind != "road":
            continue
        mid = lane.points[len(lane.points) // 2]
        if np.min(np.hypot(route_pts[:, 0] - mid[0], route_pts[:, 1] - mid[1])) < 60.0:
            near.append(lane.id)
    n_v = int(rng.poisson(cfg.vehicle_density * max(L, 50.0) / 100.0))
    placed: list[np.ndarray] = []
    for _ in range(n_v):
        if not near:
            break
        for _try in range(10):
            lid = near[int(rng.integers(len(near)))]
            lane = net.lanes[lid]
            s = float(rng.uniform(3.0, max(3.5, lane.length - 3.0)))
            x, y, h = _lane_pose(net, lid, s)
            p = np.array([x, y])
            if np.hypot(*(p - start)) < 15.0 or any(np.hypot(*(p - q)) < 10.0 for q in placed):
                continue
            a = Actor(len(actors), ActorKind.VEHICLE, Pose(x, y, h, 0.0), 2.2, 0.95, 1.6,
                      lane=lid, s=s, target_speed=float(rng.uniform(4.5, 7.0)))
            _extend_plan(net, a, rng)
            a.desired_speed = a.target_speed
            actors.append(a)
            placed.append(p)
            break

    # pedestrians walking sidewalk loops around blocks near the route
    loops = _sidewalk_loops(net)
    if loops:
        centers = np.array([lp[:4].mean(axis=0) for lp in loops])
        dmin = np.array([np.min(np.hypot(route_pts[:, 0] - c[0], route_pts[:, 1] - c[1])) for c in centers])
        cand = np.nonzero(dmin < 60.0)[0]
        n_p = int(rng.poisson(cfg.pedestrian_density * max(L, 50.0) / 100.0))
        for _ in range(n_p):
            if not len(cand):
                break
            lp = loops[int(cand[int(rng.integers(len(cand)))])]
            cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(lp, axis=0).T))])
            s = float(rng.uniform(0, cum[-1]))
            if rng.random() < 0.5:
                lp = lp[::-1].copy()
            x = float(np.interp(s, cum, lp[:, 0]))
            y = float(np.interp(s, cum, lp[:, 1]))
            actors.append(Actor(len(actors), ActorKind.PEDESTRIAN, Pose(x, y, 0.0, 0.0), 0.3, 0.3, 1.75,
                                s=s, target_speed=float(rng.uniform(1.0, 1.6)), path=lp, path_cum=cum))

    # static props along the sidewalks of the route
    s = float(rng.uniform(0, cfg.prop_spacing))
    while s < L:
        p = plan.point_at(s)
        h = plan.heading_at(s)
        side = 1.0 if rng.random() < 0.5 else -1.0
        off = side * float(rng.uniform(5.2, 6.5))
        q = p + off * np.array([-math.sin(h), math.cos(h)])
        if net.distance_to_lanes(q) > 4.5:
            big = rng.random() < 0.3
            hl, hw, ht = (0.6, 0.6, 1.0) if big else (0.2, 0.2, 3.0)
            actors.append(Actor(len(actors), ActorKind.STATIC, Pose(float(q[0]), float(q[1]), h, 0.0),
                                hl, hw, ht))
        s += cfg.prop_spacing * float(rng.uniform(0.6, 1.4))

    # jaywalker crossing ahead of the ego
    if L > 35.0 and rng.random() < cfg.p_jay:
        s_j = float(rng.uniform(30.0, min(100.0, L - 5.0)))
        p = plan.point_at(s_j)
        h = plan.heading_at(s_j)
        right = np.array([math.sin(h), -math.cos(h)])
        a0 = p + right * 3.6
        a1 = p - right * 8.6
        path = np.array([a0, a1])
        cum = np.array([0.0, float(np.hypot(*(a1 - a0)))])
        trig = s_j - float(rng.uniform(15.0, 30.0))
        actors.append(Actor(len(actors), ActorKind.PEDESTRIAN, Pose(float(a0[0]), float(a0[1]), h, 0.0),
                            0.3, 0.3, 1.75, s=0.0, target_speed=float(rng.uniform(1.2, 1.8)), path=path,
                            path_cum=cum, trigger_s=trig))
    world.actors = actors
    return world


# infraction detection


class InfractionMonitor:
    """Per-episode rule and progress bookkeeping; produces InfractionEvents."""

    def __init__(self, ctx: RouteContext, params: VehicleParams = VehicleParams()):
        self.ctx = ctx
        self.params = params
        cfg = ctx.config
        self.cfg = cfg
        self.s = 0.0
        self.s_max = 0.0
        self.d = 0.0
        self.stopped_for = 0.0
        self.overlapping: set[int] = set()
        self.offroad = False
        self.offroad_distance = 0.0
        self.driven_distance = 0.0
        self.served: set[int] = set()
        self.crossed: set[int] = set()
        self.terminal: EventKind | None = None
        self.last_xy = None
        self.counts: dict[EventKind, int] = {}

    def reset(self, world: WorldState) -> None:
        self.s, self.d = project_onto_route(self.ctx.plan, world.ego.xy, (0.0, 20.0))
        self.s_max = self.s
        self.last_xy = (world.ego.x, world.ego.y)
        world.route_s = self.s
        world.route_d = self.d

    def update(self, world: WorldState) -> list[InfractionEvent]:
        ctx, cfg, ego = self.ctx, self.cfg, world.ego
        events: list[InfractionEvent] = []
        pos = (ego.x, ego.y)

        def emit(kind: EventKind):
            events.append(InfractionEvent(kind, world.tick, pos))
            self.counts[kind] = self.counts.get(kind, 0) + 1

        step_len = math.hypot(ego.x - self.last_xy[0], ego.y - self.last_xy[1])
        self.driven_distance += step_len
        self.last_xy = pos

        s_prev = self.s
        self.s, self.d = project_onto_route(ctx.plan, pos, (s_prev - 15.0, s_prev + 15.0))
        self.s_max = max(self.s_max, self.s)
        world.route_s = self.s
        world.route_d = self.d

        # collisions, debounced per actor while overlap persists
        if world.actors:
            near = [a for a in world.actors if abs(a.pose.x - ego.x) < 8.0 and abs(a.pose.y - ego.y) < 8.0]
            now: set[int] = set()
            if near:
                eb = ego_box(world, self.params)
                hits = _kernels.obb_overlap(np.array(eb), np.array([a.box() for a in near]))
                for a, h in zip(near, hits):
                    if h:
                        now.add(a.id)
                        if a.id not in self.overlapping:
                            emit(COLLISION_KIND[a.kind])
                            self._push_away(world, a)
            self.overlapping = now

        # red lights and stop signs, on crossing the stop line of a route junction
        for k, (s_in, s_out, node, ctrl, axis, turn) in enumerate(ctx.junctions):
            if isinstance(ctrl, StopSign) and s_in - cfg.stop_sign_window <= self.s <= s_in:
                if ego.speed < cfg.stop_speed:
                    self.served.add(k)
                    world.stops_served.add(k)
            if k in self.crossed or self.d > 5.0:
                continue
            if s_prev < s_in <= self.s:
                self.crossed.add(k)
                if isinstance(ctrl, TrafficLight) and ctrl.state(world.time, axis) == "red":
                    emit(EventKind.RED_LIGHT)
                elif isinstance(ctrl, StopSign) and k not in self.served:
                    emit(EventKind.STOP_SIGN)

        # off-road driving
        dist = ctx.net.distance_to_lanes(pos)
        if dist > cfg.offroad_threshold:
            self.offroad_distance += step_len
            if not self.offroad:
                emit(EventKind.OFF_ROAD)
            self.offroad = True
        else:
            self.offroad = False

        # terminal conditions
        if self.d > cfg.deviation_radius:
            emit(EventKind.ROUTE_DEVIATION)
            self.terminal = EventKind.ROUTE_DEVIATION
            return events
        if ego.speed < cfg.blocked_speed:
            self.stopped_for += world.dt
        else:
            self.stopped_for = 0.0
        if self.stopped_for >= cfg.blocked_time - 1e-9:
            emit(EventKind.AGENT_BLOCKED)
            self.terminal = EventKind.AGENT_BLOCKED
            return events
        if world.time > ctx.budget + 1e-9:
            emit(EventKind.ROUTE_TIMEOUT)
            self.terminal = EventKind.ROUTE_TIMEOUT
        return events

    def _push_away(self, world: WorldState, actor: Actor) -> None:
        e = world.ego
        dx, dy = e.x - actor.pose.x, e.y - actor.pose.y
        n = math.hypot(dx, dy)
        if n < 1e-9:
            dx, dy, n = -math.cos(e.heading), -math.sin(e.heading), 1.0
        k = self.cfg.collision_pushback / n
        world.ego = Pose(e.x + dx * k, e.y + dy * k, e.heading, 0.0)


def detect_infractions(world: WorldState, ctx: RouteContext, history: InfractionMonitor) -> list[InfractionEvent]:
    """Run detection for the current world state against the episode history."""
    return history.update(world)


# episodes


class Driver(Protocol):
    needs_observation: bool

    def reset(self, ctx: RouteContext) -> None: ...

    def __call__(self, world: WorldState, ctx: RouteContext, observation) -> np.ndarray: ...


@dataclass
class EpisodeLog:
    route_id: str
    seed: int
    dt: float
    poses: list[tuple[float, float, float, float]]
    controls: list[tuple[float, float, float]]
    route_s: list[float]
    events: list[InfractionEvent]
    driven_distance: float
    offroad_distance: float
    s_final: float
    route_length: float
    completed: str
    frames: list = field(default_factory=list)
    error: str = ""

    @property
    def duration(self) -> float:
        return len(self.poses) * self.dt

    def event_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.events:
            out[e.kind.value] = out.get(e.kind.value, 0) + 1
        return out

    def header(self) -> dict:
        return {
            "route_id": self.route_id,
            "seed": self.seed,
            "dt": self.dt,
            "ticks": len(self.poses),
            "driven_distance": self.driven_distance,
            "offroad_distance": self.offroad_distance,
            "s_final": self.s_final,
            "route_length": self.route_length,
            "completed": self.completed,
            "events": [e.to_dict() for e in self.events],
            "error": self.error,
        }

    def to_ndjson(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        for k, (p, c, s) in enumerate(zip(self.poses, self.controls, self.route_s)):
            lines.append(json.dumps({"tick": k + 1, "pose": list(p), "control": list(c), "s": s}))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Observation:
    bev: np.ndarray
    goal: np.ndarray
    goal_index: int


@dataclass(frozen=True)
class RecordedFrame:
    observation: Observation
    expert_waypoints: np.ndarray
    maneuver: Maneuver
    route_id: str
    tick: int


def episode_seed(seed: int, route_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(route_id[:8], 16)])


def init_world(ctx: RouteContext, seed: int, params: VehicleParams = VehicleParams()) -> WorldState:
    plan = ctx.plan
    p = plan.points[0]
    ego = Pose(float(p[0]), float(p[1]), plan.heading_at(0.0), 0.0)
    ss = episode_seed(seed, ctx.route.id)
    scen_rng, world_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
    world = WorldState(0, ctx.config.dt, ego, [], world_rng, seed=int(seed))
    return spawn_scenario(world, ctx, scen_rng, params)


def _to_ego(points: np.ndarray, pose: Pose) -> np.ndarray:
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    d = np.asarray(points, dtype=float) - np.array([pose.x, pose.y])
    return np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]])


def _to_world(points: np.ndarray, pose: Pose) -> np.ndarray:
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    p = np.asarray(points, dtype=float)
    return np.column_stack([pose.x + c * p[:, 0] - s * p[:, 1], pose.y + s * p[:, 0] + c * p[:, 1]])


def run_episode(net: RoadNetwork, route: Route, driver, seed: int, mode: str = "evaluate",
                config: SimConfig = SimConfig(), params: VehicleParams = VehicleParams(),
                gains: PidGains | None = None, max_ticks: int | None = None,
                on_query: Callable | None = None) -> EpisodeLog:
    """Closed-loop rollout of ``driver`` along ``route``.

    The driver is queried every ``config.policy_every`` ticks and returns
    ego-frame waypoints; the PID tracks the latest series every tick. In
    ``record`` mode each query also logs (observation, expert waypoints,
    maneuver) and the driver must be the expert.
    """
    from .sensors import goal_in_ego_frame, observe

    if mode not in ("evaluate", "record"):
        raise ValueError(f"unknown mode {mode!r}")
    ctx = RouteContext(net, route, config)
    world = init_world(ctx, seed, params)
    monitor = InfractionMonitor(ctx, params)
    monitor.reset(world)
    driver.reset(ctx)
    pid_state = PidState()
    gains = gains or PidGains()
    poses, controls, route_s, events, frames = [], [], [], [], []
    g = 1
    wp_world = None
    completed = "Running"
    error = ""
    limit = max_ticks if max_ticks is not None else int(math.ceil(ctx.budget / config.dt)) + 2
    needs_obs = mode == "record" or getattr(driver, "needs_observation", False)
    plan_len = ctx.plan.total_length
    for _ in range(limit):
        if world.tick % config.policy_every == 0:
            goal = goal_in_ego_frame(world, ctx, g)
            g = goal.goal_index
            obs = observe(world, ctx, goal, params) if needs_obs else Observation(np.zeros(0), goal.goal, g)
            try:
                wps = np.asarray(driver(world, ctx, obs), dtype=float).reshape(-1, 2)
                if not np.all(np.isfinite(wps)):
                    raise ValueError("policy produced non-finite waypoints")
            except Exception as exc:  # surfaced as a terminal PolicyError
                completed = "PolicyError"
                error = f"{type(exc).__name__}: {exc}"
                break
            if on_query is not None:
                on_query(world, ctx, obs, wps)
            if mode == "record":
                frames.append(RecordedFrame(obs, wps.copy(), ctx.maneuver_at(world.route_s), route.id, world.tick))
            wp_world = _to_world(wps, world.ego)
        local = _to_ego(wp_world, world.ego)
        control, pid_state = pid(local, world.ego.speed, pid_state, gains, dt=config.dt)
        world, new_events = step(world, control, ctx, monitor, params)
        poses.append((world.ego.x, world.ego.y, world.ego.heading, world.ego.speed))
        controls.append((control.steer, control.throttle, control.brake))
        route_s.append(monitor.s)
        events.extend(new_events)
        if monitor.terminal is not None:
            completed = monitor.terminal.value
            break
        if monitor.s >= plan_len - config.finish_tolerance:
            completed = "Finished"
            break
    else:
        completed = "Truncated" if max_ticks is not None else EventKind.ROUTE_TIMEOUT.value
    return EpisodeLog(route.id, int(seed), config.dt, poses, controls, route_s, events,
                      monitor.driven_distance, monitor.offroad_distance, monitor.s_max, plan_len,
                      completed, frames, error)
