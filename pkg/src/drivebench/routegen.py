"""Route sampling around intersections, classification, tiny-route
conversion, deduplication and maneuver statistics."""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .roadnet import (
    NoPath,
    RoadNetError,
    RoadNetwork,
    RoutePlan,
    TrafficLight,
    _assemble,
    plan_route,
    plan_route_via,
    subplan,
)

SQUARE_SIZE = 100.0
VERTEX_SNAP_RADIUS = 30.0
TINY_MARGIN = 30.0
TURN_THRESHOLD = math.radians(45.0)
TINY_MAX_LENGTH = 100.0
LONG_MIN_LENGTH = 1000.0


class SnapFailure(RoadNetError):
    pass


class EmptyInput(ValueError):
    pass


class RouteType(str, enum.Enum):
    TINY = "tiny"
    SHORT = "short"
    LONG = "long"


class Maneuver(enum.IntEnum):
    FOLLOW_LANE = 0
    GO_STRAIGHT = 1
    TURN_LEFT = 2
    TURN_RIGHT = 3


MANEUVER_NAMES = ("follow lane", "go straight", "turn left", "turn right")


def route_id(waypoints: np.ndarray) -> str:
    q = np.round(np.asarray(waypoints, dtype=float)).astype(np.int64)
    return hashlib.sha1(q.tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class Route:
    plan: RoutePlan
    route_type: RouteType
    n_intersections: int
    id: str
    town_seed: int = 0

    @property
    def length(self) -> float:
        return self.plan.total_length

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "type": self.route_type.value,
            "waypoints": self.plan.waypoints.round(6).tolist(),
            "length_m": round(self.plan.total_length, 6),
            "n_intersections": self.n_intersections,
            "town_seed": self.town_seed,
            "lane_trace": list(self.plan.lane_trace),
            "start_offset": self.plan.start_offset,
            "end_offset": self.plan.end_offset,
        }


def make_route(plan: RoutePlan, town_seed: int = 0) -> Route:
    return Route(plan, classify_route(plan), plan.n_intersections, route_id(plan.waypoints), town_seed)


def classify_route(plan: RoutePlan) -> RouteType:
    """Tiny below 100 m with at most one intersection, Long above 1000 m."""
    if plan.n_intersections <= 1 and plan.total_length < TINY_MAX_LENGTH:
        return RouteType.TINY
    if plan.total_length > LONG_MIN_LENGTH:
        return RouteType.LONG
    return RouteType.SHORT


def locate_intersections(net: RoadNetwork) -> list:
    """Intersections with traffic lights first, then the rest, each by id."""
    lit = [it for it in net.intersections if isinstance(it.control, TrafficLight)]
    rest = [it for it in net.intersections if not isinstance(it.control, TrafficLight)]
    return sorted(lit, key=lambda it: it.id) + sorted(rest, key=lambda it: it.id)


def _snap_vertex(net: RoadNetwork, v: np.ndarray) -> np.ndarray:
    lane, s, d = net.nearest_lane(v)
    if lane < 0 or d > VERTEX_SNAP_RADIUS:
        raise SnapFailure(f"no lane within {VERTEX_SNAP_RADIUS} m of {tuple(np.round(v, 1))}")
    return net.lanes[lane].point_at(s)


def square_vertices(center: Sequence[float], size: float = SQUARE_SIZE) -> np.ndarray:
    h = size / 2
    c = np.asarray(center, dtype=float)
    return c + np.array([[-h, -h], [h, -h], [h, h], [-h, h]])


def sample_route(net: RoadNetwork, inter, rng_seed: int, max_tries: int = 8,
                 square_size: float = SQUARE_SIZE) -> Route:
    """Route between two vertices of a square centered on ``inter``."""
    rng = np.random.default_rng(rng_seed)
    verts = square_vertices(inter.center, square_size)
    err: Exception | None = None
    for _ in range(max(1, max_tries)):
        i, j = rng.choice(4, size=2, replace=False)
        try:
            a = _snap_vertex(net, verts[i])
            b = _snap_vertex(net, verts[j])
            if np.allclose(a, b):
                raise SnapFailure("start and end snapped to the same point")
            plan = plan_route(net, a, b)
        except (SnapFailure, NoPath) as exc:
            err = exc
            continue
        return make_route(plan, net.town_seed)
    assert err is not None
    raise err


def sample_long_route(net: RoadNetwork, rng_seed: int, min_length: float = LONG_MIN_LENGTH + 50.0,
                      max_via: int = 40) -> Route:
    """Chain square-vertex samples through random intersections until the
    route exceeds ``min_length``."""
    rng = np.random.default_rng(rng_seed)
    inters = net.intersections
    pts: list[np.ndarray] = []
    for _ in range(max_via * 4):
        it = inters[int(rng.integers(len(inters)))]
        v = square_vertices(it.center)[int(rng.integers(4))]
        try:
            p = _snap_vertex(net, v)
        except SnapFailure:
            continue
        if pts and np.linalg.norm(p - pts[-1]) < 40.0:
            continue
        pts.append(p)
        if len(pts) >= 2:
            plan = plan_route_via(net, pts)
            if plan.total_length > min_length:
                return make_route(plan, net.town_seed)
        if len(pts) > max_via:
            break
    raise SnapFailure("could not assemble a long route")


def tinyfy(route: Route, net: RoadNetwork) -> list[Route]:
    """One tiny route per intersection passing, trimmed to TINY_MARGIN m on either side."""
    plan = route.plan
    js = plan.junctions
    out = []
    for k, (_, s_in, s_out) in enumerate(js):
        lo = js[k - 1][2] if k > 0 else 0.0
        hi = js[k + 1][1] if k + 1 < len(js) else plan.total_length
        s_a = max(s_in - TINY_MARGIN, lo, 0.0)
        s_b = min(s_out + TINY_MARGIN, hi, plan.total_length)
        sub = subplan(net, plan, s_a, s_b)
        out.append(make_route(sub, route.town_seed))
    return out


def dedupe_routes(routes: Iterable[Route]) -> list[Route]:
    seen = set()
    out = []
    for r in routes:
        if r.id not in seen:
            seen.add(r.id)
            out.append(r)
    return out


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def segment_maneuvers(plan: RoutePlan) -> list[tuple[float, float, Maneuver]]:
    """Label each stretch between consecutive sparse waypoints."""
    ws = plan.waypoint_s
    out = []
    for a, b in zip(ws[:-1], ws[1:]):
        label = Maneuver.FOLLOW_LANE
        for _, j_in, j_out in plan.junctions:
            if j_out > a + 1e-9 and j_in < b - 1e-9:
                lo, hi = max(a, j_in), min(b, j_out)
                dh = _wrap(plan.heading_at(hi - 1e-6) - plan.heading_at(lo + 1e-6))
                if dh > TURN_THRESHOLD:
                    label = Maneuver.TURN_LEFT
                elif dh < -TURN_THRESHOLD:
                    label = Maneuver.TURN_RIGHT
                else:
                    label = Maneuver.GO_STRAIGHT
                break
        out.append((a, b, label))
    return out


def maneuver_at(plan: RoutePlan, s: float) -> Maneuver:
    for a, b, label in segment_maneuvers(plan):
        if s < b:
            return label
    segs = segment_maneuvers(plan)
    return segs[-1][2] if segs else Maneuver.FOLLOW_LANE


def maneuver_distribution(items) -> np.ndarray:
    """Percentages of (follow lane, go straight, turn left, turn right).

    ``items`` is a list of Routes (weighted by arc length) or anything
    exposing ``maneuver_labels()`` / a sequence of Maneuver labels
    (weighted by frame count).
    """
    w = np.zeros(4)
    if hasattr(items, "maneuver_labels"):
        labels = np.asarray(items.maneuver_labels(), dtype=np.int64)
        w += np.bincount(labels, minlength=4)[:4]
    else:
        items = list(items)
        for it in items:
            if isinstance(it, Route):
                it = it.plan
            if isinstance(it, RoutePlan):
                for a, b, label in segment_maneuvers(it):
                    w[int(label)] += b - a
            else:
                w[int(it)] += 1
    total = w.sum()
    if total <= 0:
        raise EmptyInput("no route length or frames to weight")
    return 100.0 * w / total


def format_distribution(name: str, dist: Sequence[float], n: int | None = None, kind: str = "") -> str:
    cells = " ".join(f"{v:5.1f}" for v in dist)
    head = f"{name:<12}"
    if n is not None:
        head += f" {n:>5} {kind:<6}"
    return f"{head} {cells}"


def generate_routes(net: RoadNetwork, route_type: RouteType | str, count: int, seed: int,
                    max_tries: int = 8, max_attempts: int | None = None) -> list[Route]:
    """``count`` distinct routes of one type sampled from ``net``."""
    route_type = RouteType(route_type)
    if count < 0:
        raise ValueError("count must be non-negative")
    inters = locate_intersections(net)
    if not inters:
        raise SnapFailure("town has no intersections")
    limit = max_attempts or max(50, 40 * count)
    out: list[Route] = []
    seen: set[str] = set()
    rng = np.random.default_rng(seed)
    attempt = 0
    while len(out) < count and attempt < limit:
        sub_seed = int(rng.integers(2**31))
        attempt += 1
        try:
            if route_type is RouteType.LONG:
                cands = [sample_long_route(net, sub_seed)]
            else:
                it = inters[int(rng.integers(len(inters)))]
                base = sample_route(net, it, sub_seed, max_tries=max_tries)
                cands = tinyfy(base, net) if route_type is RouteType.TINY else [base]
                if route_type is RouteType.TINY and len(cands) > 1:
                    cands = [cands[int(rng.integers(len(cands)))]]
        except (SnapFailure, NoPath):
            continue
        for r in cands:
            if r.route_type is route_type and r.id not in seen:
                seen.add(r.id)
                out.append(r)
                if len(out) == count:
                    break
    if len(out) < count:
        raise SnapFailure(f"only {len(out)} of {count} {route_type.value} routes after {attempt} attempts")
    return out


def save_routes(path: str | Path, routes: Sequence[Route]) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in routes], indent=1, sort_keys=True))


def route_from_dict(d: Mapping, net: RoadNetwork) -> Route:
    if "lane_trace" in d:
        plan = _assemble(net, d["lane_trace"], d["start_offset"], d["end_offset"])
    else:
        plan = plan_route_via(net, d["waypoints"]) if len(d["waypoints"]) > 1 else plan_route(
            net, d["waypoints"][0], d["waypoints"][0])
    r = make_route(plan, int(d.get("town_seed", net.town_seed)))
    if r.id != d["id"]:
        raise RoadNetError(f"route {d['id']} does not reproduce on this town (got {r.id})")
    return r


def load_routes(path: str | Path, nets: Mapping[int, RoadNetwork] | RoadNetwork) -> list[Route]:
    data = json.loads(Path(path).read_text())
    out = []
    for d in data:
        net = nets if isinstance(nets, RoadNetwork) else nets[int(d["town_seed"])]
        out.append(route_from_dict(d, net))
    return out
