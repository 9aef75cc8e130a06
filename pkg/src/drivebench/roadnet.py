"""Procedural grid towns, lane-graph routing and route-relative geometry.

Towns are rectangular grids of intersections joined by two-way streets.
Every street carries two opposing lanes (right-hand traffic). Inside each
intersection, connector lanes join every incoming lane to every outgoing
lane except the U-turn. World frame: x east, y north, heading counter
clockwise from +x.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels

LANE_OFFSET = 1.75
LANE_WIDTH = 3.5
ROAD_HALF_WIDTH = LANE_OFFSET + LANE_WIDTH / 2
JUNCTION_HALF = 7.0
SAMPLE_SPACING = 1.0
DEFAULT_SPEED_LIMIT = 8.0
WAYPOINT_SPACING = 50.0
SNAP_RADIUS = 5.0
FORMAT_VERSION = 1


class RoadNetError(Exception):
    pass


class NoPath(RoadNetError):
    pass


class SnapError(RoadNetError):
    pass


@dataclass(frozen=True)
class TrafficLight:
    green: float = 10.0
    yellow: float = 3.0
    red: float = 10.0
    offset: float = 0.0

    def __post_init__(self):
        if min(self.green, self.yellow, self.red) <= 0:
            raise ValueError("light cycle durations must be positive")

    @property
    def cycle(self) -> float:
        return self.green + self.yellow + self.red

    def state(self, t: float, axis: int) -> str:
        """Signal shown to approaches along ``axis`` (0: east-west, 1: north-south).

        The north-south axis runs the same cycle shifted by green + yellow.
        """
        phase = (t + self.offset + axis * (self.green + self.yellow)) % self.cycle
        if phase < self.green:
            return "green"
        if phase < self.green + self.yellow:
            return "yellow"
        return "red"


@dataclass(frozen=True)
class StopSign:
    pass


@dataclass(frozen=True)
class Uncontrolled:
    pass


Control = TrafficLight | StopSign | Uncontrolled


@dataclass(frozen=True)
class Intersection:
    id: int
    center: tuple[float, float]
    control: Control
    incident_lanes: tuple[int, ...]


@dataclass(eq=False)
class Lane:
    id: int
    points: np.ndarray
    kind: str  # "road" or "connector"
    successors: list[int] = field(default_factory=list)
    predecessors: list[int] = field(default_factory=list)
    speed_limit: float = DEFAULT_SPEED_LIMIT
    node: int = -1  # connector: its intersection; road: intersection at the lane end
    start_node: int = -1
    axis: int = 0  # approach axis of a road lane, used for light phases
    turn: str = ""  # connector turn type: straight, left, right, uturn

    @cached_property
    def cum(self) -> np.ndarray:
        seg = np.hypot(*np.diff(self.points, axis=0).T)
        return np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        return np.array([np.interp(s, self.cum, self.points[:, 0]), np.interp(s, self.cum, self.points[:, 1])])


class RoadNetwork:
    """Immutable lane-level road network."""

    def __init__(self, lanes: list[Lane], intersections: list[Intersection], town_seed: int,
                 rects: np.ndarray | None = None):
        self.lanes = lanes
        self.intersections = intersections
        self.town_seed = town_seed
        self.rects = np.zeros((0, 4)) if rects is None else np.asarray(rects, dtype=float)
        self._by_node = {it.id: it for it in intersections}

    def intersection(self, node: int) -> Intersection:
        return self._by_node[node]

    @cached_property
    def _index(self):
        pts, owner = [], []
        for lane in self.lanes:
            pts.append(lane.points)
            owner.append(np.full(len(lane.points), lane.id))
        if not pts:
            return None, np.zeros(0, dtype=int), np.zeros(0, dtype=int)
        allp = np.concatenate(pts)
        own = np.concatenate(owner)
        local = np.concatenate([np.arange(len(lane.points)) for lane in self.lanes])
        return cKDTree(allp), own, local

    def nearest_lane(self, p: Sequence[float], k: int = 8) -> tuple[int, float, float]:
        """Closest lane to ``p``: (lane id, arclength on lane, distance)."""
        tree, own, local = self._index
        if tree is None:
            raise SnapError("network has no lanes")
        k = min(k, len(own))
        _, ii = tree.query(p, k=k)
        ii = np.atleast_1d(ii)
        best = (math.inf, -1, 0.0)
        for i in ii:
            lane = self.lanes[own[i]]
            j = local[i]
            lo, hi = max(j - 1, 0), min(j + 1, len(lane.points) - 1)
            s, d, _ = _kernels.project_polyline(float(p[0]), float(p[1]), lane.points, lane.cum, lo, hi)
            if (d, lane.id) < (best[0], best[1]):
                best = (d, lane.id, s)
        return best[1], best[2], best[0]

    def distance_to_lanes(self, p: Sequence[float]) -> float:
        return self.nearest_lane(p)[2]

    def lane_graph(self) -> dict[int, list[tuple[int, float]]]:
        """Adjacency with edge weight = length of the successor lane."""
        return {l.id: [(s, self.lanes[s].length) for s in l.successors] for l in self.lanes}

    def is_connected(self) -> bool:
        """Strong connectivity of the lane graph."""
        if not self.lanes:
            return True

        def reach(edges):
            seen = {0}
            stack = [0]
            while stack:
                u = stack.pop()
                for v in edges(u):
                    if v not in seen:
                        seen.add(v)
                        stack.append(v)
            return len(seen) == len(self.lanes)

        return reach(lambda u: self.lanes[u].successors) and reach(lambda u: self.lanes[u].predecessors)

    # serialization
    def to_dict(self) -> dict:
        inters = []
        for it in self.intersections:
            c = it.control
            if isinstance(c, TrafficLight):
                ctrl = {"type": "traffic_light", "green": c.green, "yellow": c.yellow, "red": c.red, "offset": c.offset}
            elif isinstance(c, StopSign):
                ctrl = {"type": "stop_sign"}
            else:
                ctrl = {"type": "uncontrolled"}
            inters.append({"id": it.id, "center": list(it.center), "control": ctrl,
                           "incident_lanes": list(it.incident_lanes)})
        return {
            "format": FORMAT_VERSION,
            "town_seed": self.town_seed,
            "lanes": [
                {"id": l.id, "kind": l.kind, "points": l.points.tolist(), "successors": l.successors,
                 "predecessors": l.predecessors, "speed_limit": l.speed_limit, "node": l.node,
                 "start_node": l.start_node, "axis": l.axis, "turn": l.turn}
                for l in self.lanes
            ],
            "intersections": inters,
            "rects": self.rects.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoadNetwork":
        if d.get("format") != FORMAT_VERSION:
            raise RoadNetError(f"unsupported town format {d.get('format')!r}")
        lanes = [
            Lane(id=l["id"], points=np.asarray(l["points"], dtype=float), kind=l["kind"],
                 successors=list(l["successors"]), predecessors=list(l["predecessors"]),
                 speed_limit=l["speed_limit"], node=l["node"], start_node=l["start_node"],
                 axis=l["axis"], turn=l["turn"])
            for l in d["lanes"]
        ]
        inters = []
        for it in d["intersections"]:
            c = it["control"]
            if c["type"] == "traffic_light":
                ctrl: Control = TrafficLight(c["green"], c["yellow"], c["red"], c["offset"])
            elif c["type"] == "stop_sign":
                ctrl = StopSign()
            else:
                ctrl = Uncontrolled()
            inters.append(Intersection(it["id"], tuple(it["center"]), ctrl, tuple(it["incident_lanes"])))
        return cls(lanes, inters, d["town_seed"], np.asarray(d["rects"], dtype=float).reshape(-1, 4))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RoadNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _resample(points: np.ndarray, spacing: float = SAMPLE_SPACING) -> np.ndarray:
    seg = np.hypot(*np.diff(points, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(1, int(math.ceil(cum[-1] / spacing - 1e-9)))
    s = np.linspace(0.0, cum[-1], n + 1)
    out = np.column_stack([np.interp(s, cum, points[:, 0]), np.interp(s, cum, points[:, 1])])
    out[0] = points[0]
    out[-1] = points[-1]
    return out


def _connector_curve(p0, d0, p1, d1) -> tuple[np.ndarray, str]:
    cross = d0[0] * d1[1] - d0[1] * d1[0]
    dot = float(d0 @ d1)
    if dot > 0.5:
        return _resample(np.array([p0, p1])), "straight"
    u = np.linspace(0.0, 1.0, 64)[:, None]
    if dot < -0.99:
        c1 = p0 + d0 * JUNCTION_HALF * 0.6
        c2 = p1 - d1 * JUNCTION_HALF * 0.6
        curve = (1 - u) ** 3 * p0 + 3 * (1 - u) ** 2 * u * c1 + 3 * (1 - u) * u**2 * c2 + u**3 * p1
        return _resample(curve), "uturn"
    # control point: intersection of the incoming ray and the backward outgoing ray
    A = np.column_stack([d0, -d1])
    t = np.linalg.solve(A, p1 - p0)
    ctrl = p0 + t[0] * d0
    curve = (1 - u) ** 2 * p0 + 2 * (1 - u) * u * ctrl + u**2 * p1
    return _resample(curve), ("left" if cross > 0 else "right")


def build_town(seed: int, blocks: int, block_size_range: tuple[float, float] = (80.0, 120.0),
               drop_prob: float = 0.0, light_prob: float = 0.5, stop_prob: float = 0.25,
               light_cycle: tuple[float, float, float] = (10.0, 3.0, 10.0)) -> RoadNetwork:
    """Seeded grid town with ``blocks`` x ``blocks`` intersections.

    ``drop_prob`` removes interior streets at random while every node keeps
    three or more streets and the lane graph stays strongly connected.
    """
    if blocks < 2:
        raise ValueError("blocks must be >= 2")
    lo, hi = block_size_range
    if lo <= 0 or hi < lo:
        raise ValueError("block_size_range must be positive and ordered")
    if lo <= 2 * JUNCTION_HALF + 2 * SAMPLE_SPACING:
        raise ValueError(f"block size must exceed {2 * JUNCTION_HALF + 2 * SAMPLE_SPACING} m")
    rng = np.random.default_rng(seed)
    xs = np.concatenate([[0.0], np.cumsum(rng.uniform(lo, hi, blocks - 1))])
    ys = np.concatenate([[0.0], np.cumsum(rng.uniform(lo, hi, blocks - 1))])
    xs = np.round(xs, 3)
    ys = np.round(ys, 3)

    def nid(i, j):
        return j * blocks + i

    pos = {nid(i, j): np.array([xs[i], ys[j]]) for j in range(blocks) for i in range(blocks)}
    edges = []
    for j in range(blocks):
        for i in range(blocks):
            if i + 1 < blocks:
                edges.append((nid(i, j), nid(i + 1, j)))
            if j + 1 < blocks:
                edges.append((nid(i, j), nid(i, j + 1)))

    if drop_prob > 0:
        order = rng.permutation(len(edges))
        drop_draw = rng.random(len(edges))
        kept = set(edges)
        for k in order:
            e = edges[k]
            if drop_draw[k] >= drop_prob:
                continue
            deg = lambda n: sum(1 for a, b in kept if n in (a, b))  # noqa: E731
            if deg(e[0]) > 3 and deg(e[1]) > 3:
                trial = kept - {e}
                if _undirected_two_edge_connected(trial, list(pos)):
                    kept = trial
        edges = [e for e in edges if e in kept]

    lanes: list[Lane] = []
    incoming: dict[int, list[int]] = {n: [] for n in pos}
    outgoing: dict[int, list[int]] = {n: [] for n in pos}
    for a, b in edges:
        for u, v in ((a, b), (b, a)):
            e = pos[v] - pos[u]
            e = e / np.linalg.norm(e)
            right = np.array([e[1], -e[0]])
            p0 = pos[u] + e * JUNCTION_HALF + right * LANE_OFFSET
            p1 = pos[v] - e * JUNCTION_HALF + right * LANE_OFFSET
            lane = Lane(id=len(lanes), points=_resample(np.array([p0, p1])), kind="road",
                        node=v, start_node=u, axis=0 if abs(e[0]) > abs(e[1]) else 1)
            lanes.append(lane)
            incoming[v].append(lane.id)
            outgoing[u].append(lane.id)

    for n in sorted(pos):
        for li in incoming[n]:
            lin = lanes[li]
            for lo_id in outgoing[n]:
                lout = lanes[lo_id]
                if lout.node == lin.start_node and len(outgoing[n]) > 2:
                    continue  # U-turns only where a node has two streets
                d0 = lin.points[-1] - lin.points[-2]
                d0 = d0 / np.linalg.norm(d0)
                d1 = lout.points[1] - lout.points[0]
                d1 = d1 / np.linalg.norm(d1)
                pts, turn = _connector_curve(lin.points[-1].copy(), d0, lout.points[0].copy(), d1)
                conn = Lane(id=len(lanes), points=pts, kind="connector", node=n, start_node=n,
                            axis=lin.axis, turn=turn, speed_limit=DEFAULT_SPEED_LIMIT)
                lanes.append(conn)
                lin.successors.append(conn.id)
                conn.predecessors.append(lin.id)
                conn.successors.append(lout.id)
                lout.predecessors.append(conn.id)

    intersections = []
    for n in sorted(pos):
        r = rng.random()
        if r < light_prob:
            g, y, red = light_cycle
            ctrl: Control = TrafficLight(g, y, red, offset=float(np.round(rng.uniform(0, g + y + red), 3)))
        elif r < light_prob + stop_prob:
            ctrl = StopSign()
        else:
            ctrl = Uncontrolled()
        inc = tuple(sorted(incoming[n] + outgoing[n]))
        intersections.append(Intersection(n, (float(pos[n][0]), float(pos[n][1])), ctrl, inc))

    rects = []
    for a, b in edges:
        (x1, y1), (x2, y2) = pos[a], pos[b]
        rects.append([min(x1, x2) - ROAD_HALF_WIDTH * (x1 == x2), min(y1, y2) - ROAD_HALF_WIDTH * (y1 == y2),
                      max(x1, x2) + ROAD_HALF_WIDTH * (x1 == x2), max(y1, y2) + ROAD_HALF_WIDTH * (y1 == y2)])
    for n in sorted(pos):
        x, y = pos[n]
        rects.append([x - JUNCTION_HALF, y - JUNCTION_HALF, x + JUNCTION_HALF, y + JUNCTION_HALF])
    net = RoadNetwork(lanes, intersections, seed, np.array(rects))
    if not net.is_connected():
        raise RoadNetError("generated town is not strongly connected")
    return net


def _undirected_two_edge_connected(edges: set, nodes: list) -> bool:
    adj: dict[int, list[int]] = {n: [] for n in nodes}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = {nodes[0]}
    stack = [nodes[0]]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == len(nodes)


# routing


@dataclass(frozen=True)
class RoutePlan:
    """A route through the lane graph, from (first lane, start_offset) to (last lane, end_offset)."""

    waypoints: np.ndarray
    lane_trace: tuple[int, ...]
    total_length: float
    start_offset: float
    end_offset: float
    points: np.ndarray = field(repr=False)
    cum: np.ndarray = field(repr=False)
    lane_spans: tuple[tuple[int, float, float], ...] = field(repr=False)
    junctions: tuple[tuple[int, float, float], ...] = ()
    waypoint_s: tuple[float, ...] = ()

    @property
    def n_intersections(self) -> int:
        return len(self.junctions)

    @property
    def G(self) -> int:
        return len(self.waypoints)

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.total_length)
        return np.array([np.interp(s, self.cum, self.points[:, 0]), np.interp(s, self.cum, self.points[:, 1])])

    def heading_at(self, s: float) -> float:
        if len(self.points) < 2:
            return 0.0
        i = int(np.searchsorted(self.cum, s, side="right")) - 1
        i = min(max(i, 0), len(self.points) - 2)
        d = self.points[i + 1] - self.points[i]
        return math.atan2(d[1], d[0])

    def lane_at(self, s: float) -> int:
        for lane, a, b in self.lane_spans:
            if s < b:
                return lane
        return self.lane_spans[-1][0]

    def to_dict(self) -> dict:
        return {"lane_trace": list(self.lane_trace), "start_offset": self.start_offset,
                "end_offset": self.end_offset}


def _assemble(net: RoadNetwork, trace: Sequence[int], s0: float, s1: float) -> RoutePlan:
    """Build the dense polyline and sparse waypoints for a lane trace."""
    trace = tuple(int(t) for t in trace)
    pieces = []
    spans = []
    s_acc = 0.0
    for k, lid in enumerate(trace):
        lane = net.lanes[lid]
        a = s0 if k == 0 else 0.0
        b = s1 if k == len(trace) - 1 else lane.length
        if b < a - 1e-9:
            raise RoadNetError("lane offsets out of order on a single-lane plan")
        # interior samples strictly between a and b, plus exact ends
        inner = lane.cum[(lane.cum > a + 1e-9) & (lane.cum < b - 1e-9)]
        ss = np.concatenate([[a], inner, [b]]) if b > a + 1e-9 else np.array([a])
        seg = np.column_stack([np.interp(ss, lane.cum, lane.points[:, 0]),
                               np.interp(ss, lane.cum, lane.points[:, 1])])
        if pieces:
            seg = seg[1:] if len(seg) > 1 else seg[:0]
        pieces.append(seg)
        spans.append((lid, s_acc, s_acc + (b - a)))
        s_acc += b - a
    pts = np.concatenate([p for p in pieces if len(p)]) if pieces else np.zeros((0, 2))
    if len(pts) == 0:
        pts = net.lanes[trace[0]].point_at(s0)[None, :]
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))]) if len(pts) > 1 else np.zeros(1)
    total = float(s_acc)
    # sparse waypoints: start, every lane boundary, every WAYPOINT_SPACING m, end
    wps_s = [0.0]
    for k, (lid, a, b) in enumerate(spans):
        if k > 0:
            wps_s.append(a)
        nxt = wps_s[-1] + WAYPOINT_SPACING
        while nxt < b - 1e-6:
            wps_s.append(nxt)
            nxt += WAYPOINT_SPACING
    wps_s.append(total)
    uniq = []
    for s in wps_s:
        if not uniq or s - uniq[-1] > 1e-6:
            uniq.append(s)
    wps = np.array([[np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])] for s in uniq])
    junctions = tuple((net.lanes[lid].node, a, b) for lid, a, b in spans
                      if net.lanes[lid].kind == "connector" and b - a > 1e-9)
    return RoutePlan(wps, trace, total, float(s0), float(s1), pts, cum, tuple(spans), junctions, tuple(uniq))


def _snap(net: RoadNetwork, p: Sequence[float], radius: float = SNAP_RADIUS) -> tuple[int, float]:
    lane, s, d = net.nearest_lane(p)
    if d > radius:
        raise SnapError(f"point {tuple(np.round(p, 2))} is {d:.1f} m from the nearest lane")
    return lane, s


def _search(net: RoadNetwork, start: tuple[int, float], end: tuple[int, float]) -> list[int]:
    ls, ss = start
    le, se = end
    if ls == le and se >= ss:
        return [ls]
    dist: dict[int, float] = {}
    prev: dict[int, int] = {}
    heap: list[tuple[float, int, int]] = []
    rem = net.lanes[ls].length - ss
    for nb in net.lanes[ls].successors:
        heapq.heappush(heap, (rem, nb, ls))
    while heap:
        d, u, p = heapq.heappop(heap)
        if u in dist:
            continue
        dist[u] = d
        prev[u] = p
        if u == le:
            break
        du = d + net.lanes[u].length
        for v in net.lanes[u].successors:
            if v not in dist:
                heapq.heappush(heap, (du, v, u))
    if le not in dist:
        raise NoPath(f"lane {le} unreachable from lane {ls}")
    trace = [le]
    while True:
        p = prev[trace[-1]]
        trace.append(p)
        if p == ls:
            return trace[::-1]


def plan_route(net: RoadNetwork, start: Sequence[float], end: Sequence[float]) -> RoutePlan:
    """Shortest route by arc length between two points near lanes."""
    a = _snap(net, start)
    b = _snap(net, end)
    return _assemble(net, _search(net, a, b), a[1], b[1])


def plan_route_via(net: RoadNetwork, points: Iterable[Sequence[float]]) -> RoutePlan:
    """Concatenate shortest routes through a sequence of via points."""
    snapped = [_snap(net, p) for p in points]
    if len(snapped) < 2:
        raise ValueError("need at least two points")
    trace: list[int] = []
    for a, b in zip(snapped[:-1], snapped[1:]):
        part = _search(net, a, b)
        if trace and trace[-1] == part[0]:
            part = part[1:]
        trace.extend(part)
    return _assemble(net, trace, snapped[0][1], snapped[-1][1])


def subplan(net: RoadNetwork, plan: RoutePlan, s_a: float, s_b: float) -> RoutePlan:
    """Restrict ``plan`` to arclengths [s_a, s_b]."""
    s_a = max(0.0, s_a)
    s_b = min(plan.total_length, s_b)
    trace = []
    off0 = off1 = 0.0
    for k, (lid, a, b) in enumerate(plan.lane_spans):
        if b < s_a or a > s_b or (trace and a >= s_b):
            continue
        if not trace and b <= s_a and k + 1 < len(plan.lane_spans):
            continue  # s_a sits exactly on the boundary; start on the next lane
        base = plan.start_offset if k == 0 else 0.0
        if not trace:
            off0 = base + (s_a - a)
        trace.append(lid)
        off1 = base + (s_b - a)
    return _assemble(net, trace, off0, off1)


def project_onto_route(plan: RoutePlan, position: Sequence[float],
                       window: tuple[float, float] | None = None) -> tuple[float, float]:
    """Arclength along the route and distance to it for ``position``.

    ``window`` restricts the search to an arclength interval, which keeps
    projections from jumping between distant parts of self-crossing routes.
    """
    if len(plan.points) < 2:
        p = plan.points[0]
        return 0.0, float(math.hypot(position[0] - p[0], position[1] - p[1]))
    lo, hi = 0, len(plan.points) - 1
    if window is not None:
        lo = max(int(np.searchsorted(plan.cum, window[0], side="right")) - 1, 0)
        hi = min(int(np.searchsorted(plan.cum, window[1], side="left")), len(plan.points) - 1)
        hi = max(hi, lo + 1)
    s, d, _ = _kernels.project_polyline(float(position[0]), float(position[1]), plan.points, plan.cum, lo, hi)
    return min(max(s, 0.0), plan.total_length), d
