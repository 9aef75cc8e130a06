"""Brute-force reference implementations used by the tests.

Nothing here imports drivebench. Each oracle works on plain Python data
(lists, dicts, JSON-serializable structures) so cases can live in
``tests/oracle/*.json``.
"""

from __future__ import annotations

import heapq
import json
import math
from pathlib import Path

CASE_DIR = Path(__file__).parent / "oracle"


def load_cases(name: str) -> list[dict]:
    return json.loads((CASE_DIR / f"{name}.json").read_text())


# (a) shortest path over a raw lane graph


def _polyline_length(points) -> float:
    return sum(math.dist(points[i], points[i + 1]) for i in range(len(points) - 1))


def dijkstra_length(town: dict, start: tuple[int, float], end: tuple[int, float]) -> float:
    """Shortest arc length from (lane, offset) to (lane, offset) in a serialized town.

    Each lane is a node whose traversal costs its polyline length; the
    first lane costs its remainder past ``start`` and the last lane the
    part up to ``end``.
    """
    lanes = {l["id"]: l for l in town["lanes"]}
    length = {k: _polyline_length(l["points"]) for k, l in lanes.items()}
    ls, ss = start
    le, se = end
    if ls == le and se >= ss:
        return se - ss
    best = {}
    heap = [(length[ls] - ss, n) for n in lanes[ls]["successors"]]
    heapq.heapify(heap)
    while heap:
        d, u = heapq.heappop(heap)
        if u in best:
            continue
        best[u] = d
        if u == le:
            return d + se
        for v in lanes[u]["successors"]:
            if v not in best:
                heapq.heappush(heap, (d + length[u], v))
    return math.inf


def graph_shortest(edges: list[tuple[str, str, float]], a: str, b: str) -> float:
    """Plain node-edge Dijkstra, for the case files."""
    adj: dict[str, list] = {}
    for u, v, w in edges:
        adj.setdefault(u, []).append((v, w))
    dist = {a: 0.0}
    heap = [(0.0, a)]
    while heap:
        d, u = heapq.heappop(heap)
        if u == b:
            return d
        if d > dist.get(u, math.inf):
            continue
        for v, w in adj.get(u, []):
            if d + w < dist.get(v, math.inf):
                dist[v] = d + w
                heapq.heappush(heap, (d + w, v))
    return math.inf


def strongly_connected(town: dict) -> bool:
    lanes = {l["id"]: l for l in town["lanes"]}

    def reach(key):
        start = next(iter(lanes))
        seen = {start}
        todo = [start]
        while todo:
            u = todo.pop()
            for v in lanes[u][key]:
                if v not in seen:
                    seen.add(v)
                    todo.append(v)
        return len(seen) == len(lanes)

    return reach("successors") and reach("predecessors")


# (b) nearest point on a polyline by dense scanning


def polyline_scan(points, p, step: float = 0.01) -> tuple[float, float]:
    """(arclength, distance) of the nearest of the points sampled every ``step`` m."""
    best = (math.inf, 0.0)
    s0 = 0.0
    for i in range(len(points) - 1):
        a, b = points[i], points[i + 1]
        seg = math.dist(a, b)
        n = max(1, int(math.ceil(seg / step)))
        for k in range(n + 1):
            t = k / n
            q = (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))
            d = math.dist(q, p)
            if d < best[0]:
                best = (d, s0 + t * seg)
        s0 += seg
    return best[1], best[0]


def segment_distance(points, p) -> float:
    """Exact distance to a polyline, segment by segment."""
    best = math.inf
    for a, b in zip(points[:-1], points[1:]):
        dx, dy = b[0] - a[0], b[1] - a[1]
        L2 = dx * dx + dy * dy
        t = 0.0 if L2 == 0 else max(0.0, min(1.0, ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / L2))
        best = min(best, math.hypot(p[0] - a[0] - t * dx, p[1] - a[1] - t * dy))
    return best


# (c) BEV binning


def bev_cell(x: float, y: float, forward: float = 32.0, side: float = 16.0, cells: int = 64):
    """Row (along x) and column (along y, from the right edge) of a point, or None."""
    if not (0.0 <= x < forward and -side <= y < side):
        return None
    row = min(int(math.floor(x / (forward / cells))), cells - 1)
    col = min(int(math.floor((y + side) / (2 * side / cells))), cells - 1)
    return row, col


def bev_counts(points, forward: float = 32.0, side: float = 16.0, cells: int = 64, z_split: float = 0.2) -> dict:
    """{(row, col, channel): count} for a point list."""
    out: dict = {}
    for x, y, z in points:
        c = bev_cell(x, y, forward, side, cells)
        if c is None:
            continue
        key = (c[0], c[1], 1 if z > z_split else 0)
        out[key] = out.get(key, 0) + 1
    return out


# (d) central finite differences


def central_difference(f, x: list[float], i: int, h: float = 1e-4) -> float:
    xp = list(x)
    xm = list(x)
    xp[i] += h
    xm[i] -= h
    return (f(xp) - f(xm)) / (2 * h)


# (e) infraction score and sample statistics


def infraction_score(events: list[str], penalties: dict[str, float]) -> float:
    score = 1.0
    for e in events:
        if e in penalties:
            score *= penalties[e]
    return score


def sample_std(values: list[float]) -> float:
    n = len(values)
    if n < 2:
        return 0.0
    m = sum(values) / n
    return math.sqrt(sum((v - m) ** 2 for v in values) / (n - 1))


def mean(values: list[float]) -> float:
    return sum(values) / len(values)


def route_completion(s_final: float, offroad: float, length: float) -> float:
    if length <= 0:
        return 0.0
    return max(0.0, min(1.0, (min(s_final, length) - offroad) / length))


def per_km(count: int, meters: float) -> float:
    return count / (meters / 1000.0)


# (f) rank correlation


def pearson(a: list[float], b: list[float]) -> float:
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def average_ranks(a: list[float]) -> list[float]:
    """1-based ranks with ties sharing the mean of their positions."""
    order = sorted(range(len(a)), key=lambda i: a[i])
    ranks = [0.0] * len(a)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and a[order[j + 1]] == a[order[i]]:
            j += 1
        r = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = r
        i = j + 1
    return ranks


def spearman(a: list[float], b: list[float]) -> float:
    return pearson(average_ranks(a), average_ranks(b))


# (g) speed recurrence in closed form


def speed_sequence(n: int, dt: float = 0.05, a_max: float = 3.0, drag: float = 0.1, v_max: float = 15.0,
                   throttle: float = 1.0) -> list[float]:
    """Speeds after each of ``n`` full-throttle ticks from rest.

    The recurrence v' = v + (u a - c v) dt is linear, so
    v_k = (u a / c) (1 - (1 - c dt)^k) until the v_max clamp.
    """
    u = throttle * a_max
    q = 1.0 - drag * dt
    return [min(u / drag * (1.0 - q ** k), v_max) for k in range(1, n + 1)]
