"""LiDAR-like ray casting, BEV histogram pseudo-images and the ego-frame goal."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels

BEV_FORWARD = 32.0
BEV_SIDE = 16.0
BEV_CELLS = 64
Z_SPLIT = 0.2
N_RAYS = 360
POINTS_PER_HIT = 4
GOAL_RADIUS = 5.0


@dataclass(frozen=True)
class BevImage:
    grid: np.ndarray  # (cells, cells, 2) integer counts; row ~ x forward, col ~ y left

    @property
    def shape(self) -> tuple[int, ...]:
        return self.grid.shape


@dataclass(frozen=True)
class GoalInput:
    goal: np.ndarray
    goal_index: int


def raycast_pointcloud(world, net=None, max_range: float = BEV_FORWARD, n_rays: int = N_RAYS,
                       k: int = POINTS_PER_HIT) -> np.ndarray:
    """Ego-frame (x forward, y left, z up) points from one 360 degree sweep.

    A ray that meets an actor within range returns ``k`` points on it with
    heights drawn uniformly up to the actor height; any other ray returns one
    ground point at the first road-edge crossing, or at ``max_range``.
    """
    ego = world.ego
    ang = np.arange(n_rays) * (2 * math.pi / n_rays)
    dirs = np.column_stack([np.cos(ego.heading + ang), np.sin(ego.heading + ang)])
    reach = max_range + 6.0
    actors = [a for a in world.actors
              if abs(a.pose.x - ego.x) < reach and abs(a.pose.y - ego.y) < reach]
    boxes = np.array([a.box() for a in actors], dtype=float).reshape(-1, 5)
    dist, idx = _kernels.ray_boxes(ego.x, ego.y, dirs, boxes, max_range)
    hit = idx >= 0
    rects = np.zeros((0, 4)) if net is None else _nearby_rects(net.rects, ego.x, ego.y, reach)
    edge = _kernels.ray_region_boundary(ego.x, ego.y, dirs[~hit], rects, max_range)

    rng = np.random.default_rng([int(world.seed) & 0xFFFFFFFF, int(world.tick), 0x5EED])
    heights = np.array([actors[i].height for i in idx[hit]], dtype=float)
    z = rng.random((len(heights), k)) * heights[:, None]
    ca, sa = np.cos(ang), np.sin(ang)
    hx = np.repeat(dist[hit] * ca[hit], k)
    hy = np.repeat(dist[hit] * sa[hit], k)
    gx = edge * ca[~hit]
    gy = edge * sa[~hit]
    pts = np.concatenate([
        np.column_stack([hx, hy, z.reshape(-1)]),
        np.column_stack([gx, gy, np.zeros(len(gx))]),
    ])
    return pts


def _nearby_rects(rects: np.ndarray, x: float, y: float, r: float) -> np.ndarray:
    if len(rects) == 0:
        return rects
    keep = (rects[:, 0] < x + r) & (rects[:, 2] > x - r) & (rects[:, 1] < y + r) & (rects[:, 3] > y - r)
    return rects[keep]


def bev_histogram(cloud, cells: int = BEV_CELLS, forward: float = BEV_FORWARD, side: float = BEV_SIDE,
                  z_split: float = Z_SPLIT) -> BevImage:
    """Two-channel point-count grid over x in [0, forward), y in [-side, side)."""
    grid = _kernels.bev_histogram(np.asarray(cloud, dtype=float).reshape(-1, 3), forward, side, cells, z_split)
    return BevImage(grid)


def to_ego_frame(points, pose) -> np.ndarray:
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    d = np.atleast_2d(np.asarray(points, dtype=float)) - np.array([pose.x, pose.y])
    return np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]])


def to_world_frame(points, pose) -> np.ndarray:
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    p = np.atleast_2d(np.asarray(points, dtype=float))
    return np.column_stack([pose.x + c * p[:, 0] - s * p[:, 1], pose.y + s * p[:, 0] + c * p[:, 1]])


def goal_in_ego_frame(world, route, g_prev: int) -> GoalInput:
    """Advance the 1-based goal index while the ego is within GOAL_RADIUS of it."""
    plan = getattr(route, "plan", route)
    wps = plan.waypoints
    G = len(wps)
    g = min(max(int(g_prev), 1), G)
    ex, ey = world.ego.x, world.ego.y
    while g < G and math.hypot(wps[g - 1, 0] - ex, wps[g - 1, 1] - ey) <= GOAL_RADIUS:
        g += 1
    return GoalInput(to_ego_frame(wps[g - 1], world.ego)[0], g)


def observe(world, ctx, goal: GoalInput, params=None):
    from .simcore import Observation

    cloud = raycast_pointcloud(world, ctx.net)
    grid = bev_histogram(cloud).grid
    return Observation(np.minimum(grid, 65535).astype(np.uint16), goal.goal, goal.goal_index)
