"""Privileged expert driver and dataset collection by expert rollouts."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .control import ControlCommand, PidGains, PidState, pid
from .roadnet import RoadNetwork, StopSign, TrafficLight
from .routegen import Maneuver, Route, maneuver_distribution
from .sensors import BEV_CELLS, to_ego_frame
from .simcore import (ActorKind, RouteContext, SimConfig, VehicleParams, WorldState, run_episode)

T_DEFAULT = 4
WAYPOINT_DT = 0.5
SHARD_SIZE = 10_000


class InsufficientRoutes(RuntimeError):
    pass


@dataclass(frozen=True)
class ExpertConfig:
    cruise_speed: float = 6.0
    turn_speed: float = 3.0
    accel: float = 3.0
    comfort_decel: float = 2.5
    headway: float = 5.0
    stop_margin: float = 2.0
    lookahead: float = 40.0
    corridor_margin: float = 0.5


@dataclass
class ExpertState:
    target_speed: float
    stop_at: float  # route arclength of the nearest required stop
    red_light_ahead: bool = False
    lead_vehicle: bool = False
    pedestrian_ahead: bool = False
    stop_sign_pending: bool = False


def assess(world: WorldState, ctx: RouteContext, cfg: ExpertConfig = ExpertConfig(),
           params: VehicleParams = VehicleParams()) -> ExpertState:
    """Hazards and the nearest stop point, recomputed from the world state alone."""
    s0 = world.route_s
    plan = ctx.plan
    state = ExpertState(cfg.cruise_speed, math.inf)
    v = world.ego.speed
    for k, (s_in, s_out, node, ctrl, axis, turn) in enumerate(ctx.junctions):
        if s_in < s0 - 0.5 or s_in - s0 > cfg.lookahead:
            continue
        line = s_in - cfg.stop_margin
        if isinstance(ctrl, TrafficLight):
            st = ctrl.state(world.time, axis)
            brake_dist = v * v / (2 * 4.0)
            if st == "red" or (st == "yellow" and line - s0 >= brake_dist):
                state.red_light_ahead = True
                state.stop_at = min(state.stop_at, line)
        elif isinstance(ctrl, StopSign) and k not in world.stops_served:
            state.stop_sign_pending = True
            state.stop_at = min(state.stop_at, line)

    # anything inside the driving corridor ahead
    if world.actors:
        hi = min(plan.total_length, s0 + cfg.lookahead)
        ss = np.arange(s0 + 0.5, hi + 1e-9, 1.0)
        if len(ss):
            rp = np.column_stack([np.interp(ss, plan.cum, plan.points[:, 0]),
                                  np.interp(ss, plan.cum, plan.points[:, 1])])
            ex, ey = world.ego.x, world.ego.y
            reach = cfg.lookahead + 5.0
            lim = params.half_width + cfg.corridor_margin
            for a in world.actors:
                if abs(a.pose.x - ex) > reach or abs(a.pose.y - ey) > reach:
                    continue
                probes = [(a.pose.x, a.pose.y)]
                if a.kind is not ActorKind.STATIC and a.pose.speed > 0.2:
                    for t in (1.0, 2.0):
                        probes.append((a.pose.x + math.cos(a.pose.heading) * a.pose.speed * t,
                                       a.pose.y + math.sin(a.pose.heading) * a.pose.speed * t))
                c, sn = math.cos(a.pose.heading), math.sin(a.pose.heading)
                for px, py in probes:
                    dx, dy = rp[:, 0] - px, rp[:, 1] - py
                    lx = np.maximum(np.abs(c * dx + sn * dy) - a.half_length, 0.0)
                    ly = np.maximum(np.abs(-sn * dx + c * dy) - a.half_width, 0.0)
                    inside = np.nonzero(np.hypot(lx, ly) < lim)[0]
                    if len(inside):
                        stop = ss[inside[0]] - cfg.headway
                        if stop < state.stop_at:
                            state.stop_at = stop
                        if a.kind is ActorKind.PEDESTRIAN:
                            state.pedestrian_ahead = True
                        elif a.kind is ActorKind.VEHICLE:
                            state.lead_vehicle = True
                        break
    if math.isfinite(state.stop_at):
        state.target_speed = 0.0 if state.stop_at <= s0 + 0.5 else state.target_speed
    return state


def speed_profile(world: WorldState, ctx: RouteContext, hz: ExpertState, T: int = T_DEFAULT,
                  dtau: float = WAYPOINT_DT, cfg: ExpertConfig = ExpertConfig()) -> np.ndarray:
    """Distances travelled after each of T intervals of ``dtau`` seconds."""
    s0 = world.route_s
    zones = [(a - 3.0, b) for a, b, _, _, _, turn in ctx.junctions if turn in ("left", "right", "uturn")]
    stop = hz.stop_at - s0
    b = cfg.comfort_decel
    sub = 0.05
    n_sub = int(round(dtau / sub))
    v = world.ego.speed
    x = 0.0
    out = []
    for _ in range(T):
        for _ in range(n_sub):
            cap = cfg.cruise_speed
            for za, zb in zones:
                if za - s0 <= x <= zb - s0:
                    cap = min(cap, cfg.turn_speed)
                elif x < za - s0:
                    cap = min(cap, math.sqrt(cfg.turn_speed ** 2 + 2 * b * (za - s0 - x)))
            if math.isfinite(stop):
                cap = min(cap, math.sqrt(2 * b * max(0.0, stop - x)))
            v = min(v + cfg.accel * sub, cap)
            x = x + v * sub
            if math.isfinite(stop):
                x = min(x, max(stop, 0.0))
        out.append(x)
    return np.array(out)


def expert_waypoints(world: WorldState, ctx: RouteContext, T: int = T_DEFAULT, dtau: float = WAYPOINT_DT,
                     cfg: ExpertConfig = ExpertConfig()) -> np.ndarray:
    """T ego-frame waypoints on the route centerline following the planned speed profile."""
    hz = assess(world, ctx, cfg)
    xs = speed_profile(world, ctx, hz, T, dtau, cfg)
    plan = ctx.plan
    pts = np.array([plan.point_at(world.route_s + x) for x in xs])
    return to_ego_frame(pts, world.ego)


def expert_control(world: WorldState, ctx: RouteContext, state: PidState = PidState(),
                   gains: PidGains = PidGains()) -> tuple[ControlCommand, PidState]:
    return pid(expert_waypoints(world, ctx), world.ego.speed, state, gains)


class ExpertDriver:
    needs_observation = False

    def __init__(self, cfg: ExpertConfig = ExpertConfig(), T: int = T_DEFAULT):
        self.cfg = cfg
        self.T = T

    def reset(self, ctx: RouteContext) -> None:
        pass

    def __call__(self, world, ctx, observation) -> np.ndarray:
        return expert_waypoints(world, ctx, self.T, cfg=self.cfg)


class ZeroDriver:
    """Baseline that never moves: every waypoint at the ego origin."""

    needs_observation = False

    def reset(self, ctx) -> None:
        pass

    def __call__(self, world, ctx, observation) -> np.ndarray:
        return np.zeros((T_DEFAULT, 2))


# datasets

FRAME_DTYPE = np.dtype([
    ("bev", "<u2", (BEV_CELLS, BEV_CELLS, 2)),
    ("goal", "<f4", (2,)),
    ("waypoints", "<f4", (2 * T_DEFAULT,)),
    ("maneuver", "u1"),
    ("goal_index", "<u2"),
    ("route", "<u4"),
    ("tick", "<u4"),
])


@dataclass
class Dataset:
    bev: np.ndarray  # (N, H, W, 2) uint16
    goal: np.ndarray  # (N, 2) float32
    waypoints: np.ndarray  # (N, T, 2) float32
    maneuver: np.ndarray  # (N,) uint8
    goal_index: np.ndarray
    route: np.ndarray  # index into route_ids
    tick: np.ndarray
    route_ids: list[str] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.maneuver)

    @property
    def routes_used(self) -> int:
        return len(set(self.route_ids[i] for i in np.unique(self.route))) if len(self) else 0

    def per_route_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for i in self.route:
            rid = self.route_ids[int(i)]
            out[rid] = out.get(rid, 0) + 1
        return out

    def maneuver_labels(self) -> np.ndarray:
        return self.maneuver

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.bev[idx], self.goal[idx], self.waypoints[idx], self.maneuver[idx],
                       self.goal_index[idx], self.route[idx], self.tick[idx], list(self.route_ids),
                       dict(self.manifest))

    @classmethod
    def empty(cls, T: int = T_DEFAULT) -> "Dataset":
        return cls(np.zeros((0, BEV_CELLS, BEV_CELLS, 2), np.uint16), np.zeros((0, 2), np.float32),
                   np.zeros((0, T, 2), np.float32), np.zeros(0, np.uint8), np.zeros(0, np.uint16),
                   np.zeros(0, np.uint32), np.zeros(0, np.uint32))

    def save(self, directory: str | Path) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        n = len(self)
        for k, a in enumerate(range(0, max(n, 1), SHARD_SIZE)):
            b = min(a + SHARD_SIZE, n)
            rec = np.zeros(b - a, dtype=FRAME_DTYPE)
            rec["bev"] = self.bev[a:b]
            rec["goal"] = self.goal[a:b]
            rec["waypoints"] = self.waypoints[a:b].reshape(b - a, 2 * T_DEFAULT)
            rec["maneuver"] = self.maneuver[a:b]
            rec["goal_index"] = self.goal_index[a:b]
            rec["route"] = self.route[a:b]
            rec["tick"] = self.tick[a:b]
            p = d / f"frames_{k:05d}.bin"
            rec.tofile(p)
            files.append(p)
        man = dict(self.manifest)
        man.update({
            "format": 1,
            "frames": n,
            "shards": [f.name for f in files],
            "shard_size": SHARD_SIZE,
            "record": {"dtype": [[name, str(FRAME_DTYPE[name].base), list(FRAME_DTYPE[name].shape)]
                                 for name in FRAME_DTYPE.names], "itemsize": FRAME_DTYPE.itemsize},
            "bev_shape": [BEV_CELLS, BEV_CELLS, 2],
            "route_ids": self.route_ids,
            "routes_used": self.routes_used,
            "per_route_frames": self.per_route_counts(),
            "maneuver_distribution": maneuver_distribution(self).round(4).tolist() if n else [0.0] * 4,
        })
        self.manifest = man
        (d / "manifest.json").write_text(json.dumps(man, indent=1, sort_keys=True))
        return [d / "manifest.json"] + files

    @classmethod
    def load(cls, directory: str | Path) -> "Dataset":
        d = Path(directory)
        man = json.loads((d / "manifest.json").read_text())
        recs = [np.fromfile(d / name, dtype=FRAME_DTYPE) for name in man["shards"]]
        rec = np.concatenate(recs) if recs else np.zeros(0, FRAME_DTYPE)
        rec = rec[: man["frames"]]
        n = len(rec)
        return cls(rec["bev"].copy(), rec["goal"].copy(), rec["waypoints"].reshape(n, T_DEFAULT, 2).copy(),
                   rec["maneuver"].copy(), rec["goal_index"].copy(), rec["route"].copy(), rec["tick"].copy(),
                   list(man["route_ids"]), man)


def frames_to_dataset(frames: Sequence, route_ids: list[str]) -> Dataset:
    if not frames:
        return Dataset.empty()
    index = {r: i for i, r in enumerate(route_ids)}
    return Dataset(
        np.stack([f.observation.bev for f in frames]).astype(np.uint16),
        np.stack([f.observation.goal for f in frames]).astype(np.float32),
        np.stack([f.expert_waypoints for f in frames]).astype(np.float32),
        np.array([int(f.maneuver) for f in frames], dtype=np.uint8),
        np.array([f.observation.goal_index for f in frames], dtype=np.uint16),
        np.array([index[f.route_id] for f in frames], dtype=np.uint32),
        np.array([f.tick for f in frames], dtype=np.uint32),
        list(route_ids),
    )


def collect_dataset(nets: dict[int, RoadNetwork] | Sequence[RoadNetwork], routes: Sequence[Route],
                    frames_target: int, seed: int, config: SimConfig = SimConfig(),
                    no_reuse: bool = False, expert_cfg: ExpertConfig = ExpertConfig(),
                    log=None) -> Dataset:
    """Expert rollouts over seeded route draws until ``frames_target`` frames are recorded."""
    if not isinstance(nets, dict):
        nets = {n.town_seed: n for n in nets}
    routes = list(routes)
    rng = np.random.default_rng(seed)
    frames = []
    episodes = []
    used_ids: list[str] = []
    driver = ExpertDriver(expert_cfg)
    queue: list[int] = []
    passes = 0
    while len(frames) < frames_target:
        if not queue:
            if not routes or (no_reuse and passes > 0):
                raise InsufficientRoutes(f"routes exhausted at {len(frames)} of {frames_target} frames")
            queue = list(rng.permutation(len(routes)))
            passes += 1
        r = routes[int(queue.pop(0))]
        ep_seed = int(rng.integers(2**31))
        log_ = run_episode(nets[r.town_seed], r, driver, ep_seed, mode="record", config=config)
        frames.extend(log_.frames)
        if r.id not in used_ids:
            used_ids.append(r.id)
        episodes.append({"route_id": r.id, "seed": ep_seed, "frames": len(log_.frames),
                         "completed": log_.completed})
        if log is not None:
            log(f"episode {len(episodes)} route {r.id} frames {len(log_.frames)} "
                f"total {len(frames)}/{frames_target} ({log_.completed})")
    ds = frames_to_dataset(frames, used_ids)
    ds.manifest = {
        "seed": int(seed),
        "frames_target": int(frames_target),
        "town_seeds": sorted(int(k) for k in nets),
        "episodes": episodes,
        "sim_config": asdict(config),
        "expert_config": asdict(expert_cfg),
        "maneuver_distribution": maneuver_distribution(ds).round(4).tolist() if len(ds) else [0.0] * 4,
        "routes_used": ds.routes_used,
    }
    return ds
