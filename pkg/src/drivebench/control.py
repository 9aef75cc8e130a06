"""Inverse dynamics: lateral and longitudinal PID controllers on waypoints."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


class DegenerateSeries(ValueError):
    pass


@dataclass(frozen=True)
class ControlCommand:
    steer: float = 0.0
    throttle: float = 0.0
    brake: float = 0.0

    def clamped(self) -> "ControlCommand":
        return ControlCommand(min(max(self.steer, -1.0), 1.0), min(max(self.throttle, 0.0), 1.0),
                              min(max(self.brake, 0.0), 1.0))


@dataclass(frozen=True)
class PidGains:
    lateral: tuple[float, float, float] = (1.0, 0.05, 0.3)
    longitudinal: tuple[float, float, float] = (0.8, 0.05, 0.1)
    integral_max: float = 2.0
    brake_deadband: float = 0.3
    stop_speed: float = 0.2
    waypoint_dt: float = 0.5


@dataclass(frozen=True)
class PidState:
    lat_integral: float = 0.0
    lat_prev: float = 0.0
    lon_integral: float = 0.0
    lon_prev: float = 0.0
    started: bool = False


def _clip(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def heading_error(waypoints: np.ndarray) -> float:
    """Angle to the midpoint of the first two waypoints, positive to the right."""
    mx = 0.5 * (waypoints[0, 0] + waypoints[1, 0])
    my = 0.5 * (waypoints[0, 1] + waypoints[1, 1])
    if mx == 0.0 and my == 0.0:
        return 0.0
    return -math.atan2(my, mx)


def pid(waypoints, ego_speed: float, state: PidState, gains: PidGains = PidGains(),
        dt: float = 0.05) -> tuple[ControlCommand, PidState]:
    """One control step from ego-frame waypoints (x forward, y left).

    Steering is negative to the left. Desired speed comes from the spacing
    of the first two waypoints.
    """
    w = np.asarray(waypoints, dtype=float).reshape(-1, 2)
    if len(w) < 2:
        raise DegenerateSeries("need at least two waypoints")
    imax = gains.integral_max

    e_lat = heading_error(w)
    lat_i = _clip(state.lat_integral + e_lat * dt, -imax, imax)
    lat_d = (e_lat - state.lat_prev) / dt if state.started else 0.0
    kp, ki, kd = gains.lateral
    steer = _clip(kp * e_lat + ki * lat_i + kd * lat_d, -1.0, 1.0)

    desired = math.hypot(w[1, 0] - w[0, 0], w[1, 1] - w[0, 1]) / gains.waypoint_dt
    e_lon = desired - ego_speed
    lon_i = _clip(state.lon_integral + e_lon * dt, -imax, imax)
    lon_d = (e_lon - state.lon_prev) / dt if state.started else 0.0
    kp, ki, kd = gains.longitudinal
    u = kp * e_lon + ki * lon_i + kd * lon_d
    throttle = brake = 0.0
    if desired < gains.stop_speed:
        brake = 1.0
        lon_i = 0.0
    elif e_lon > 0:
        throttle = _clip(u, 0.0, 1.0)
    elif e_lon < -gains.brake_deadband:
        brake = _clip(-u, 0.0, 1.0)
    new = replace(state, lat_integral=lat_i, lat_prev=e_lat, lon_integral=lon_i, lon_prev=e_lon, started=True)
    return ControlCommand(steer, throttle, brake), new
