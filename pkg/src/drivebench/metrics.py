"""Route completion, infraction score, driving score, per-km rates and
aggregation over routes and repeated runs."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

INFRACTION_KINDS = ("CollisionPedestrian", "CollisionVehicle", "CollisionStatic", "RedLight", "StopSign")
RATE_KINDS = INFRACTION_KINDS + ("OffRoad", "RouteDeviation", "AgentBlocked", "RouteTimeout")
DEFAULT_PENALTIES = {
    "CollisionPedestrian": 0.50,
    "CollisionVehicle": 0.60,
    "CollisionStatic": 0.65,
    "RedLight": 0.70,
    "StopSign": 0.80,
}


class ZeroDistance(ValueError):
    pass


def _kind(e) -> str:
    k = getattr(e, "kind", e)
    return getattr(k, "value", k)


def event_counts(events: Iterable) -> dict[str, int]:
    out: dict[str, int] = {}
    for e in events:
        k = _kind(e)
        out[k] = out.get(k, 0) + 1
    return out


def route_completion(log, route=None) -> float:
    """Completed share of the route, less off-road distance, clamped to [0, 1].

    A finished episode counts the whole route as reached.
    """
    length = log.route_length if route is None else getattr(route, "length", route)
    if length <= 0:
        return 0.0
    s = length if log.completed == "Finished" else min(log.s_final, length)
    return min(max((s - log.offroad_distance) / length, 0.0), 1.0)


def infraction_score(events: Iterable | Mapping[str, int], penalties: Mapping[str, float] | None = None) -> float:
    """Product of one penalty coefficient per infraction, taken in event order.

    A ``{kind: count}`` mapping is expanded kind by kind in penalty-table order.
    """
    pen = DEFAULT_PENALTIES if penalties is None else penalties
    if isinstance(events, Mapping):
        kinds = [k for k in pen for _ in range(int(events.get(k, 0)))]
    else:
        kinds = [_kind(e) for e in events]
    score = 1.0
    for k in kinds:
        if k in pen:
            score *= pen[k]
    return score


def driving_score(rc: float, is_: float) -> float:
    return rc * is_


def set_driving_score(results: Sequence["RouteResult"]) -> float:
    return float(np.mean([r.DS for r in results])) if results else 0.0


def per_km_rates(events: Iterable | Mapping[str, int], driven_distance: float,
                 kinds: Sequence[str] = RATE_KINDS) -> dict[str, float]:
    if not driven_distance > 0:
        raise ZeroDistance("driven distance must be positive")
    counts = dict(events) if isinstance(events, Mapping) else event_counts(events)
    km = driven_distance / 1000.0
    return {k: counts.get(k, 0) / km for k in kinds}


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1))


def format_pm(mean: float, std: float, digits: int = 1) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


@dataclass
class RouteResult:
    route_id: str
    seed: int
    RC: float
    IS: float
    DS: float
    counts: dict[str, int]
    driven_distance: float
    terminal: str

    @property
    def rates(self) -> dict[str, float]:
        if self.driven_distance <= 0:
            return {k: 0.0 for k in RATE_KINDS}
        return per_km_rates(self.counts, self.driven_distance)

    def row(self) -> dict:
        out = {"route_id": self.route_id, "seed": self.seed, "RC": self.RC, "IS": self.IS, "DS": self.DS,
               "driven_m": self.driven_distance, "terminal": self.terminal}
        for k in RATE_KINDS:
            out[k] = self.counts.get(k, 0)
        return out


def score_episode(log, penalties: Mapping[str, float] | None = None) -> RouteResult:
    counts = log.event_counts()
    rc = route_completion(log)
    is_ = infraction_score(log.events, penalties)
    return RouteResult(log.route_id, int(log.seed), rc, is_, driving_score(rc, is_), counts,
                       float(log.driven_distance), log.completed)


@dataclass
class RunSummary:
    """One pass over a route set under one seed."""

    seed: int
    results: list[RouteResult]

    @property
    def DS(self) -> float:
        return set_driving_score(self.results)

    @property
    def RC(self) -> float:
        return float(np.mean([r.RC for r in self.results])) if self.results else 0.0

    @property
    def IS(self) -> float:
        return float(np.mean([r.IS for r in self.results])) if self.results else 0.0

    @property
    def distance(self) -> float:
        return float(sum(r.driven_distance for r in self.results))

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.results:
            for k, v in r.counts.items():
                out[k] = out.get(k, 0) + v
        return out

    def rates(self) -> dict[str, float]:
        if self.distance <= 0:
            return {k: 0.0 for k in RATE_KINDS}
        return per_km_rates(self.counts(), self.distance)


def aggregate_runs(runs: Sequence[RunSummary]) -> dict[str, tuple[float, float]]:
    """Mean and sample std over repeated runs of DS/RC/IS (in %) and per-km rates."""
    if not runs:
        raise ValueError("need at least one run")
    out = {
        "DS": mean_std([100 * r.DS for r in runs]),
        "RC": mean_std([100 * r.RC for r in runs]),
        "IS": mean_std([100 * r.IS for r in runs]),
    }
    rates = [r.rates() for r in runs]
    for k in RATE_KINDS:
        out[k] = mean_std([x[k] for x in rates])
    return out


TABLE_COLUMNS = ("DS", "RC", "IS", "CollisionPedestrian", "CollisionVehicle", "CollisionStatic", "RedLight",
                 "StopSign", "OffRoad", "RouteDeviation", "AgentBlocked", "RouteTimeout")
TABLE_HEADERS = ("DS", "RC", "IS", "Ped", "Veh", "Stat", "Red", "Stop", "OffRd", "Dev", "Block", "TO")


def table_header(name_width: int = 14) -> str:
    return " | ".join([f"{'Method':<{name_width}}"] + [f"{h:>13}" for h in TABLE_HEADERS])


def table_row(name: str, agg: Mapping[str, tuple[float, float]], name_width: int = 14) -> str:
    cells = []
    for k in TABLE_COLUMNS:
        m, s = agg[k]
        cells.append(f"{format_pm(m, s, 1 if k in ('DS', 'RC', 'IS') else 2):>13}")
    return " | ".join([f"{name:<{name_width}}"] + cells)


@dataclass
class EvaluationReport:
    runs: list[RunSummary]
    config_fingerprint: str = ""
    label: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def results(self) -> list[RouteResult]:
        return [r for run in self.runs for r in run.results]

    def aggregate(self) -> dict[str, tuple[float, float]]:
        return aggregate_runs(self.runs)

    def route_stats(self) -> dict[str, tuple[float, float]]:
        """Mean and sample std of DS/RC/IS across all individual route results."""
        res = self.results
        return {k: mean_std([getattr(r, k) for r in res]) for k in ("DS", "RC", "IS")}

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = [r.row() for r in self.results]
        fields = ["route_id", "seed", "RC", "IS", "DS", "driven_m", "terminal", *RATE_KINDS]
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_json(self) -> dict:
        agg = self.aggregate()
        return {
            "label": self.label,
            "config_fingerprint": self.config_fingerprint,
            "seeds": [r.seed for r in self.runs],
            "n_routes": len(self.runs[0].results) if self.runs else 0,
            "aggregate": {k: {"mean": m, "std": s} for k, (m, s) in agg.items()},
            "per_run": [{"seed": r.seed, "DS": r.DS, "RC": r.RC, "IS": r.IS, "distance_m": r.distance,
                         "rates": r.rates()} for r in self.runs],
            "meta": self.meta,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    def table_row(self, name: str | None = None) -> str:
        return table_row(name or self.label or "policy", self.aggregate())


def report_from_dict(d: Mapping) -> dict:
    """Aggregates back from a JSON summary (``mean``/``std`` pairs)."""
    return {k: (v["mean"], v["std"]) for k, v in d["aggregate"].items()}


def results_from_csv(text: str) -> list[RouteResult]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        counts = {k: int(row[k]) for k in RATE_KINDS if int(row[k])}
        out.append(RouteResult(row["route_id"], int(row["seed"]), float(row["RC"]), float(row["IS"]),
                               float(row["DS"]), counts, float(row["driven_m"]), row["terminal"]))
    return out


def penalties_from_config(cfg: Mapping | None) -> dict[str, float]:
    pen = dict(DEFAULT_PENALTIES)
    if cfg:
        for k, v in cfg.items():
            if k not in pen:
                raise KeyError(f"penalties.{k}: unknown infraction kind")
            v = float(v)
            if not 0.0 <= v <= 1.0 or math.isnan(v):
                raise ValueError(f"penalties.{k}: must lie in [0, 1]")
            pen[k] = v
    return pen

