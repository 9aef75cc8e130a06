"""Correlation statistics, checkpoint selection and experiment orchestration.

``run_experiment`` trains on nested dataset tiers, evaluates every
``eval_every``-th checkpoint on the validation route sets and the held-out
test set, and writes the score series, correlation matrices, a
checkpoint-selection table and closed-loop comparison tables.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .expert import Dataset, ExpertDriver, ZeroDriver, collect_dataset
from .metrics import (EvaluationReport, RunSummary, aggregate_runs, mean_std, penalties_from_config,
                      score_episode, table_header, table_row)
from .policy import Checkpoint, PolicyDriver, TrainConfig, checkpoint_path, offline_val_loss, train
from .roadnet import RoadNetwork, build_town
from .routegen import (Route, RouteType, generate_routes, maneuver_distribution, save_routes)
from .simcore import SimConfig, run_episode


class ConstantSeries(ValueError):
    """Correlation is undefined because a series has no spread."""


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# statistics


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a, dtype=float).ravel()
    y = np.asarray(b, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError(f"series lengths differ ({x.size} vs {y.size})")
    if x.size < 2:
        raise ValueError("need at least two points")
    return x, y


def pearson(a, b) -> float:
    x, y = _pair(a, b)
    dx = x - x.mean()
    dy = y - y.mean()
    vx = float(dx @ dx)
    vy = float(dy @ dy)
    if vx == 0.0 or vy == 0.0 or np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ConstantSeries("series is constant")
    # one square root keeps pearson(x, x) exactly 1
    r = float(dx @ dy) / math.sqrt(vx * vy)
    return min(1.0, max(-1.0, r))


def rank(a) -> np.ndarray:
    """Ranks starting at 1; ties share their average rank."""
    return rankdata(np.asarray(a, dtype=float), method="average")


def spearman(a, b) -> float:
    x, y = _pair(a, b)
    return pearson(rank(x), rank(y))


@dataclass(frozen=True)
class ScoreSeries:
    label: str
    epochs: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.epochs) != len(self.values):
            raise ValueError("one value per epoch")
        if any(b <= a for a, b in zip(self.epochs, self.epochs[1:])):
            raise ValueError("epochs must be strictly increasing")

    def at(self, epoch: int) -> float:
        return self.values[self.epochs.index(epoch)]


def select_checkpoint(series: ScoreSeries, minimize: bool = False) -> int:
    """Epoch of the best value; ties go to the earliest epoch."""
    if not series.values:
        raise ValueError("empty series")
    v = np.asarray(series.values, dtype=float)
    best = v.min() if minimize else v.max()
    return int(series.epochs[int(np.nonzero(v == best)[0][0])])


@dataclass
class CorrelationMatrix:
    labels: list[str]
    pearson: np.ndarray  # NaN where a series is constant
    spearman: np.ndarray
    excluded: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        def cells(m):
            return [[None if not np.isfinite(v) else round(float(v), 12) for v in row] for row in m]

        return {"labels": self.labels, "pearson": cells(self.pearson), "spearman": cells(self.spearman),
                "excluded": self.excluded}

    def get(self, a: str, b: str, kind: str = "pearson") -> float:
        m = self.pearson if kind == "pearson" else self.spearman
        return float(m[self.labels.index(a), self.labels.index(b)])


def correlation_matrix(series: Sequence[ScoreSeries] | Mapping[str, Sequence[float]]) -> CorrelationMatrix:
    if isinstance(series, Mapping):
        items = [(k, np.asarray(v, dtype=float)) for k, v in series.items()]
    else:
        items = [(s.label, np.asarray(s.values, dtype=float)) for s in series]
    if len(items) < 2:
        raise ValueError("need at least two series")
    n = len(items)
    P = np.full((n, n), np.nan)
    S = np.full((n, n), np.nan)
    excluded = [k for k, v in items if v.size < 2 or np.ptp(v) == 0]
    for i in range(n):
        for j in range(i, n):
            if items[i][0] in excluded or items[j][0] in excluded:
                continue
            if i == j:
                P[i, i] = S[i, i] = 1.0
                continue
            P[i, j] = P[j, i] = pearson(items[i][1], items[j][1])
            S[i, j] = S[j, i] = spearman(items[i][1], items[j][1])
    return CorrelationMatrix([k for k, _ in items], P, S, excluded)


# configuration


@dataclass(frozen=True)
class ValSet:
    name: str
    type: str
    count: int
    seed: int


@dataclass(frozen=True)
class ExperimentConfig:
    train_towns: tuple[int, ...] = (11, 12, 13)
    test_towns: tuple[int, ...] = (99,)
    town_blocks: int = 5
    block_size: tuple[float, float] = (50.0, 70.0)
    drop_prob: float = 0.2
    pool: tuple[tuple[str, int], ...] = (("tiny", 30), ("short", 15))
    pool_seed: int = 1
    tiers: tuple[tuple[str, int], ...] = (("d5k", 5000), ("d10k", 10000), ("d20k", 20000))
    data_seed: int = 0
    offline_val_frames: int = 1000
    valsets: tuple[ValSet, ...] = (
        ValSet("40T", "tiny", 40, 101), ValSet("20T", "tiny", 20, 102),
        ValSet("6S", "short", 6, 103), ValSet("3S", "short", 3, 104),
        ValSet("3L", "long", 3, 105), ValSet("2L", "long", 2, 106),
    )
    val_seed: int = 0
    test_short: int = 4
    test_long: int = 2
    test_min_length: float = 160.0
    test_route_seed: int = 7
    train_seeds: tuple[int, ...] = (0, 1, 2)
    test_seeds: tuple[int, ...] = (0, 1, 2)
    train: TrainConfig = TrainConfig(epochs=20)
    eval_every: int = 5
    selection_tier: str = "d10k"
    select_on: str = "mean"
    penalties: tuple[tuple[str, float], ...] = ()
    sim: SimConfig = SimConfig()

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(config_to_dict(self), sort_keys=True).encode()).hexdigest()

    @property
    def eval_epochs(self) -> tuple[int, ...]:
        return tuple(range(self.eval_every, self.train.epochs + 1, self.eval_every))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    return {
        "towns": {"train": list(cfg.train_towns), "test": list(cfg.test_towns), "blocks": cfg.town_blocks,
                  "block_size": list(cfg.block_size), "drop_prob": cfg.drop_prob},
        "datasets": {"seed": cfg.data_seed, "tiers": dict(cfg.tiers), "pool": dict(cfg.pool),
                     "pool_seed": cfg.pool_seed, "offline_val_frames": cfg.offline_val_frames},
        "valsets": {"seed": cfg.val_seed, "sets": [asdict(v) for v in cfg.valsets]},
        "test": {"short": cfg.test_short, "long": cfg.test_long, "min_length": cfg.test_min_length,
                 "route_seed": cfg.test_route_seed},
        "seeds": {"train": list(cfg.train_seeds), "test": list(cfg.test_seeds)},
        "train": d["train"],
        "analysis": {"eval_every": cfg.eval_every, "selection_tier": cfg.selection_tier, "select_on": cfg.select_on},
        "penalties": dict(cfg.penalties),
        "sim": d["sim"],
    }


def _expect(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def _int(v, path: str, lo: int | None = None) -> int:
    _expect(isinstance(v, int) and not isinstance(v, bool), path, "must be an integer")
    if lo is not None:
        _expect(v >= lo, path, f"must be >= {lo}")
    return v


def _ints(v, path: str, lo: int | None = None, nonempty: bool = True) -> tuple[int, ...]:
    _expect(isinstance(v, (list, tuple)), path, "must be a list of integers")
    _expect(not nonempty or len(v) > 0, path, "must not be empty")
    return tuple(_int(x, f"{path}[{i}]", lo) for i, x in enumerate(v))


def _num(v, path: str) -> float:
    _expect(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v), path, "must be a number")
    return float(v)


_SECTIONS = {"towns", "datasets", "valsets", "test", "seeds", "train", "analysis", "penalties", "sim"}


def config_from_dict(d: Mapping[str, Any]) -> ExperimentConfig:
    """Validate a nested mapping; every error names the offending field path."""
    _expect(isinstance(d, Mapping), "<root>", "must be a table")
    for k in d:
        _expect(k in _SECTIONS, k, "unknown section")
    base = ExperimentConfig()
    kw: dict[str, Any] = {}
    t = d.get("towns", {})
    for k in t:
        _expect(k in ("train", "test", "blocks", "block_size", "drop_prob"), f"towns.{k}", "unknown field")
    if "train" in t:
        kw["train_towns"] = _ints(t["train"], "towns.train", 0)
    if "test" in t:
        kw["test_towns"] = _ints(t["test"], "towns.test", 0)
    if "blocks" in t:
        kw["town_blocks"] = _int(t["blocks"], "towns.blocks", 2)
    if "block_size" in t:
        bs = t["block_size"]
        _expect(isinstance(bs, (list, tuple)) and len(bs) == 2, "towns.block_size", "must be [min, max]")
        lo, hi = _num(bs[0], "towns.block_size[0]"), _num(bs[1], "towns.block_size[1]")
        _expect(16 < lo <= hi, "towns.block_size", "need 16 < min <= max")
        kw["block_size"] = (lo, hi)
    if "drop_prob" in t:
        p = _num(t["drop_prob"], "towns.drop_prob")
        _expect(0 <= p < 1, "towns.drop_prob", "must lie in [0, 1)")
        kw["drop_prob"] = p
    tr = kw.get("train_towns", base.train_towns)
    te = kw.get("test_towns", base.test_towns)
    overlap = sorted(set(tr) & set(te))
    _expect(not overlap, "towns.test", f"test towns {overlap} also appear in towns.train")

    ds = d.get("datasets", {})
    for k in ds:
        _expect(k in ("seed", "tiers", "pool", "pool_seed", "offline_val_frames"), f"datasets.{k}", "unknown field")
    if "seed" in ds:
        kw["data_seed"] = _int(ds["seed"], "datasets.seed", 0)
    if "pool_seed" in ds:
        kw["pool_seed"] = _int(ds["pool_seed"], "datasets.pool_seed", 0)
    if "tiers" in ds:
        _expect(isinstance(ds["tiers"], Mapping) and ds["tiers"], "datasets.tiers", "must be a non-empty table")
        tiers = tuple((str(k), _int(v, f"datasets.tiers.{k}", 1)) for k, v in ds["tiers"].items())
        sizes = [v for _, v in tiers]
        _expect(sizes == sorted(sizes), "datasets.tiers", "tiers must be listed in increasing size")
        kw["tiers"] = tiers
    if "pool" in ds:
        _expect(isinstance(ds["pool"], Mapping) and ds["pool"], "datasets.pool", "must be a non-empty table")
        for k, v in ds["pool"].items():
            _expect(k in ("tiny", "short", "long"), f"datasets.pool.{k}", "unknown route type")
            _int(v, f"datasets.pool.{k}", 1)
        kw["pool"] = tuple((str(k), int(v)) for k, v in ds["pool"].items())
    if "offline_val_frames" in ds:
        kw["offline_val_frames"] = _int(ds["offline_val_frames"], "datasets.offline_val_frames", 1)

    vs = d.get("valsets", {})
    for k in vs:
        _expect(k in ("seed", "sets"), f"valsets.{k}", "unknown field")
    if "seed" in vs:
        kw["val_seed"] = _int(vs["seed"], "valsets.seed", 0)
    if "sets" in vs:
        _expect(isinstance(vs["sets"], list) and vs["sets"], "valsets.sets", "must be a non-empty list")
        chosen = []
        for i, s in enumerate(vs["sets"]):
            p = f"valsets.sets[{i}]"
            _expect(isinstance(s, Mapping), p, "must be a table")
            for k in ("name", "type", "count", "seed"):
                _expect(k in s, f"{p}.{k}", "missing")
            _expect(s["type"] in ("tiny", "short", "long"), f"{p}.type", "must be tiny, short or long")
            _expect(isinstance(s["name"], str) and s["name"] not in ("test", "loss"), f"{p}.name", "invalid name")
            chosen.append(ValSet(s["name"], s["type"], _int(s["count"], f"{p}.count", 1),
                                 _int(s["seed"], f"{p}.seed", 0)))
        names = [s.name for s in chosen]
        _expect(len(set(names)) == len(names), "valsets.sets", "names must be unique")
        kw["valsets"] = tuple(chosen)

    ts = d.get("test", {})
    for k in ts:
        _expect(k in ("short", "long", "min_length", "route_seed"), f"test.{k}", "unknown field")
    if "short" in ts:
        kw["test_short"] = _int(ts["short"], "test.short", 0)
    if "long" in ts:
        kw["test_long"] = _int(ts["long"], "test.long", 0)
    if "min_length" in ts:
        kw["test_min_length"] = _num(ts["min_length"], "test.min_length")
    if "route_seed" in ts:
        kw["test_route_seed"] = _int(ts["route_seed"], "test.route_seed", 0)
    _expect(kw.get("test_short", base.test_short) + kw.get("test_long", base.test_long) > 0, "test",
            "needs at least one route")

    sd = d.get("seeds", {})
    for k in sd:
        _expect(k in ("train", "test"), f"seeds.{k}", "unknown field")
    if "train" in sd:
        kw["train_seeds"] = _ints(sd["train"], "seeds.train", 0)
    if "test" in sd:
        kw["test_seeds"] = _ints(sd["test"], "seeds.test", 0)

    if "train" in d:
        tc = d["train"]
        _expect(isinstance(tc, Mapping), "train", "must be a table")
        fields = TrainConfig.__dataclass_fields__
        upd = {}
        for k, v in tc.items():
            _expect(k in fields and k != "seed", f"train.{k}", "unknown field")
            if k in ("batch_size", "epochs"):
                upd[k] = _int(v, f"train.{k}", 1)
            elif k == "reduction":
                _expect(v in ("sum", "mean"), "train.reduction", "must be sum or mean")
                upd[k] = v
            else:
                upd[k] = _num(v, f"train.{k}")
                _expect(upd[k] >= 0, f"train.{k}", "must be non-negative")
        kw["train"] = replace(base.train, **upd)

    an = d.get("analysis", {})
    for k in an:
        _expect(k in ("eval_every", "selection_tier", "select_on"), f"analysis.{k}", "unknown field")
    if "eval_every" in an:
        kw["eval_every"] = _int(an["eval_every"], "analysis.eval_every", 1)
    if "selection_tier" in an:
        kw["selection_tier"] = str(an["selection_tier"])
    if "select_on" in an:
        kw["select_on"] = str(an["select_on"])
    cfg = replace(base, **kw)
    _expect(cfg.selection_tier in dict(cfg.tiers), "analysis.selection_tier", "must name a dataset tier")
    _expect(cfg.select_on == "mean" or cfg.select_on in [v.name for v in cfg.valsets], "analysis.select_on",
            "must be 'mean' or a validation set name")
    _expect(len(cfg.eval_epochs) > 0, "analysis.eval_every", "exceeds the number of training epochs")

    if "penalties" in d:
        _expect(isinstance(d["penalties"], Mapping), "penalties", "must be a table")
        try:
            pen = penalties_from_config(d["penalties"])
        except (KeyError, ValueError) as exc:
            raise ConfigError("penalties", str(exc).strip("'\"")) from None
        cfg = replace(cfg, penalties=tuple(sorted(pen.items())))
    if "sim" in d:
        _expect(isinstance(d["sim"], Mapping), "sim", "must be a table")
        upd = {}
        for k, v in d["sim"].items():
            _expect(k in SimConfig.__dataclass_fields__, f"sim.{k}", "unknown field")
            upd[k] = _int(v, f"sim.{k}", 1) if isinstance(getattr(SimConfig(), k), int) else _num(v, f"sim.{k}")
        cfg = replace(cfg, sim=replace(SimConfig(), **upd))
    return cfg


def load_config_file(path: str | Path) -> dict:
    p = Path(path)
    text = p.read_text()
    if p.suffix.lower() == ".toml":
        try:
            import tomllib  # type: ignore[import-not-found]
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


# evaluation


def make_towns(seeds: Sequence[int], cfg: ExperimentConfig) -> dict[int, RoadNetwork]:
    return {s: build_town(s, cfg.town_blocks, cfg.block_size, drop_prob=cfg.drop_prob) for s in seeds}


def evaluate_driver(driver, nets: Mapping[int, RoadNetwork], routes: Sequence[Route], seeds: Sequence[int],
                    sim: SimConfig = SimConfig(), penalties: Mapping[str, float] | None = None,
                    label: str = "", jobs: int = 1, on_log: Callable | None = None) -> EvaluationReport:
    """One closed-loop run over ``routes`` for every seed."""
    runs = []
    for seed in seeds:
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(jobs) as ex:
                logs = list(ex.map(_episode_job, [(nets[r.town_seed], r, driver, seed, sim) for r in routes]))
        else:
            logs = [run_episode(nets[r.town_seed], r, driver, seed, config=sim) for r in routes]
        if on_log is not None:
            for lg in logs:
                on_log(seed, lg)
        runs.append(RunSummary(int(seed), [score_episode(lg, penalties) for lg in logs]))
    return EvaluationReport(runs, label=label)


def _episode_job(args):
    net, route, driver, seed, sim = args
    return run_episode(net, route, driver, seed, config=sim)


def _split_counts(total: int, parts: int) -> list[int]:
    return [total // parts + (1 if i < total % parts else 0) for i in range(parts)]


def build_route_sets(cfg: ExperimentConfig, nets: Mapping[int, RoadNetwork]) -> dict[str, list[Route]]:
    """Validation sets and the collection pool on training towns, test routes on test towns."""
    out: dict[str, list[Route]] = {}
    taken: set[str] = set()
    for vset in cfg.valsets:
        routes: list[Route] = []
        for k, (town, n) in enumerate(zip(cfg.train_towns, _split_counts(vset.count, len(cfg.train_towns)))):
            if n:
                routes += generate_routes(nets[town], vset.type, n, vset.seed * 1000 + k)
        out[vset.name] = routes
        taken.update(r.id for r in routes)
    pool: list[Route] = []
    for k, town in enumerate(cfg.train_towns):
        for rtype, n in cfg.pool:
            cand = generate_routes(nets[town], rtype, n + 10, cfg.pool_seed * 1000 + k)
            pool += [r for r in cand if r.id not in taken][:n]
    out["pool"] = pool
    test: list[Route] = []
    for k, town in enumerate(cfg.test_towns):
        ns = _split_counts(cfg.test_short, len(cfg.test_towns))[k]
        nl = _split_counts(cfg.test_long, len(cfg.test_towns))[k]
        if ns:
            cand = generate_routes(nets[town], RouteType.SHORT, 4 * ns + 4, cfg.test_route_seed * 1000 + k)
            test += [r for r in cand if r.length >= cfg.test_min_length][:ns]
        if nl:
            test += generate_routes(nets[town], RouteType.LONG, nl, cfg.test_route_seed * 1000 + 500 + k)
    out["test"] = test
    return out


def smoothed_loss(batch_losses: Sequence[float], window: int = 20) -> tuple[float, float]:
    """Mean of the first and the last ``window`` batch losses."""
    v = np.asarray(batch_losses, dtype=float)
    w = max(1, min(window, len(v) // 2 or 1))
    return float(v[:w].mean()), float(v[-w:].mean())


# plots


def _svg_setup():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "drivebench"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def plot_series(series: Sequence[ScoreSeries], path: Path, title: str) -> None:
    plt = _svg_setup()
    fig, ax = plt.subplots(figsize=(6, 4))
    for s in series:
        ax.plot(s.epochs, [100 * v for v in s.values], marker="o", label=s.label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("DS (%)")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_heatmap(cm: CorrelationMatrix, path: Path, title: str) -> None:
    """Pearson above the diagonal, Spearman below."""
    plt = _svg_setup()
    n = len(cm.labels)
    m = np.where(np.triu(np.ones((n, n), bool), 1), cm.pearson, cm.spearman)
    np.fill_diagonal(m, np.diag(cm.pearson))
    fig, ax = plt.subplots(figsize=(1 + 0.7 * n, 0.8 + 0.7 * n))
    ax.imshow(np.nan_to_num(m, nan=0.0), vmin=-1, vmax=1, cmap="RdBu")
    ax.set_xticks(range(n), cm.labels, rotation=45, fontsize=7)
    ax.set_yticks(range(n), cm.labels, fontsize=7)
    for i in range(n):
        for j in range(n):
            ax.text(j, i, "--" if not np.isfinite(m[i, j]) else f"{m[i, j]:.2f}", ha="center", va="center",
                    fontsize=6)
    ax.set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# orchestration


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _agg_json(agg: Mapping[str, tuple[float, float]]) -> dict:
    return {k: {"mean": m, "std": s} for k, (m, s) in agg.items()}


def dataset_digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    for a in (ds.bev, ds.goal, ds.waypoints, ds.maneuver, ds.route, ds.tick):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path, log: Callable[[str], None] | None = None,
                   save_datasets: bool = False) -> dict:
    """Full pipeline; returns the summary that is also written to ``summary.json``."""
    say = log or (lambda m: None)
    clock = time.perf_counter()
    timings: dict[str, Any] = {"train": {}, "test_eval": {}, "selection_eval": {}}

    def lap() -> float:
        nonlocal clock
        now = time.perf_counter()
        dt, clock = now - clock, now
        return dt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    overlap = set(cfg.train_towns) & set(cfg.test_towns)
    if overlap:
        raise ConfigError("towns.test", f"test towns {sorted(overlap)} also appear in towns.train")
    pen = dict(cfg.penalties) or None
    _dump(out / "config.json", config_to_dict(cfg))

    nets = make_towns(list(cfg.train_towns) + list(cfg.test_towns), cfg)
    (out / "towns").mkdir(exist_ok=True)
    for s, net in nets.items():
        net.save(out / "towns" / f"town_{s}.json")
    sets = build_route_sets(cfg, nets)
    for name, routes in sets.items():
        save_routes_to(out / "routes" / f"{name}.json", routes)
    timings["routes"] = lap()
    say(f"routes: pool {len(sets['pool'])}, test {len(sets['test'])}, "
        + ", ".join(f"{v.name} {len(sets[v.name])}" for v in cfg.valsets))

    # datasets: tiers are nested prefixes of one collection run
    tiers = dict(cfg.tiers)
    largest = max(tiers.values())
    full = collect_dataset({t: nets[t] for t in cfg.train_towns}, sets["pool"], largest, cfg.data_seed, cfg.sim)
    val_routes = [r for v in cfg.valsets for r in sets[v.name] if r.route_type is not RouteType.LONG]
    offline = collect_dataset({t: nets[t] for t in cfg.train_towns}, val_routes, cfg.offline_val_frames,
                              cfg.data_seed + 1, cfg.sim)
    datasets: dict[str, Dataset] = {}
    ds_info = {}
    for name, n in tiers.items():
        d = full.subset(np.arange(min(n, len(full))))
        d.manifest = dict(full.manifest, frames_target=n)
        datasets[name] = d
        ds_info[name] = {"frames": len(d), "routes_used": d.routes_used, "digest": dataset_digest(d),
                         "maneuver_distribution": maneuver_distribution(d).round(4).tolist()}
        if save_datasets:
            d.save(out / "datasets" / name)
    ds_info["offline_val"] = {"frames": len(offline), "digest": dataset_digest(offline),
                              "maneuver_distribution": maneuver_distribution(offline).round(4).tolist()}
    _dump(out / "datasets.json", ds_info)
    timings["datasets"] = lap()
    say("datasets: " + ", ".join(f"{k} {v['frames']}" for k, v in ds_info.items()))

    summary: dict[str, Any] = {"config_digest": cfg.digest(), "datasets": ds_info}

    # baselines on the test set
    baselines = {}
    for name, drv in (("expert", ExpertDriver()), ("zero", ZeroDriver())):
        rep = evaluate_driver(drv, nets, sets["test"], cfg.test_seeds, cfg.sim, pen, name)
        baselines[name] = rep
        _dump(out / "eval" / f"{name}.json", rep.to_json())
        (out / "eval" / f"{name}.csv").write_text(rep.to_csv())
        say(rep.table_row(name))
        timings[f"baseline_{name}"] = lap()

    training: dict[str, dict] = {}
    final_reports: dict[str, list[EvaluationReport]] = {}
    selection_runs = []
    epochs = cfg.eval_epochs
    for tier, n in tiers.items():
        final_reports[tier] = []
        for seed in cfg.train_seeds:
            run = f"{tier}_s{seed}"
            ck_dir = out / "runs" / run
            tc = replace(cfg.train, seed=seed)
            lap()
            ck = train(datasets[tier], tc, out_dir=ck_dir,
                       log=lambda m, run=run: say(f"[{run}] {m}"))
            timings["train"][run] = lap()
            first, last = smoothed_loss([b for h in ck.history for b in h["batch_losses"]])
            training[run] = {"epochs": [h["epoch"] for h in ck.history],
                             "train_loss": [h["train_loss"] for h in ck.history],
                             "smoothed_first": first, "smoothed_last": last,
                             "final_checkpoint_digest": _file_digest(checkpoint_path(ck_dir, ck.epoch))}
            if tier == cfg.selection_tier:
                selection_runs.append(_evaluate_run(cfg, run, ck_dir, sets, nets, offline, pen, out, say))
                rep = selection_runs[-1]["test_reports"][epochs[-1]]
                spent = lap()
                timings["test_eval"][run] = selection_runs[-1]["final_test_seconds"]
                timings["selection_eval"][run] = spent - timings["test_eval"][run]
                if epochs[-1] != cfg.train.epochs:
                    rep = _test_report(cfg, Checkpoint.load(checkpoint_path(ck_dir, cfg.train.epochs)), sets, nets,
                                       pen, f"{run}@{cfg.train.epochs}")
                    timings["test_eval"][run] = lap()
                    timings["selection_eval"][run] = spent
            else:
                rep = _test_report(cfg, ck, sets, nets, pen, run)
                timings["test_eval"][run] = lap()
            final_reports[tier].append(rep)
            _dump(out / "eval" / f"{run}_final.json", rep.to_json())
            say(rep.table_row(run))
    _dump(out / "training.json", training)

    # comparison table: expert, trained tiers (final epoch), zero action
    table = {"expert": _agg_json(baselines["expert"].aggregate()), "zero": _agg_json(baselines["zero"].aggregate())}
    lines = [table_header(), table_row("expert", baselines["expert"].aggregate())]
    scaling = {}
    for tier in tiers:
        per_seed_ds = [100 * float(np.mean([r.DS for r in rep.runs])) for rep in final_reports[tier]]
        agg = aggregate_runs(_flatten_runs(final_reports[tier]))
        table[tier] = _agg_json(agg)
        scaling[tier] = {"frames": tiers[tier], "per_train_seed_DS": per_seed_ds,
                         "mean": mean_std(per_seed_ds)[0], "std": mean_std(per_seed_ds)[1]}
        lines.append(table_row(tier, agg))
    lines.append(table_row("zero action", baselines["zero"].aggregate()))
    _dump(out / "table_closed_loop.json", table)
    (out / "table_closed_loop.txt").write_text("\n".join(lines) + "\n")
    _dump(out / "scaling.json", scaling)

    # score series, correlations and checkpoint selection
    series_out, selection, matrices = _analyze_selection(cfg, selection_runs, out)
    summary.update({
        "baselines": {k: _agg_json(v.aggregate()) for k, v in baselines.items()},
        "zero_terminals": sorted({r.terminal for r in baselines["zero"].results}),
        "scaling": scaling,
        "selection": selection,
        "correlation": matrices["pooled"].to_dict(),
        "training": {k: {"smoothed_first": v["smoothed_first"], "smoothed_last": v["smoothed_last"]}
                     for k, v in training.items()},
        "series": series_out,
    })
    _dump(out / "summary.json", summary)
    (out / "report.txt").write_text(render_report(cfg, summary, lines))
    timings["analysis"] = lap()
    # wall-clock timings vary between runs and are kept out of the bundle digest
    _dump(out / TIMINGS_FILE, timings)
    return summary


TIMINGS_FILE = "timings.json"


def bundle_digest(out_dir: str | Path) -> str:
    """Digest over every file of an experiment bundle except the timings."""
    root = Path(out_dir)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != TIMINGS_FILE:
            h.update(p.relative_to(root).as_posix().encode() + b"\0")
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def _flatten_runs(reports: Sequence[EvaluationReport]) -> list[RunSummary]:
    """One run per training seed: all of its test seeds pooled."""
    return [RunSummary(i, rep.results) for i, rep in enumerate(reports)]


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_routes_to(path: Path, routes: Sequence[Route]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    save_routes(path, routes)


def _test_report(cfg, ck, sets, nets, pen, label) -> EvaluationReport:
    return evaluate_driver(PolicyDriver(ck), nets, sets["test"], cfg.test_seeds, cfg.sim, pen, label)


def _evaluate_run(cfg, run, ck_dir, sets, nets, offline, pen, out, say) -> dict:
    res: dict[str, Any] = {"run": run, "val": {v.name: [] for v in cfg.valsets}, "test": [], "loss": [],
                           "test_reports": {}}
    for ep in cfg.eval_epochs:
        ck = Checkpoint.load(checkpoint_path(ck_dir, ep))
        drv = PolicyDriver(ck)
        for v in cfg.valsets:
            rep = evaluate_driver(drv, nets, sets[v.name], [cfg.val_seed], cfg.sim, pen, v.name)
            res["val"][v.name].append(rep.runs[0].DS)
        t0 = time.perf_counter()
        trep = evaluate_driver(drv, nets, sets["test"], cfg.test_seeds, cfg.sim, pen, "test")
        res["final_test_seconds"] = time.perf_counter() - t0
        res["test_reports"][ep] = trep
        res["test"].append(float(np.mean([r.DS for r in trep.runs])))
        res["loss"].append(offline_val_loss(ck, offline, cfg.train.reduction, input_scale=cfg.train.input_scale))
        say(f"[{run}] epoch {ep}: test DS {100 * res['test'][-1]:.1f}, loss {res['loss'][-1]:.3f}, "
            + ", ".join(f"{k} {100 * v[-1]:.1f}" for k, v in res["val"].items()))
    return res


def _analyze_selection(cfg: ExperimentConfig, runs: list[dict], out: Path):
    epochs = cfg.eval_epochs
    series_out = {}
    selection = {"runs": [], "select_on": cfg.select_on}
    pooled: dict[str, list[float]] = {}
    matrices = {}
    (out / "analysis").mkdir(parents=True, exist_ok=True)
    for res in runs:
        val_series = [ScoreSeries(k, epochs, tuple(v)) for k, v in res["val"].items()]
        test_series = ScoreSeries("test", epochs, tuple(res["test"]))
        loss_series = ScoreSeries("loss", epochs, tuple(res["loss"]))
        mean_val = ScoreSeries("mean", epochs, tuple(np.mean([s.values for s in val_series], axis=0).tolist()))
        chooser = mean_val if cfg.select_on == "mean" else next(s for s in val_series if s.label == cfg.select_on)
        best = select_checkpoint(chooser)
        min_loss = select_checkpoint(loss_series, minimize=True)
        final = epochs[-1]
        row = {
            "run": res["run"],
            "best_val_epoch": best,
            "min_loss_epoch": min_loss,
            "final_epoch": final,
            "test_DS_best_val": test_series.at(best),
            "test_DS_min_loss": test_series.at(min_loss),
            "test_DS_final": test_series.at(final),
            "per_valset": {s.label: {"epoch": select_checkpoint(s), "test_DS": test_series.at(select_checkpoint(s))}
                           for s in val_series},
        }
        selection["runs"].append(row)
        series_out[res["run"]] = {s.label: list(s.values) for s in val_series + [test_series, loss_series]}
        series_out[res["run"]]["epochs"] = list(epochs)
        for s in val_series + [test_series, loss_series]:
            pooled.setdefault(s.label, []).extend(s.values)
        if len(epochs) >= 2:
            cm = correlation_matrix(val_series + [test_series, loss_series])
            matrices[res["run"]] = cm
            _dump(out / "analysis" / f"correlation_{res['run']}.json", cm.to_dict())
            plot_heatmap(cm, out / "analysis" / f"correlation_{res['run']}.svg", f"correlation {res['run']}")
        plot_series(val_series + [test_series], out / "analysis" / f"series_{res['run']}.svg", res["run"])
    if runs and len(next(iter(pooled.values()))) >= 2:
        cm = correlation_matrix(pooled)
    else:
        labels = [v.name for v in cfg.valsets] + ["test", "loss"]
        cm = CorrelationMatrix(labels, np.full((len(labels),) * 2, np.nan), np.full((len(labels),) * 2, np.nan),
                               labels)
    matrices["pooled"] = cm
    _dump(out / "analysis" / "correlation_pooled.json", cm.to_dict())
    plot_heatmap(cm, out / "analysis" / "correlation_pooled.svg", "correlation (pooled over runs)")
    if "loss" in cm.labels and "test" in cm.labels and cm.labels:
        selection["loss_vs_test"] = {"pearson": _finite(cm.get("loss", "test")),
                                     "spearman": _finite(cm.get("loss", "test", "spearman"))}
    rows = selection["runs"]
    if rows:
        selection["summary"] = {
            "best_val": mean_std([100 * r["test_DS_best_val"] for r in rows]),
            "final": mean_std([100 * r["test_DS_final"] for r in rows]),
            "min_loss": mean_std([100 * r["test_DS_min_loss"] for r in rows]),
            "best_ge_final": sum(r["test_DS_best_val"] >= r["test_DS_final"] for r in rows),
            "best_ge_min_loss": sum(r["test_DS_best_val"] >= r["test_DS_min_loss"] for r in rows),
        }
    _dump(out / "analysis" / "selection.json", selection)
    _dump(out / "analysis" / "series.json", series_out)
    return series_out, selection, matrices


def _finite(v: float):
    return float(v) if np.isfinite(v) else None


def render_report(cfg: ExperimentConfig, summary: Mapping, table_lines: Sequence[str]) -> str:
    out = ["Closed-loop comparison on the held-out test town "
           f"(mean ± std over {len(cfg.train_seeds)} training seeds x {len(cfg.test_seeds)} test seeds)", ""]
    out += list(table_lines)
    out += ["", "Data scaling (test DS %, final epoch):"]
    for tier, v in summary["scaling"].items():
        out.append(f"  {tier:<8} {v['frames']:>6} frames  {v['mean']:.1f} ± {v['std']:.1f}")
    sel = summary["selection"]
    if sel.get("summary"):
        s = sel["summary"]
        out += ["", f"Checkpoint selection (select on {sel['select_on']}; test DS %):",
                f"  best validation  {s['best_val'][0]:.1f} ± {s['best_val'][1]:.1f}",
                f"  final epoch      {s['final'][0]:.1f} ± {s['final'][1]:.1f}",
                f"  min offline loss {s['min_loss'][0]:.1f} ± {s['min_loss'][1]:.1f}"]
        for r in sel["runs"]:
            out.append(f"  {r['run']}: best-val epoch {r['best_val_epoch']}, min-loss epoch {r['min_loss_epoch']}")
    lt = sel.get("loss_vs_test")
    if lt:
        out += ["", f"Offline loss vs test DS: pearson {lt['pearson']}, spearman {lt['spearman']}"]
    return "\n".join(out) + "\n"
