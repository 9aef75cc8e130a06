"""Command-line entry point: drivebench <command> [options]."""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import shutil
import sys
import traceback
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    """Bad flags, config or missing inputs (exit code 2)."""


# run directories and manifests


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def output_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("DRIVEBENCH_OUT", "runs"))


def run_dir(args, default_name: str) -> Path:
    """A fresh run directory; an existing non-empty one needs --force."""
    d = output_root(args) / (args.name or default_name)
    if d.exists() and any(d.iterdir()):
        if not args.force:
            raise UsageError(f"{d} already exists; pass --force to replace it")
        shutil.rmtree(d)
    d.mkdir(parents=True, exist_ok=True)
    return d


def resolve_input(args, value: str, what: str) -> Path:
    p = Path(value)
    if p.exists():
        return p
    q = output_root(args) / value
    if q.exists():
        return q
    raise UsageError(f"{what} not found: {value}")


def write_manifest(out: Path, command: str, config: dict, seeds: dict, inputs: Sequence[Path],
                   started: str) -> dict:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "run.json")
    inputs_d = {}
    for p in inputs:
        p = Path(p)
        if p.is_dir():
            for f in sorted(x for x in p.rglob("*") if x.is_file()):
                inputs_d[str(f)] = file_digest(f)
        elif p.exists():
            inputs_d[str(p)] = file_digest(p)
    man = {
        "tool": "drivebench",
        "version": __version__,
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "seeds": seeds,
        "inputs": inputs_d,
        "outputs": {str(p.relative_to(out)): file_digest(p) for p in files},
        "timestamps": {"started": started, "finished": _now()},
    }
    (out / "run.json").write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")
    return man


def manifest_digest(man: dict) -> str:
    """Digest over everything except timestamps and input locations."""
    core = {k: v for k, v in man.items() if k not in ("timestamps", "inputs")}
    core["inputs"] = sorted(man.get("inputs", {}).values())
    return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def load_config(args) -> dict:
    from .analysis import ConfigError, config_from_dict, load_config_file

    if not args.config:
        return {}
    path = Path(args.config)
    if not path.exists():
        raise UsageError(f"config not found: {path}")
    try:
        raw = load_config_file(path)
        config_from_dict(raw)
    except ConfigError as exc:
        raise UsageError(f"config error at {exc}") from None
    except ValueError as exc:
        raise UsageError(f"config error: {exc}") from None
    return raw


def _sim_config(raw: dict):
    from .analysis import config_from_dict

    return config_from_dict({k: raw[k] for k in ("sim",) if k in raw}).sim


def _penalties(raw: dict):
    from .metrics import penalties_from_config

    return penalties_from_config(raw.get("penalties"))


def _load_towns(args, paths: Sequence[str]):
    from .roadnet import RoadNetwork

    nets = {}
    for v in paths:
        p = resolve_input(args, v, "town")
        if p.is_dir():
            p = p / "town.json"
        net = RoadNetwork.load(p)
        nets[net.town_seed] = net
    return nets


def _load_route_files(args, paths: Sequence[str], nets):
    from .routegen import load_routes

    routes = []
    for v in paths:
        p = resolve_input(args, v, "routes")
        if p.is_dir():
            p = p / "routes.json"
        try:
            routes += load_routes(p, nets)
        except KeyError as exc:
            raise UsageError(f"{p}: route refers to town {exc} which was not given via --towns") from None
    return routes


# commands


def cmd_gen_town(args) -> int:
    from .roadnet import build_town

    raw = load_config(args)
    t = raw.get("towns", {})
    blocks = args.blocks if args.blocks is not None else t.get("blocks", 5)
    bs = tuple(args.block_size) if args.block_size else tuple(t.get("block_size", (50.0, 70.0)))
    drop = args.drop_prob if args.drop_prob is not None else t.get("drop_prob", 0.2)
    if blocks < 2:
        raise UsageError("--blocks must be at least 2")
    if not 16 < bs[0] <= bs[1]:
        raise UsageError("--block-size needs 16 < min <= max")
    started = _now()
    out = run_dir(args, f"town-{args.seed}")
    net = build_town(args.seed, blocks, bs, drop_prob=drop)
    net.save(out / "town.json")
    print(f"town {args.seed}: {len(net.lanes)} lanes, {len(net.intersections)} intersections -> {out / 'town.json'}")
    write_manifest(out, "gen-town", {"blocks": blocks, "block_size": list(bs), "drop_prob": drop},
                   {"seed": args.seed}, [], started)
    return EXIT_OK


def cmd_gen_routes(args) -> int:
    from .routegen import (format_distribution, generate_routes, maneuver_distribution,
                           save_routes)

    if args.count <= 0:
        raise UsageError("--count must be positive")
    nets = _load_towns(args, [args.town])
    net = next(iter(nets.values()))
    started = _now()
    out = run_dir(args, f"routes-{args.type}-{args.seed}")
    routes = generate_routes(net, args.type, args.count, args.seed)
    save_routes(out / "routes.json", routes)
    print(f"{'set':<12} {'count':>5} {'type':<6} " + " ".join(f"{a:>5}" for a in ("follow", "strt", "left", "right")))
    print(format_distribution(out.name, maneuver_distribution(routes), len(routes), args.type))
    write_manifest(out, "gen-routes", {"type": args.type, "count": args.count}, {"seed": args.seed},
                   [resolve_input(args, args.town, "town")], started)
    return EXIT_OK


def cmd_collect(args) -> int:
    from .expert import InsufficientRoutes, collect_dataset
    from .routegen import MANEUVER_NAMES, format_distribution

    raw = load_config(args)
    if args.frames <= 0:
        raise UsageError("--frames must be positive")
    nets = _load_towns(args, args.towns)
    routes = _load_route_files(args, args.routes, nets)
    if not routes:
        raise UsageError("no routes given")
    started = _now()
    out = run_dir(args, f"dataset-{args.seed}")
    try:
        ds = collect_dataset(nets, routes, args.frames, args.seed, _sim_config(raw), no_reuse=args.no_reuse,
                             log=print if args.verbose else None)
    except InsufficientRoutes as exc:
        raise UsageError(str(exc)) from None
    ds.save(out)
    print(f"{len(ds)} frames from {ds.routes_used} routes -> {out}")
    print(format_distribution("frames", ds.manifest["maneuver_distribution"], len(ds)))
    print("  (" + ", ".join(MANEUVER_NAMES) + ")")
    write_manifest(out, "collect", {"frames": args.frames, "no_reuse": args.no_reuse, "sim": raw.get("sim", {})},
                   {"seed": args.seed}, [resolve_input(args, t, "town") for t in args.towns]
                   + [resolve_input(args, r, "routes") for r in args.routes], started)
    return EXIT_OK


def cmd_train(args) -> int:
    from dataclasses import asdict, replace

    from .analysis import config_from_dict
    from .expert import Dataset
    from .policy import TrainConfig, train

    raw = load_config(args)
    tc = config_from_dict({"train": raw["train"]}).train if "train" in raw else TrainConfig()
    upd = {"seed": args.seed}
    if args.epochs is not None:
        upd["epochs"] = args.epochs
    if args.lr is not None:
        upd["lr"] = args.lr
    if args.batch_size is not None:
        upd["batch_size"] = args.batch_size
    tc = replace(tc, **upd)
    if tc.epochs < 1 or tc.batch_size < 1:
        raise UsageError("--epochs and --batch-size must be positive")
    dpath = resolve_input(args, args.dataset, "dataset")
    if not (dpath / "manifest.json").exists():
        raise UsageError(f"{dpath} is not a dataset directory")
    resume = resolve_input(args, args.resume, "checkpoint") if args.resume else None
    ds = Dataset.load(dpath)
    started = _now()
    out = run_dir(args, f"train-{dpath.name}-s{args.seed}")
    ck = train(ds, tc, out_dir=out, resume=resume, log=print)
    (out / "history.json").write_text(json.dumps(ck.history, indent=1) + "\n")
    write_manifest(out, "train", asdict(tc), {"seed": args.seed}, [dpath] + ([resume] if resume else []), started)
    print(f"final train loss {ck.train_loss:.4f} after {ck.epoch} epochs -> {out}")
    return EXIT_OK


def _driver_for(args, ck_path: Path | None):
    from .expert import ExpertDriver, ZeroDriver
    from .policy import Checkpoint, CheckpointError, PolicyDriver

    if ck_path is None:
        return {"expert": ExpertDriver(), "zero": ZeroDriver()}[args.driver]
    try:
        return PolicyDriver(Checkpoint.load(ck_path))
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


def _resolve_checkpoint(args, value: str) -> Path:
    if value.startswith("e") and value[1:].isdigit() and args.train_run:
        from .policy import checkpoint_path

        p = checkpoint_path(resolve_input(args, args.train_run, "training run"), int(value[1:]))
        if not p.exists():
            raise UsageError(f"checkpoint not found: {p}")
        return p
    return resolve_input(args, value, "checkpoint")


def cmd_evaluate(args) -> int:
    from .analysis import evaluate_driver
    from .metrics import table_header
    from .policy import checkpoint_path

    raw = load_config(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    if args.jobs < 1:
        raise UsageError("--jobs must be positive")
    nets = _load_towns(args, args.towns)
    routes = _load_route_files(args, args.routes, nets)
    if not routes:
        raise UsageError("no routes given")
    seeds = [args.seed + k for k in range(args.seeds)]
    sim, pen = _sim_config(raw), _penalties(raw)

    targets: list[tuple[str, Path | None]] = []
    if args.checkpoints:
        cdir = resolve_input(args, args.checkpoints, "checkpoint directory")
        ep = args.every
        while checkpoint_path(cdir, ep).exists():
            targets.append((f"e{ep}", checkpoint_path(cdir, ep)))
            ep += args.every
        if not targets:
            raise UsageError(f"no checkpoints at multiples of {args.every} in {cdir}")
    elif args.checkpoint:
        p = _resolve_checkpoint(args, args.checkpoint)
        targets.append((p.stem, p))
    else:
        targets.append((args.driver, None))
    for _, p in targets:
        _driver_for(args, p)  # validate before creating the run directory

    started = _now()
    out = run_dir(args, f"eval-{targets[-1][0]}-s{args.seed}")
    logs_dir = out / "logs"
    logs_dir.mkdir()
    series = {"epochs": [], "series": {args.label: []}}
    print(table_header())
    status = EXIT_OK
    for name, p in targets:
        drv = _driver_for(args, p)

        def keep(seed, lg, name=name):
            (logs_dir / f"{name}_s{seed}_{lg.route_id}.ndjson").write_text(lg.to_ndjson())

        try:
            rep = evaluate_driver(drv, nets, routes, seeds, sim, pen, name, jobs=args.jobs, on_log=keep)
        except Exception:
            traceback.print_exc()
            status = EXIT_RUNTIME
            break
        (out / f"{name}.csv").write_text(rep.to_csv())
        (out / f"{name}.json").write_text(json.dumps(rep.to_json(), indent=1, sort_keys=True) + "\n")
        print(rep.table_row(name))
        if name.startswith("e") and name[1:].isdigit():
            series["epochs"].append(int(name[1:]))
        elif p is not None and p.stem.startswith("epoch_"):
            series["epochs"].append(int(p.stem.split("_")[1]))
        series["series"][args.label].append(float(np.mean([r.DS for r in rep.runs])))
    if args.checkpoints and status == EXIT_OK:
        (out / "series.json").write_text(json.dumps(series, indent=1, sort_keys=True) + "\n")
    write_manifest(out, "evaluate", {"seeds": args.seeds, "label": args.label, "sim": raw.get("sim", {}),
                                     "penalties": pen},
                   {"seed": args.seed, "episode_seeds": seeds},
                   [p for _, p in targets if p is not None]
                   + [resolve_input(args, r, "routes") for r in args.routes], started)
    return status


def _read_series(path: Path) -> list[dict]:
    """Series files from evaluate (one run) or an experiment bundle (several runs)."""
    try:
        if (path / "series.json").exists():
            d = json.loads((path / "series.json").read_text())
            return [{"run": path.name, "epochs": d["epochs"], "series": d["series"]}]
        if (path / "analysis" / "series.json").exists():
            d = json.loads((path / "analysis" / "series.json").read_text())
            return [{"run": k, "epochs": v["epochs"], "series": {s: x for s, x in v.items() if s != "epochs"}}
                    for k, v in sorted(d.items())]
    except (KeyError, TypeError, AttributeError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: malformed series.json ({exc})") from None
    raise UsageError(f"{path}: no series.json")


def cmd_analyze(args) -> int:
    from .analysis import ScoreSeries, correlation_matrix, plot_heatmap, select_checkpoint

    groups = [_read_series(resolve_input(args, r, "run")) for r in args.runs]
    started = _now()
    # evaluate outputs are merged label-wise; experiment bundles contribute one run each
    runs: list[dict] = []
    singles = [g[0] for g in groups if len(g) == 1]
    if singles:
        epochs = singles[0]["epochs"]
        merged: dict[str, list[float]] = {}
        for s in singles:
            if s["epochs"] != epochs:
                raise UsageError(f"run {s['run']} has epochs {s['epochs']}, expected {epochs}: series not alignable")
            for k, v in s["series"].items():
                if k in merged:
                    raise UsageError(f"label {k!r} appears in more than one run")
                merged[k] = v
        runs.append({"run": "+".join(s["run"] for s in singles), "epochs": epochs, "series": merged})
    for g in groups:
        if len(g) > 1:
            runs.extend(g)
    epochs = runs[0]["epochs"]
    for r in runs:
        if r["epochs"] != epochs:
            raise UsageError("runs have different checkpoint epochs: series not alignable")
    labels = list(runs[0]["series"])
    pooled = {k: [x for r in runs for x in r["series"].get(k, [])] for k in labels}
    if any(len(v) != len(epochs) * len(runs) for v in pooled.values()):
        raise UsageError("runs carry different series labels")
    if len(pooled) < 2:
        raise UsageError("need at least two series to correlate")
    out = run_dir(args, "analysis")
    cm = correlation_matrix(pooled)
    (out / "correlation.json").write_text(json.dumps(cm.to_dict(), indent=1, sort_keys=True) + "\n")
    plot_heatmap(cm, out / "correlation.svg", "Pearson (upper) / Spearman (lower)")
    sel_label = args.select_on or next((k for k in labels if k not in (args.test_label, "loss")), labels[0])
    if sel_label not in labels:
        raise UsageError(f"--select-on {sel_label!r} is not a series label")
    rows = []
    for r in runs:
        s = ScoreSeries(sel_label, tuple(r["epochs"]), tuple(r["series"][sel_label]))
        best = select_checkpoint(s)
        row = {"run": r["run"], "select_on": sel_label, "epoch": best}
        if args.test_label in r["series"]:
            t = ScoreSeries("test", tuple(r["epochs"]), tuple(r["series"][args.test_label]))
            row.update({"test_DS_selected": t.at(best), "test_DS_final": t.values[-1]})
            if "loss" in r["series"]:
                ml = select_checkpoint(ScoreSeries("loss", tuple(r["epochs"]), tuple(r["series"]["loss"])),
                                       minimize=True)
                row.update({"min_loss_epoch": ml, "test_DS_min_loss": t.at(ml)})
        rows.append(row)
    (out / "selection.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    lines = [f"{'run':<24} {'epoch':>5} {'test@sel':>9} {'test@final':>10} {'test@minloss':>12}"]
    for row in rows:
        def f(k):
            return f"{100 * row[k]:.1f}" if k in row else "-"
        lines.append(f"{row['run']:<24} {row['epoch']:>5} {f('test_DS_selected'):>9} {f('test_DS_final'):>10} "
                     f"{f('test_DS_min_loss'):>12}")
    (out / "selection.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"correlation over {len(labels)} series x {len(epochs) * len(runs)} points; excluded: {cm.excluded}")
    write_manifest(out, "analyze", {"select_on": sel_label, "test_label": args.test_label}, {},
                   [resolve_input(args, r, "run") for r in args.runs], started)
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .analysis import config_from_dict, config_to_dict, run_experiment

    raw = load_config(args)
    cfg = config_from_dict(raw)
    started = _now()
    out = run_dir(args, "experiment")
    run_experiment(cfg, out, log=print, save_datasets=args.save_datasets)
    print((out / "report.txt").read_text())
    write_manifest(out, "experiment", config_to_dict(cfg), {"train": list(cfg.train_seeds),
                   "test": list(cfg.test_seeds), "data": cfg.data_seed},
                   [Path(args.config)] if args.config else [], started)
    return EXIT_OK


def cmd_report(args) -> int:
    from .metrics import report_from_dict, table_header, table_row

    src = resolve_input(args, args.run, "run")
    if (src / "report.txt").exists():
        text = (src / "report.txt").read_text()
    else:
        reports = sorted(p for p in src.glob("*.json") if p.name not in ("run.json", "manifest.json"))
        rows = []
        for p in reports:
            d = json.loads(p.read_text())
            if "aggregate" in d:
                rows.append(table_row(d.get("label") or p.stem, report_from_dict(d)))
        if not rows:
            raise UsageError(f"{src}: nothing to report")
        text = "\n".join([table_header()] + rows) + "\n"
    print(text, end="")
    if args.write:
        (src / "report.txt").write_text(text)
    return EXIT_OK


# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON config file")
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--out", help="output root (default $DRIVEBENCH_OUT or ./runs)")
    common.add_argument("--name", help="run directory name under the output root")
    common.add_argument("--force", action="store_true", help="replace an existing run directory")

    p = argparse.ArgumentParser(prog="drivebench", description=__doc__, parents=[common])
    p.add_argument("--version", action="version", version=f"drivebench {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-town", parents=[common], help="build a seeded grid town")
    s.add_argument("--blocks", type=int)
    s.add_argument("--block-size", type=float, nargs=2, metavar=("MIN", "MAX"))
    s.add_argument("--drop-prob", type=float)
    s.set_defaults(func=cmd_gen_town)

    s = sub.add_parser("gen-routes", parents=[common], help="sample a deduplicated route set")
    s.add_argument("--town", required=True)
    s.add_argument("--type", choices=("tiny", "short", "long"), required=True)
    s.add_argument("--count", type=int, required=True)
    s.set_defaults(func=cmd_gen_routes)

    s = sub.add_parser("collect", parents=[common], help="record an expert dataset")
    s.add_argument("--towns", nargs="+", required=True)
    s.add_argument("--routes", nargs="+", required=True)
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--no-reuse", action="store_true", help="fail instead of revisiting routes")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_collect)

    s = sub.add_parser("train", parents=[common], help="train the waypoint policy")
    s.add_argument("--dataset", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="closed-loop evaluation")
    s.add_argument("--towns", nargs="+", required=True)
    s.add_argument("--routes", nargs="+", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--checkpoint", help="checkpoint file, or eNN together with --train-run")
    g.add_argument("--checkpoints", help="training run directory; evaluates every --every-th epoch")
    g.add_argument("--driver", choices=("expert", "zero"), default="expert")
    s.add_argument("--train-run")
    s.add_argument("--every", type=int, default=5)
    s.add_argument("--label", default="val", help="series label written by --checkpoints")
    s.add_argument("--seeds", type=int, default=1, help="number of consecutive episode seeds from --seed")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("analyze", parents=[common], help="correlations and checkpoint selection")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--select-on")
    s.add_argument("--test-label", default="test")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("experiment", parents=[common], help="run the full configured experiment")
    s.add_argument("--save-datasets", action="store_true")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("report", parents=[common], help="print the tables of a finished run")
    s.add_argument("--run", required=True)
    s.add_argument("--write", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"drivebench: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failure
        traceback.print_exc()
        print(f"drivebench: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
