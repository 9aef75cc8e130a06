"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel with the median wall time of each backend,
the speedup, and the largest absolute difference between their outputs.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from drivebench._kernels import _fallback

try:
    from drivebench._kernels import _core
except ImportError:  # extension not built
    _core = None


def _cases(rng: np.random.Generator) -> dict[str, tuple]:
    n_rays = 720
    ang = np.linspace(-np.pi, np.pi, n_rays, endpoint=False)
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    boxes = np.column_stack([rng.uniform(-40, 40, (30, 2)), rng.uniform(0.3, 2.5, (30, 2)),
                             rng.uniform(-np.pi, np.pi, 30)])
    rects = np.column_stack([rng.uniform(-60, 0, (40, 2)), rng.uniform(5, 40, (40, 2))])
    rects[:, 2:] += rects[:, :2]
    pts = np.column_stack([rng.uniform(-5, 40, 20000), rng.uniform(-20, 20, 20000), rng.uniform(-2, 3, 20000)])
    line = np.cumsum(rng.normal(size=(400, 2)), axis=0)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(line, axis=0).T))])
    x = rng.normal(size=(64, 32, 32, 8)).astype(np.float32)
    dcols = rng.normal(size=(64 * 16 * 16, 72)).astype(np.float32)
    return {
        "ray_boxes": (0.0, 0.0, dirs, boxes, 50.0),
        "ray_region_boundary": (-20.0, -20.0, dirs, rects, 50.0),
        "bev_histogram": (pts, 32.0, 16.0, 64, 0.2),
        "project_polyline": (3.0, 4.0, line, cum, 0, len(line) - 1),
        "obb_overlap": (boxes[0], boxes[1:]),
        "im2col_s2": (x,),
        "col2im_s2": (dcols, 64, 32, 32, 8),
    }


def _flatten(out) -> np.ndarray:
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(np.asarray(o, dtype=np.float64)) for o in out])
    return np.ravel(np.asarray(out, dtype=np.float64))


def _median_time(fn, args, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    cases = _cases(np.random.default_rng(args.seed))
    print(f"{'kernel':<20} {'fallback ms':>12} {'compiled ms':>12} {'speedup':>8} {'max |diff|':>11}")
    for name, call_args in cases.items():
        t_py = _median_time(getattr(_fallback, name), call_args, args.repeat)
        if _core is None:
            print(f"{name:<20} {1e3 * t_py:12.3f} {'n/a':>12} {'-':>8} {'-':>11}")
            continue
        t_c = _median_time(getattr(_core, name), call_args, args.repeat)
        diff = np.max(np.abs(_flatten(getattr(_fallback, name)(*call_args))
                             - _flatten(getattr(_core, name)(*call_args))), initial=0.0)
        print(f"{name:<20} {1e3 * t_py:12.3f} {1e3 * t_c:12.3f} {t_py / t_c:8.1f} {diff:11.2e}")


if __name__ == "__main__":
    main()
