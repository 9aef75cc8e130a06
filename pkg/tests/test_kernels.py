from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from drivebench import _kernels
from drivebench._kernels import _fallback

core = pytest.importorskip("drivebench._kernels._core")

seeds = st.integers(0, 2**32 - 1)


def _same(a, b, atol=1e-9):
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            np.testing.assert_allclose(np.asarray(x, float), np.asarray(y, float), atol=atol, rtol=0)
    else:
        np.testing.assert_allclose(np.asarray(a, float), np.asarray(b, float), atol=atol, rtol=0)


def _dirs(n):
    ang = np.linspace(-np.pi, np.pi, n, endpoint=False)
    return np.column_stack([np.cos(ang), np.sin(ang)])


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(0, 12))
def test_ray_boxes_parity(seed, m):
    rng = np.random.default_rng(seed)
    boxes = np.column_stack([rng.uniform(-30, 30, (m, 2)), rng.uniform(0.2, 3, (m, 2)), rng.uniform(-4, 4, m)])
    args = (float(rng.uniform(-5, 5)), float(rng.uniform(-5, 5)), _dirs(90), boxes, 32.0)
    d1, i1 = _fallback.ray_boxes(*args)
    d2, i2 = core.ray_boxes(*args)
    _same(d1, d2)
    assert np.array_equal(i1, i2)


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(0, 10))
def test_ray_region_boundary_parity(seed, m):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-40, 20, (m, 2))
    rects = np.column_stack([lo, lo + rng.uniform(2, 30, (m, 2))])
    args = (float(rng.uniform(-10, 10)), float(rng.uniform(-10, 10)), _dirs(72), rects, 32.0)
    _same(_fallback.ray_region_boundary(*args), core.ray_region_boundary(*args))


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(0, 300))
def test_bev_histogram_parity_and_oracle(seed, n):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(-5, 40, n), rng.uniform(-20, 20, n), rng.uniform(0, 2, n)])
    a = _fallback.bev_histogram(pts, 32.0, 16.0, 64, 0.2)
    b = core.bev_histogram(pts, 32.0, 16.0, 64, 0.2)
    assert np.array_equal(a, b)
    assert int(a.sum()) == sum(oracles.bev_counts(pts.tolist()).values())


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_project_polyline_parity(seed):
    rng = np.random.default_rng(seed)
    line = np.cumsum(rng.normal(size=(30, 2)) * 3, axis=0)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(line, axis=0).T))])
    px, py = (float(v) for v in rng.uniform(-20, 20, 2))
    a = _fallback.project_polyline(px, py, line, cum, 0, len(line) - 1)
    b = core.project_polyline(px, py, line, cum, 0, len(line) - 1)
    _same(a, b)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_obb_overlap_parity(seed):
    rng = np.random.default_rng(seed)
    boxes = np.column_stack([rng.uniform(-6, 6, (8, 2)), rng.uniform(0.3, 3, (8, 2)), rng.uniform(-4, 4, 8)])
    assert np.array_equal(np.asarray(_fallback.obb_overlap(boxes[0], boxes[1:])),
                          np.asarray(core.obb_overlap(boxes[0], boxes[1:])))


@settings(max_examples=30, deadline=None)
@given(seeds, st.sampled_from([(1, 8, 8, 2), (2, 16, 16, 3), (3, 4, 4, 1)]))
def test_im2col_col2im_parity(seed, shape):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape).astype(np.float32)
    _same(_fallback.im2col_s2(x), core.im2col_s2(x), atol=0)
    B, H, W, C = shape
    cols = _fallback.im2col_s2(x)
    cols = cols[0] if isinstance(cols, tuple) else cols
    d = rng.normal(size=cols.shape).astype(np.float32)
    _same(_fallback.col2im_s2(d, B, H, W, C), core.col2im_s2(d, B, H, W, C), atol=1e-5)


def test_backend_selected_at_import():
    assert _kernels.BACKEND == "cython"
    code = "from drivebench import _kernels; print(_kernels.BACKEND)"
    env = dict(os.environ, DRIVEBENCH_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
