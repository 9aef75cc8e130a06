"""Geometry and convolution kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports cleanly. Set
``DRIVEBENCH_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _fallback

BACKEND = "python"

if os.environ.get("DRIVEBENCH_PURE_PYTHON") != "1":
    try:
        from . import _core as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
else:
    _impl = _fallback

ray_boxes = _impl.ray_boxes
ray_region_boundary = _impl.ray_region_boundary
bev_histogram = _impl.bev_histogram
project_polyline = _impl.project_polyline
obb_overlap = _impl.obb_overlap
im2col_s2 = _impl.im2col_s2
col2im_s2 = _impl.col2im_s2

__all__ = [
    "BACKEND",
    "ray_boxes",
    "ray_region_boundary",
    "bev_histogram",
    "project_polyline",
    "obb_overlap",
    "im2col_s2",
    "col2im_s2",
]
