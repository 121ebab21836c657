"""Kernel backend selection.

The compiled extension is used when it imports; setting ``POINTPST_PURE_PYTHON=1``
forces the numpy fallback. ``BACKEND`` names the active one.
"""

import os

from . import _kernels_py

if os.environ.get("POINTPST_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

segment_max = _impl.segment_max
knn_mean_distance = _impl.knn_mean_distance

__all__ = ["BACKEND", "segment_max", "knn_mean_distance"]
