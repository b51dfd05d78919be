"""Kernel backend selection.

The Cython extension is used when it was built; otherwise, or when
``LSR_PURE_PYTHON=1`` is set, the NumPy fallback is used.  Both produce
identical results.
"""

import os

from loopsr import _kernels_py

if os.environ.get("LSR_PURE_PYTHON") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from loopsr import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

rough_eta = _impl.rough_eta
slope_batch = _impl.slope_batch
physics_step = _impl.physics_step
topk_rows = _impl.topk_rows

DT = _kernels_py.DT
F_MAX = _kernels_py.F_MAX
GRAVITY = _kernels_py.GRAVITY
STAIR_SPACING = _kernels_py.STAIR_SPACING
ROUGH_CELL = _kernels_py.ROUGH_CELL
