"""Kernel backend selection.

The compiled extension is used when it imports; set ``CTSURV_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

from . import _kernels_py

if os.environ.get("CTSURV_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

DEFAULT = _impl
accumulate_pieces = _impl.accumulate_pieces
point_hazards = _impl.point_hazards
backprop_pieces = _impl.backprop_pieces
backprop_points = _impl.backprop_points


def get_backend(name: str):
    """Return the kernel module called ``name`` ("cython" or "python")."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
