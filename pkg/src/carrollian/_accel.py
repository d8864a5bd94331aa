"""Kernel backend selection.

Set ``CARROLLIAN_NUMBA=0`` in the environment before import to run every
kernel as plain Python/numpy. The flag is read once, at import time.
"""

import os

_flag = os.environ.get("CARROLLIAN_NUMBA", "1").strip().lower()
USE_NUMBA = _flag not in ("0", "false", "no", "off")

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None
    USE_NUMBA = False


def jit(fn):
    """``numba.njit`` when enabled, identity otherwise."""
    if USE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
