"""Numba/numpy kernel path selection.

The hot kernels in :mod:`songdisc.kernels` exist in two versions: a numba
``@njit`` implementation and a pure-numpy one. By default the numba path is
used whenever numba imports cleanly; set ``SONGDISC_NUMBA=0`` in the
environment to force the numpy path (useful for debugging and for the
benchmark in ``benchmarks/bench_kernels.py``).
"""

import os

_FALSY = {"0", "false", "no", "off"}


def _env_wants_numba() -> bool:
    return os.environ.get("SONGDISC_NUMBA", "1").strip().lower() not in _FALSY


try:
    import numba  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and _env_wants_numba()


def kernel_path() -> str:
    """Name of the active kernel path, for logs and benchmark output."""
    return "numba" if USE_NUMBA else "numpy"
