"""Numba switch.

Set ``ATYTTS_DISABLE_NUMBA=1`` to force the pure-numpy kernels, e.g. on
platforms without an LLVM toolchain or when debugging a kernel.
"""
import os

_FLAG = os.environ.get("ATYTTS_DISABLE_NUMBA", "").strip().lower()

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(fn):
    """``numba.njit(cache=True)`` when numba is importable, else the function."""
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True)(fn)
