"""Numba switch.

Set ``ATDN_DISABLE_NUMBA=1`` to run the pure-numpy kernels instead of the
jitted ones. ``ATDN_THREADS`` caps the numba worker pool.
"""
import os

_FALSE = {"", "0", "false", "no", "off"}

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("ATDN_DISABLE_NUMBA", "").lower() in _FALSE


def njit(*args, **kwargs):
    """``numba.njit`` with caching on, or an identity decorator without numba."""
    kwargs.setdefault("cache", True)
    if not NUMBA_AVAILABLE:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    return numba.njit(*args, **kwargs)


def set_threads(n):
    if NUMBA_AVAILABLE and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


set_threads(os.environ.get("ATDN_THREADS"))
