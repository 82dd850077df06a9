"""Numba switch.

Hot kernels are written twice: a loop-level version compiled with ``@njit``
and a vectorised numpy version. ``MERLIN_DISABLE_NUMBA=1`` (or numba being
absent) selects the numpy path everywhere.
"""
import os

_disabled = os.environ.get("MERLIN_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


def use_numba() -> bool:
    return HAS_NUMBA
