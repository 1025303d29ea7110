"""Numba switch shared by the kernel modules.

Set ``ATTA_DISABLE_NUMBA=1`` to force the pure-numpy code paths.
"""
import os

_FALSY = {"", "0", "false", "no", "off"}

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

USE_NUMBA = numba is not None and os.environ.get("ATTA_DISABLE_NUMBA", "0").strip().lower() in _FALSY


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when available, otherwise a no-op decorator."""
    kwargs.setdefault("cache", True)
    if numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    return numba.njit(*args, **kwargs)
