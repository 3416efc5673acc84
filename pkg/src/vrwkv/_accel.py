"""Numba switch.

Set ``VRWKV_DISABLE_NUMBA=1`` to force the pure-numpy kernels, e.g. on a
platform without numba or when debugging the recurrences.
"""

import os

_flag = os.environ.get("VRWKV_DISABLE_NUMBA", "").strip().lower()
DISABLED_BY_ENV = _flag in ("1", "true", "yes", "on")

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn

USE_NUMBA = HAS_NUMBA and not DISABLED_BY_ENV


def resolve_backend(backend=None):
    """Map ``None``/"auto"/"numba"/"numpy" to the backend that will run."""
    if backend in (None, "auto"):
        return "numba" if USE_NUMBA else "numpy"
    if backend == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        return "numba"
    if backend == "numpy":
        return "numpy"
    raise ValueError(f"unknown backend {backend!r}")
