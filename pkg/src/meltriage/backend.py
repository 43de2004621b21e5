"""Kernel backend selection.

The aggregator's hot kernels are written once in numba-compatible numpy and
compiled with ``@numba.njit`` by default. Setting the environment variable
``MELTRIAGE_BACKEND=numpy`` skips compilation and runs the identical source
as plain Python/numpy. The fallback exists for debugging, for platforms
without a working numba, and as the reference in the backend benchmark.

The choice is read once at import time of the kernels module. Tests that
need both backends in one process reload the kernels module under a patched
environment.
"""

from __future__ import annotations

import os

_ENV_VAR = "MELTRIAGE_BACKEND"
_VALID = ("numba", "numpy")


def selected_backend() -> str:
    """Return the configured backend name, validating the environment."""
    value = os.environ.get(_ENV_VAR, "numba").strip().lower()
    if value not in _VALID:
        raise ValueError(
            f"{_ENV_VAR} must be one of {_VALID}, got {value!r}"
        )
    return value


def jit_compile(func):
    """Apply numba nopython compilation if the numba backend is selected.

    With the numpy backend, or when numba is unavailable, the function is
    returned unchanged.
    """
    if selected_backend() == "numpy":
        return func
    try:
        import numba
    except ImportError:
        return func
    return numba.njit(func, cache=True, fastmath=False)
