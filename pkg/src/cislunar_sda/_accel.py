"""Optional numba acceleration.

Set ``SDA_DISABLE_NUMBA=1`` to run every kernel as plain numpy/Python. Both
paths execute the same source, so results agree to floating-point roundoff.
"""
import os

_FLAG = os.environ.get("SDA_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def jit(fn):
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


__all__ = ["USE_NUMBA", "jit"]
