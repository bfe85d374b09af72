"""Optional numba acceleration.

Set ``CDISRAD_DISABLE_NUMBA=1`` (or numba's own ``NUMBA_DISABLE_JIT=1``) to
force the pure-numpy kernels.
"""

import os

_FALSY = {"", "0", "false", "no", "off"}

DISABLED = (
    os.environ.get("CDISRAD_DISABLE_NUMBA", "").strip().lower() not in _FALSY
    or os.environ.get("NUMBA_DISABLE_JIT", "").strip().lower() not in _FALSY
)

try:
    if DISABLED:
        raise ImportError
    import numba

    HAVE_NUMBA = True

    def njit(func):
        # no fastmath: both backends must agree to rounding error
        return numba.njit(cache=True, nogil=True)(func)

except ImportError:
    HAVE_NUMBA = False

    def njit(func):
        return None


def resolve_backend(backend=None):
    """Return ``"numba"`` or ``"numpy"`` for a requested backend."""
    if backend is None:
        return "numba" if HAVE_NUMBA else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}; expected 'numba' or 'numpy'")
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable or disabled")
    return backend
