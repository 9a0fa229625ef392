"""Backend selection for the hot numeric kernels.

Set ``EDGESSD_BACKEND=numpy`` to force the pure-numpy path; the default uses
numba when it imports. The flag is read once at import time. Both kernel
families stay importable either way so they can be benchmarked side by side.
"""

import os

BACKEND_ENV = "EDGESSD_BACKEND"

_requested = os.environ.get(BACKEND_ENV, "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"{BACKEND_ENV} must be 'numba' or 'numpy', got {_requested!r}")

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False
    _njit = None

USE_NUMBA = HAVE_NUMBA and _requested == "numba"


def njit(*args, **kwargs):
    """``numba.njit`` with on-disk caching, or an identity decorator without numba."""
    if _njit is not None:
        kwargs.setdefault("cache", True)
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
