"""Optional numba acceleration for the hot numeric kernels.

Every kernel in this package is written as plain Python over numpy arrays and
decorated with :func:`maybe_njit`.  When numba is importable (and not disabled
via ``TRAJDIFF_DISABLE_NUMBA=1``) the kernel is JIT-compiled; otherwise the
same source runs as the pure-numpy fallback.  Both paths execute identical
IEEE double arithmetic, so results are bit-identical either way.

``TRAJDIFF_WORKERS`` caps the numba thread pool used by ``parallel=True``
kernels (defaults to all cores).  Parallel kernels only ever write disjoint
output slots, so thread count does not affect results.
"""

import os

import numpy as np

_DISABLED = os.environ.get("TRAJDIFF_DISABLE_NUMBA", "0") == "1"

try:
    import numba
    from numba import prange

    # avoid the TBB layer (version sniffing warns on older TBB builds)
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay graceful
    numba = None
    prange = range
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _DISABLED

if not USE_NUMBA:
    prange = range


def maybe_njit(*args, **kwargs):
    """Return numba.njit(*args, **kwargs) when acceleration is on, else identity."""

    def decorator(func):
        if USE_NUMBA:
            return numba.njit(*args, **kwargs)(func)
        return func

    return decorator


def set_workers_from_env():
    if USE_NUMBA:
        workers = os.environ.get("TRAJDIFF_WORKERS")
        if workers:
            numba.set_num_threads(max(1, int(workers)))


def py_func(kernel):
    """Underlying pure-Python function of a kernel (the numpy fallback path)."""
    return getattr(kernel, "py_func", kernel)


def require_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {what}")
