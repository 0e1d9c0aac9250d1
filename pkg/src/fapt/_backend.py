"""Backend switch for the compiled kernels.

``FAPT_BACKEND=numpy`` forces the pure-numpy code paths even when numba is
importable; any other value (or unset) uses numba when available.
``FAPT_THREADS`` caps the worker count used by the parallel helpers.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def requested_backend() -> str:
    return os.environ.get("FAPT_BACKEND", "numba").strip().lower()


USE_NUMBA = HAVE_NUMBA and requested_backend() != "numpy"


def njit(func):
    """Compile ``func`` with numba (nopython, nogil, cached) if numba is installed.

    The undecorated function is kept as ``func.py_func`` either way so tests can
    reach the interpreted version.
    """
    if not HAVE_NUMBA:
        func.py_func = func
        return func
    return numba.njit(cache=True, nogil=True)(func)


def worker_count() -> int:
    raw = os.environ.get("FAPT_THREADS", "").strip()
    if not raw:
        return max(1, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"FAPT_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"FAPT_THREADS must be a positive integer, got {raw!r}")
    return n
