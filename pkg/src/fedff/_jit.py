"""Optional numba acceleration.

Hot kernels are written once as plain numpy/python functions and wrapped
with :func:`kernel`.  When numba is importable and ``FEDFF_DISABLE_JIT`` is
unset (or ``0``), they are compiled with ``numba.njit``; otherwise the
undecorated functions run as-is.
"""

import logging
import os

logger = logging.getLogger(__name__)

_FLAG = "FEDFF_DISABLE_JIT"


def _jit_requested():
    return os.environ.get(_FLAG, "0").strip().lower() in ("", "0", "false", "no")


try:
    if not _jit_requested():
        raise ImportError("disabled via " + _FLAG)
    import numba

    USE_NUMBA = True
except ImportError as exc:  # pragma: no cover - depends on environment
    logger.debug("numba kernels unavailable: %s", exc)
    numba = None
    USE_NUMBA = False


def kernel(func):
    """Compile ``func`` with numba when enabled, else return it unchanged."""
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(func)
    return func


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
