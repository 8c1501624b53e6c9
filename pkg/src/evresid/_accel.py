"""Optional numba acceleration.

Set ``EVRESID_DISABLE_NUMBA=1`` to force the pure-numpy kernels even when
numba is importable. The flag is read once at import time.
"""
import os

_DISABLED = os.environ.get("EVRESID_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")


def _noop_jit(*args, **kwargs):
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(f):
        return f

    return wrap


def _have_numba():
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


HAVE_NUMBA = _have_numba()
USE_NUMBA = HAVE_NUMBA and not _DISABLED

if HAVE_NUMBA:
    from numba import njit
else:
    njit = _noop_jit


def backend():
    """Name of the kernel backend in effect: ``"numba"`` or ``"numpy"``."""
    return "numba" if USE_NUMBA else "numpy"
