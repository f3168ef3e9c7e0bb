"""Kernel backend selection.

Hot inner loops ship in two implementations: a numba @njit version and a
pure-numpy fallback. The environment variable MIXVI_BACKEND picks one:

    MIXVI_BACKEND=auto    use numba when importable (default)
    MIXVI_BACKEND=numba   require numba, fail loudly if missing
    MIXVI_BACKEND=numpy   force the pure-numpy path

Kernels are serial (no prange): reruns of the same seed must be
bit-identical, and parallel reductions do not guarantee that.
"""

import os

from .errors import ConfigError

_CHOICE = os.environ.get("MIXVI_BACKEND", "auto").lower()
if _CHOICE not in ("auto", "numba", "numpy"):
    raise ConfigError(f"MIXVI_BACKEND must be auto|numba|numpy, got {_CHOICE!r}")

USE_NUMBA = False
if _CHOICE != "numpy":
    try:
        import numba  # noqa: F401

        USE_NUMBA = True
    except ImportError:
        if _CHOICE == "numba":
            raise


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


def njit_if_enabled(func):
    """Decorate with numba.njit(cache=True) on the numba backend, else no-op."""
    if USE_NUMBA:
        import numba

        return numba.njit(cache=True)(func)
    return func
