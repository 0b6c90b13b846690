"""Acceleration backend selection.

Hot kernels in :mod:`segsurv.kernels` exist in two flavours: a numba
``@njit`` build and a vectorized pure-numpy build. The numba build is used
when numba imports cleanly, unless the environment variable
``SEGSURV_NUMBA`` is set to ``0``/``false``/``off``, which forces the numpy
path. Dispatch happens per call, so flipping :data:`USE_NUMBA` at runtime
(tests, benchmarks) is honoured.
"""

from __future__ import annotations

import os

try:
    import numba  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised via SEGSURV_NUMBA=0 instead
    NUMBA_AVAILABLE = False


def _env_enabled() -> bool:
    return os.environ.get("SEGSURV_NUMBA", "1").strip().lower() not in ("0", "false", "off")


USE_NUMBA = NUMBA_AVAILABLE and _env_enabled()


def active_backend() -> str:
    """Name of the kernel backend currently dispatched to."""
    return "numba" if USE_NUMBA else "numpy"
