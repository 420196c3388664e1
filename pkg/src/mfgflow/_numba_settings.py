"""Switch between numba-compiled kernels and the pure-numpy fallback.

Set ``MFGFLOW_DISABLE_NUMBA=1`` before import to run every hot loop through
the vectorised numpy implementations instead.
"""

import os

_flag = os.environ.get("MFGFLOW_DISABLE_NUMBA", "").strip().lower()
NUMBA_DISABLED = _flag not in ("", "0", "false", "no")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_DISABLED = True

numba_default = {
    "nogil": True,
    "cache": False,
    "fastmath": False,
    "error_model": "numpy",
    "boundscheck": False,
}

numba_cached = dict(numba_default, cache=True)


def use_numba():
    return not NUMBA_DISABLED


def jit(fn=None, **options):
    """njit with the package defaults, or identity when numba is disabled."""
    settings = dict(numba_default, **options)

    def wrap(f):
        if NUMBA_DISABLED:
            return f
        return numba.njit(**settings)(f)

    if fn is None:
        return wrap
    return wrap(fn)
