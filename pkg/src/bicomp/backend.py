"""Kernel backend selection: numba-compiled by default, pure NumPy on request.

Every hot kernel in :mod:`bicomp.kernels` is written once, in
numba-compilable NumPy, and decorated with :func:`maybe_njit`.  With the
default backend the kernels are compiled (``numba.njit(cache=True)``); set
``BICOMP_NUMBA=0`` to run the same source uncompiled as a pure-NumPy
fallback.  ``benchmarks/bench_backends.py`` compares the two.

The fallback wrapper silences uint64 overflow warnings: the deterministic
stream generator relies on modular 64-bit arithmetic, which numba performs
silently and NumPy scalars flag with a RuntimeWarning.
"""

import functools
import os

import numpy as np


def _env_wants_numba() -> bool:
    value = os.environ.get("BICOMP_NUMBA", "1").strip().lower()
    return value not in ("0", "false", "off", "no")


NUMBA_ENABLED = False
if _env_wants_numba():
    try:
        import numba  # noqa: F401

        NUMBA_ENABLED = True
    except ImportError:
        NUMBA_ENABLED = False


def maybe_njit(**options):
    """Return ``numba.njit`` with the given options, or a plain passthrough."""
    if NUMBA_ENABLED:
        import numba

        options.setdefault("cache", True)
        return numba.njit(**options)

    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args):
            with np.errstate(over="ignore"):
                return fn(*args)

        wrapper.py_func = fn
        return wrapper

    return decorate


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
