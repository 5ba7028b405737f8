"""Kernel backend selection.

The hot convolution kernels exist twice: a numba-jitted version and a pure
numpy (im2col + BLAS) version. CUBESEG_BACKEND picks one:

    CUBESEG_BACKEND=numba   force numba (error if numba is missing)
    CUBESEG_BACKEND=numpy   force the pure-numpy path
    unset / auto            numba when importable, else numpy

Both produce the same results up to float32 summation order; `cubeseg bench`
compares their speed.
"""
import os

from .errors import ConfigError

try:
    import numba
    HAS_NUMBA = True
    _threads = os.environ.get("CUBESEG_THREADS")
    if _threads:
        numba.set_num_threads(
            max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))
except ImportError:
    HAS_NUMBA = False

_VALID = ("auto", "numba", "numpy")


def _resolve(name: str) -> str:
    if name not in _VALID:
        raise ConfigError(f"unknown backend {name!r}, expected one of {_VALID}")
    if name == "numpy":
        return "numpy"
    if name == "numba":
        if not HAS_NUMBA:
            raise ConfigError("CUBESEG_BACKEND=numba but numba is not importable")
        return "numba"
    return "numba" if HAS_NUMBA else "numpy"


_backend = _resolve(os.environ.get("CUBESEG_BACKEND", "auto"))


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Switch backends at runtime (tests and the benchmark use this)."""
    global _backend
    _backend = _resolve(name)
    return _backend
