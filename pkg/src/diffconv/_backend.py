"""Kernel backend selection.

``DIFFCONV_BACKEND=numba`` (the default when numba imports) routes the hot
loops through ``_kernels_numba``; ``DIFFCONV_BACKEND=numpy`` forces the
vectorised fallback. Both modules expose identical functions.
"""

import os
from contextlib import contextmanager
from importlib import import_module

ENV_VAR = "DIFFCONV_BACKEND"
BACKENDS = ("numba", "numpy")

_active = None


def _load(name):
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    return import_module(f"diffconv._kernels_{name}")


def _default():
    requested = os.environ.get(ENV_VAR, "").strip().lower()
    if requested:
        return requested
    try:
        import numba  # noqa: F401
    except ImportError:
        return "numpy"
    return "numba"


def kernels():
    """Return the active kernel module."""
    global _active
    if _active is None:
        _active = _load(_default())
    return _active


def name():
    return kernels().__name__.rsplit("_", 1)[-1]


def set_backend(backend):
    global _active
    _active = _load(backend)


@contextmanager
def use_backend(backend):
    global _active
    previous = kernels()
    _active = _load(backend)
    try:
        yield _active
    finally:
        _active = previous
