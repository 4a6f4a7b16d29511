"""Kernel backend selection.

The compiled extension is preferred when importable; set
PRECISEDMI_KERNELS=numpy or =cython to force a choice, and use the `use()`
context manager to override temporarily (tests, benchmarks). Dispatch goes
through module attribute lookup (`_kernels.active.conv1d_forward(...)`) so
an override takes effect everywhere at once.
"""

import contextlib
import os

from . import numpy_backend

try:
    from . import cython_backend
except ImportError:  # extension not built
    cython_backend = None

_BACKENDS = {"numpy": numpy_backend}
if cython_backend is not None:
    _BACKENDS["cython"] = cython_backend


def _select():
    requested = os.environ.get("PRECISEDMI_KERNELS", "auto").lower()
    if requested == "auto":
        return _BACKENDS.get("cython", numpy_backend)
    if requested not in _BACKENDS:
        raise ImportError(
            f"requested kernel backend {requested!r} is unavailable; "
            f"have {sorted(_BACKENDS)}"
        )
    return _BACKENDS[requested]


active = _select()


def backend_name():
    for name, mod in _BACKENDS.items():
        if mod is active:
            return name
    raise RuntimeError("active backend not registered")


def available_backends():
    return sorted(_BACKENDS)


def get(name):
    return _BACKENDS[name]


@contextlib.contextmanager
def use(name):
    """Temporarily switch the active backend."""
    global active
    previous = active
    active = _BACKENDS[name]
    try:
        yield active
    finally:
        active = previous
