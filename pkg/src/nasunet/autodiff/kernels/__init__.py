"""Kernel backend selection.

The numba backend is used when numba imports and ``NASUNET_DISABLE_NUMBA``
is unset or ``0``; otherwise the pure-numpy path is used.  Both expose the
same functions.  ``use_backend`` switches at runtime (tests and benchmarks).
"""
import os

from . import _numpy

_NAMES = (
    "conv_forward",
    "conv_backward_input",
    "conv_backward_weight",
    "maxpool_forward",
    "maxpool_backward",
    "group_norm_forward",
    "group_norm_backward",
)


def _load_numba():
    # Prefer OpenMP over TBB: old system TBB builds emit a warning on every import.
    os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")
    try:
        from . import _numba
    except ImportError:  # pragma: no cover - numba is an optional accelerator
        return None
    return _numba


def _env_wants_numba():
    return os.environ.get("NASUNET_DISABLE_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


backend = "numpy"


def use_backend(name):
    """Select ``"numpy"`` or ``"numba"`` kernels for all subsequent ops."""
    global backend
    if name == "numba":
        mod = _load_numba()
        if mod is None:
            raise RuntimeError("numba backend requested but numba is not importable")
    elif name == "numpy":
        mod = _numpy
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(mod, fn)
    backend = name


def available_backends():
    return ("numpy", "numba") if _load_numba() is not None else ("numpy",)


use_backend("numba" if _env_wants_numba() and _load_numba() is not None else "numpy")
