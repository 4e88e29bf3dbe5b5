"""Kernel backend selection.

The hot inner loops (block log-mass statistics and the fused online-softmax
attend) exist twice: a compiled Cython extension (``_core``) and a pure-NumPy
fallback (``pure``).  The compiled backend is used when it imported cleanly;
set ``CERTKV_KERNEL=pure`` or ``CERTKV_KERNEL=compiled`` to force one.
``benchmarks/kernel_benchmark.py`` compares the two.
"""

import os

from . import pure

try:
    from . import _core
except ImportError:  # extension not built; pure backend carries everything
    _core = None

_BACKENDS = {"pure": pure}
if _core is not None:
    _BACKENDS["compiled"] = _core


def available_backends():
    """Names of importable backends, pure first."""
    return sorted(_BACKENDS)


def _select_default():
    requested = os.environ.get("CERTKV_KERNEL", "").strip().lower()
    if requested:
        if requested not in _BACKENDS:
            raise ImportError(
                f"CERTKV_KERNEL={requested!r} but available backends are "
                f"{available_backends()}"
            )
        return _BACKENDS[requested]
    return _BACKENDS.get("compiled", pure)


_active = _select_default()


def get_backend():
    """The module providing ``block_logmass`` and ``fused_attend``."""
    return _active


def set_backend(name):
    """Switch the active backend by name; returns the previous one."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; have {available_backends()}")
    previous = _active
    _active = _BACKENDS[name]
    return previous
