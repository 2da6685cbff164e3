"""Backend selection for the elementwise training kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is imported. Setting ``PCMASK_PURE_PYTHON=1`` forces the fallback.
``set_backend`` switches at runtime (tests and benchmarks use it).
"""

import os

from pcmask import _kernels_py

try:
    from pcmask import _kernels as _compiled
except ImportError:
    _compiled = None

_NAMES = ("bias_act_forward", "leaky_relu_backward", "add_l1_subgradient", "adam_update")
BACKEND = "python"


def available():
    return ("cython", "python") if _compiled is not None else ("python",)


def set_backend(name):
    """Rebind the kernel functions to ``name``; returns the previous backend."""
    global BACKEND
    if name not in available():
        raise ValueError(f"backend {name!r} unavailable; have {available()}")
    impl = _compiled if name == "cython" else _kernels_py
    previous = BACKEND
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(impl, fn)
    BACKEND = name
    return previous


_forced = os.environ.get("PCMASK_PURE_PYTHON", "").lower() in ("1", "true", "yes")
set_backend("cython" if _compiled is not None and not _forced else "python")

__all__ = ["BACKEND", "available", "set_backend", *_NAMES]
