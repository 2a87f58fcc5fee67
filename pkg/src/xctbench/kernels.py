"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; set ``XCTBENCH_PURE_PYTHON=1``
to force the numpy path. ``BACKEND`` names the active implementation.
"""
import os

import numpy as np

from . import _fallback

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

if _ckernels is not None and not os.environ.get("XCTBENCH_PURE_PYTHON"):
    _impl = _ckernels
    BACKEND = "cython"
else:
    _impl = _fallback
    BACKEND = "python"


def available_backends():
    return ["python"] + (["cython"] if _ckernels is not None else [])


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython' or 'python'), default the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _fallback
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built")
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def project(image, cos_t, sin_t, n_det, step=0.5, backend=None):
    return get_backend(backend).project(_c(image), _c(cos_t), _c(sin_t), int(n_det), float(step))


def backproject(filtered, cos_t, sin_t, n, backend=None):
    return get_backend(backend).backproject(_c(filtered), _c(cos_t), _c(sin_t), int(n))


def im2col(xp, k, stride, backend=None):
    return get_backend(backend).im2col(_c(xp), int(k), int(stride))


def col2im(cols, nc, hp, wp, k, stride, backend=None):
    return get_backend(backend).col2im(_c(cols), int(nc), int(hp), int(wp), int(k), int(stride))
