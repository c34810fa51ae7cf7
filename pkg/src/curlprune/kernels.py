"""Backend selection for the convolution lowering kernels.

The compiled Cython module is used when it was built; otherwise the numpy
implementation is loaded. Set ``CURLPRUNE_PURE=1`` to force the fallback.
"""

import importlib
import os

from . import _kernels_py

BACKENDS = {"python": _kernels_py}

try:
    BACKENDS["compiled"] = importlib.import_module("curlprune._kernels")
except ImportError:  # extension not built
    pass

if os.environ.get("CURLPRUNE_PURE") == "1" or "compiled" not in BACKENDS:
    BACKEND = "python"
else:
    BACKEND = "compiled"

_impl = BACKENDS[BACKEND]


def use_backend(name):
    """Switch the active kernel backend; returns the previous backend name."""
    global BACKEND, _impl
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} not available; have {sorted(BACKENDS)}")
    previous, BACKEND, _impl = BACKEND, name, BACKENDS[name]
    return previous


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(x, kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride, pad):
    return _impl.col2im(cols, tuple(x_shape), kh, kw, stride, pad)


def bn_stats(x3):
    return _impl.bn_stats(x3)


def affine(x3, scale, shift):
    return _impl.affine(x3, scale, shift)


def bn_backward(g3, x3, mean, inv_std, gamma, training):
    return _impl.bn_backward(g3, x3, mean, inv_std, gamma, training)
