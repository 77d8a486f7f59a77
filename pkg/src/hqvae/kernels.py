"""Hot kernels: convolution patch gather/scatter and the GELU activation.

The compiled extension is used when it imports cleanly; setting
``HQVAE_PURE_PYTHON=1`` forces the NumPy implementation.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("HQVAE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled

        _impl = _compiled
        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        pass


def _check(x):
    if x.dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {x.dtype}")
    return np.ascontiguousarray(x)


def im2col(x, kh, kw, stride=1, pad=0, impl=None):
    return (impl or _impl).im2col(_check(x), kh, kw, stride, pad)


def col2im(cols, c, h, w, kh, kw, stride=1, pad=0, impl=None):
    return (impl or _impl).col2im(_check(cols), c, h, w, kh, kw, stride, pad)


def get_impl(name):
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


def gelu_forward(x, impl=None):
    x = _check(x)
    out, t = (impl or _impl).gelu_forward(x.reshape(-1))
    return out.reshape(x.shape), t.reshape(x.shape)


def gelu_backward(x, t, g, impl=None):
    x = _check(x)
    out = (impl or _impl).gelu_backward(x.reshape(-1), _check(t).reshape(-1),
                                        _check(g.astype(x.dtype, copy=False)).reshape(-1))
    return out.reshape(x.shape)
