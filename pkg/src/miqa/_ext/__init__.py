"""Convolution gather/scatter kernels for (N, H, W, C) arrays.

The compiled module is used when it was built and ``MIQA_PURE_PYTHON`` is not
set; otherwise the numpy fallback is selected. Both produce identical bits.
"""

import os

import numpy as np

from . import _fallback

BACKEND = "numpy"
_compiled = None

if not os.environ.get("MIQA_PURE_PYTHON"):
    try:
        from . import _im2col as _compiled
    except ImportError:  # extension not built
        _compiled = None
    else:
        BACKEND = "cython"


def im2col(x, kh, kw, stride, pad):
    if _compiled is not None:
        return _compiled.im2col(np.ascontiguousarray(x), kh, kw, stride, pad)
    return _fallback.im2col(x, kh, kw, stride, pad)


def col2im(cols, n, h, w, c, kh, kw, stride, pad):
    if _compiled is not None:
        return _compiled.col2im(np.ascontiguousarray(cols), n, h, w, c, kh, kw, stride, pad)
    return _fallback.col2im(cols, n, h, w, c, kh, kw, stride, pad)
