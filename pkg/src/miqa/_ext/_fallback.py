"""Pure-numpy versions of the compiled convolution kernels (channels-last)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    n, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    # (N, OH, OW, C, KH, KW) -> (N, OH, OW, KH, KW, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        n * oh * ow, kh * kw * c
    )


def col2im(cols, n, h, w, c, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if cols.shape != (n * oh * ow, kh * kw * c):
        raise ValueError("column buffer does not match the requested geometry")
    blocks = cols.reshape(n, oh, ow, kh, kw, c)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    # descending kernel order, matching the compiled kernel's summation order
    for i in reversed(range(kh)):
        for j in reversed(range(kw)):
            out[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += blocks[:, :, :, i, j]
    if pad:
        out = out[:, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)
