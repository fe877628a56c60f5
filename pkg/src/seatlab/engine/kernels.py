"""Numpy kernels for the stride-1 square-kernel convolution primitives.

All three kernels share one im2col layout so that the adjoint pairs stay
consistent: patch rows are ordered (c, i, j) and columns (n, h, w).  That
order copies contiguous image rows, which is much faster than putting the
kernel window innermost.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _patches(x, k, pad):
    n, c, _, _ = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # n, c, ho, wo, k, k
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
    return cols, ho, wo


def conv2d(x, w, padding):
    o, _, k, _ = w.shape
    n = x.shape[0]
    cols, ho, wo = _patches(x, k, padding)
    out = w.reshape(o, -1) @ cols
    return np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))


def conv2d_input_grad(g, w, padding):
    """Adjoint of ``conv2d`` in its first argument (col2im: one matmul, then k*k
    shifted adds into the padded input)."""
    n, o, ho, wo = g.shape
    _, c, k, _ = w.shape
    g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
    cols = (w.reshape(o, -1).T @ g2).reshape(c, k, k, n, ho, wo)
    h, wd = ho + k - 1 - 2 * padding, wo + k - 1 - 2 * padding
    dxp = np.zeros((c, n, ho + k - 1, wo + k - 1), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + ho, j:j + wo] += cols[:, i, j]
    dx = dxp[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(dx.transpose(1, 0, 2, 3))


def conv2d_weight_grad(x, g, padding, k):
    """Adjoint of ``conv2d`` in its second argument."""
    o = g.shape[1]
    cols, _, _ = _patches(x, k, padding)
    g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
    return (g2 @ cols.T).reshape(o, x.shape[1], k, k)


def avgpool2(x):
    s = x[:, :, 0::2, 0::2] + x[:, :, 1::2, 0::2] + x[:, :, 0::2, 1::2] + x[:, :, 1::2, 1::2]
    return s * np.float32(0.25)


def upsample2(g):
    """Adjoint of ``avgpool2``: spread each cell over its 2x2 window, scaled by 1/4."""
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.float32(0.25)


def logsumexp(x):
    m = x.max(axis=-1, keepdims=True)
    # rows that are entirely -inf never occur: logits are finite by construction
    return (np.log(np.exp(x - m).sum(axis=-1, keepdims=True)) + m)[..., 0]


def first_argmax_mask(x, axis):
    idx = np.expand_dims(x.argmax(axis=axis), axis)
    mask = np.zeros_like(x)
    np.put_along_axis(mask, idx, np.float32(1.0), axis=axis)
    return mask
