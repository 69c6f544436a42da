"""Pure numpy implementations of the convolution and pooling kernels.

These are the reference fallback for the compiled ``_ckernels`` module and
share its exact signatures. Arrays are contiguous row-major, dtype float32 or
float64.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, k, stride, dilation, l_out):
    """Gather ``xp[B, C, Lp]`` into columns ``[B, C*k, l_out]``."""
    span = dilation * (k - 1) + 1
    win = sliding_window_view(xp, span, axis=2)[:, :, : stride * (l_out - 1) + 1 : stride, ::dilation]
    # win: [B, C, l_out, k] -> [B, C, k, l_out]
    b, c = xp.shape[0], xp.shape[1]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(b, c * k, l_out)


def col2im(cols, c, lp, k, stride, dilation):
    """Scatter-add columns ``[B, C*k, l_out]`` back to ``[B, C, lp]``."""
    b, _, l_out = cols.shape
    cols = cols.reshape(b, c, k, l_out)
    out = np.zeros((b, c, lp), dtype=cols.dtype)
    stop = stride * (l_out - 1) + 1
    for j in range(k):
        start = j * dilation
        out[:, :, start : start + stop : stride] += cols[:, :, j, :]
    return out


def maxpool_forward(x, window):
    """Non-overlapping max pool over the last axis; returns (out, argmax)."""
    b, c, length = x.shape
    l_out = length // window
    win = x[:, :, : l_out * window].reshape(b, c, l_out, window)
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool_backward(gout, idx, window, length):
    b, c, l_out = gout.shape
    g = np.zeros((b, c, l_out, window), dtype=gout.dtype)
    np.put_along_axis(g, idx[..., None], gout[..., None], axis=3)
    out = np.zeros((b, c, length), dtype=gout.dtype)
    out[:, :, : l_out * window] = g.reshape(b, c, l_out * window)
    return out
