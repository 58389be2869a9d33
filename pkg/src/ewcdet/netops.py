"""Array-level building blocks for the detector network.

Each forward function returns a cache that its matching backward function
consumes. Everything is float64 numpy; reductions rely on numpy's fixed
summation order so repeated runs on the same machine are bit-identical.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv3x3_forward(x, w, b):
    """3x3 convolution, stride 1, zero padding 1.

    x: (c_in, h, w) input, w: (c_out, c_in, 3, 3), b: (c_out,).
    Returns (out, cache) with out shaped (c_out, h, w).
    """
    c_in, h, wd = x.shape
    c_out = w.shape[0]
    xp = np.zeros((c_in, h + 2, wd + 2), dtype=np.float64)
    xp[:, 1:-1, 1:-1] = x
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (c_in, h, wd, 3, 3)
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(h * wd, c_in * 9)
    out = cols @ w.reshape(c_out, c_in * 9).T + b
    return out.reshape(h, wd, c_out).transpose(2, 0, 1), (cols, w, x.shape)


def conv3x3_backward(dout, cache):
    """Gradients of conv3x3_forward: returns (dx, dw, db)."""
    cols, w, x_shape = cache
    c_in, h, wd = x_shape
    c_out = w.shape[0]
    dmat = dout.transpose(1, 2, 0).reshape(h * wd, c_out)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    dcols = (dmat @ w.reshape(c_out, c_in * 9)).reshape(h, wd, c_in, 3, 3)
    dxp = np.zeros((c_in, h + 2, wd + 2), dtype=np.float64)
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + h, kj:kj + wd] += dcols[:, :, :, ki, kj].transpose(2, 0, 1)
    return dxp[:, 1:-1, 1:-1], dw, db


def avgpool_forward(x, p):
    """Non-overlapping p x p average pooling; p must divide both spatial dims."""
    if p == 1:
        return x, (x.shape, p)
    c, h, w = x.shape
    y = x.reshape(c, h // p, p, w // p, p).mean(axis=(2, 4))
    return y, (x.shape, p)


def avgpool_backward(dy, cache):
    _, p = cache
    if p == 1:
        return dy
    return np.repeat(np.repeat(dy, p, axis=1), p, axis=2) / (p * p)


def relu_forward(z):
    return np.maximum(z, 0.0)


def relu_backward(dy, z):
    return np.where(z > 0.0, dy, 0.0)


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
