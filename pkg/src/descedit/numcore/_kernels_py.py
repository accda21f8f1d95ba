"""Row-wise numpy kernels; the reference path the compiled core must match.

All functions take C-contiguous 2-D arrays whose rows are the reduction axis.
"""

import numpy as np


def softmax_forward(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    e /= e.sum(axis=1, keepdims=True)
    return e


def softmax_backward(y, g):
    dot = (g * y).sum(axis=1, keepdims=True)
    return y * (g - dot)


def layer_norm_forward(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    return xhat * gain + bias, xhat, rstd[:, 0].astype(x.dtype)


def layer_norm_backward(g, xhat, rstd, gain):
    n = xhat.shape[1]
    ggain = (g * xhat).sum(axis=0)
    gbias = g.sum(axis=0)
    gx_hat = g * gain
    s1 = gx_hat.sum(axis=1, keepdims=True)
    s2 = (gx_hat * xhat).sum(axis=1, keepdims=True)
    gx = (gx_hat - s1 / n - xhat * (s2 / n)) * rstd[:, None]
    return gx.astype(g.dtype), ggain.astype(g.dtype), gbias.astype(g.dtype)
