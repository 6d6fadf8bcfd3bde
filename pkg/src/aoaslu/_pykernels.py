"""Pure-numpy reference kernels.

Every function takes 2-D C-contiguous arrays (rows are the reduction axis)
and returns fresh arrays of the same dtype. The compiled backend in
``_ckernels.pyx`` implements the same signatures.
"""

import numpy as np

from .errors import DegenerateRowError

GELU_C = np.sqrt(2.0 / np.pi)
GELU_A = 0.044715


def softmax_forward(x, mask=None):
    if mask is not None:
        if not mask.any(axis=1).all():
            raise DegenerateRowError("softmax row has no unmasked entry")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layer_norm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gamma + beta
    return y, xhat, rstd[:, 0].copy()


def layer_norm_backward(gy, xhat, rstd, gamma):
    gxhat = gy * gamma
    d = xhat.shape[1]
    m1 = gxhat.sum(axis=1, keepdims=True) / d
    m2 = (gxhat * xhat).sum(axis=1, keepdims=True) / d
    gx = rstd[:, None] * (gxhat - m1 - xhat * m2)
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    return gx, ggamma, gbeta


def gelu_forward(x):
    u = GELU_C * (x + GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_backward(x, gy):
    x2 = x * x
    t = np.tanh(GELU_C * (x + GELU_A * x2 * x))
    dydx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x2)
    return gy * dydx
