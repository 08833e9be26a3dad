"""Pure-numpy versions of the compiled row-wise kernels in ``_kernels.pyx``.

Same signatures and semantics: inputs are 2-D float64 arrays (rows x width).
"""

import math

import numpy as np

_erf = np.frompyfunc(math.erf, 1, 1)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _erf_array(x):
    try:
        from scipy.special import erf
    except ImportError:
        return _erf(x).astype(np.float64)
    return erf(x)


def softmax_forward(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_backward(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def layer_norm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_backward(g, xhat, rstd, gamma):
    dy = g * gamma
    dx = rstd[:, None] * (
        dy - dy.mean(axis=-1, keepdims=True) - xhat * (dy * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def gelu_forward(x):
    return 0.5 * x * (1.0 + _erf_array(x * _INV_SQRT2))


def gelu_backward(x, g):
    cdf = 0.5 * (1.0 + _erf_array(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return g * (cdf + x * pdf)
