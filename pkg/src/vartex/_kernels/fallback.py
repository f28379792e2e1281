"""Pure-numpy reference implementations of the hot kernels.

Same call signatures as the compiled extension in ``_core.pyx``. Reduction
order may differ from the compiled kernels in the last ulp, so tests that
demand bit-level reproducibility must stay within a single backend.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softmax_fwd(x):
    """Row softmax of a 2-D array, max-subtracted for stability."""
    m = x.max(axis=1, keepdims=True)
    y = np.exp(x - m)
    y /= y.sum(axis=1, keepdims=True)
    return y


def softmax_bwd(y, gy):
    """Gradient wrt logits given the forward output ``y``."""
    dot = (y * gy).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layernorm_fwd(x, gain, bias, eps):
    """Returns (y, xhat, rstd) for a row-wise layer norm of a 2-D array."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0].copy()


def layernorm_bwd(xhat, rstd, gain, gy):
    """Returns (gx, ggain, gbias) given forward byproducts."""
    gg = gy * gain
    m1 = gg.mean(axis=1, keepdims=True)
    m2 = (gg * xhat).mean(axis=1, keepdims=True)
    gx = (gg - m1 - xhat * m2) * rstd[:, None]
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def gelu_fwd(x):
    """Exact erf-based GELU on a flat array."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(x, gy):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return gy * (cdf + x * pdf)


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, t):
    """In-place decoupled-weight-decay Adam step on flat arrays."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    inv_bc1 = 1.0 / (1.0 - beta1 ** t)
    inv_bc2 = 1.0 / (1.0 - beta2 ** t)
    if wd != 0.0:
        p *= 1.0 - lr * wd
    p -= (lr * inv_bc1) * m / (np.sqrt(v * inv_bc2) + eps)
