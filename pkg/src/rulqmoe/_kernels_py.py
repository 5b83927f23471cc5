"""Pure numpy implementations of the hot kernels.

Same call signatures as the compiled ``_ckernels`` module; ``kernels`` picks
one of the two at import time.
"""

import numpy as np
from scipy.special import erfc

_INV_SQRT_2PI = 0.3989422804014327
_INV_SQRT_2 = 0.7071067811865476


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def quantile_head(pre, base, scale):
    gaps = scale * softplus(pre)
    q = base[:, None] + np.cumsum(gaps, axis=1)
    return gaps, q


def quantile_head_backward(pre, dq, scale):
    # dQ_k/dgap_j = 1 for j <= k, so each gap collects the reverse cumulative sum
    dgaps = np.cumsum(dq[:, ::-1], axis=1)[:, ::-1]
    dpre = scale * sigmoid(pre) * dgaps
    dbase = dq.sum(axis=1)
    return dpre, dbase


def pinball(y, q, taus):
    n, k = q.shape
    u = y[:, None] - q
    loss = np.maximum(taus * u, (taus - 1.0) * u)
    slope = np.where(u > 0, taus, taus - 1.0)
    return float(loss.sum() / (n * k)), -slope / (n * k)


def mixture_pdf_cdf(centers, b, y):
    z = (y[:, :, None] - centers[:, None, :]) / b[:, None, None]
    k = centers.shape[1]
    pdf = (_INV_SQRT_2PI * np.exp(-0.5 * z * z)).sum(axis=2) / (b[:, None] * k)
    cdf = (0.5 * erfc(-z * _INV_SQRT_2)).sum(axis=2) / k
    return pdf, cdf
