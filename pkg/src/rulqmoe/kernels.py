"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementations in ``_kernels_py`` are used. Setting the environment
variable ``RULQMOE_PURE_PYTHON=1`` forces the numpy path.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("RULQMOE_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return _impl.softplus(x).reshape(x.shape)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return _impl.sigmoid(x).reshape(x.shape)


GAP_FLOOR = float(np.finfo(np.float64).tiny)


def strict_cumsum(base, gaps):
    """``base + cumsum(gaps)`` that stays strictly increasing in float64.

    Gaps are floored at the smallest normal double (softplus of a very
    negative input, or a tiny gate weight times a gap, can underflow to 0), and
    where rounding against a large ``base`` swallows a gap the entry is moved
    up by one ulp. Both guards only fire in regimes where the exact value is
    positive but unrepresentable, so they never change well-scaled outputs.
    """
    gaps = np.maximum(gaps, GAP_FLOOR)
    q = base[:, None] + np.cumsum(gaps, axis=1)
    _bump_ties(q)
    return gaps, q


def _bump_ties(q):
    for i in np.flatnonzero((np.diff(q, axis=1) <= 0).any(axis=1)):
        row = q[i]
        for k in range(1, row.size):
            if not row[k] > row[k - 1]:
                row[k] = np.nextafter(row[k - 1], np.inf)


def quantile_head(pre, base, scale=1.0):
    """Positive gaps ``scale * softplus(pre)`` and their prefix sums offset by ``base``."""
    gaps, q = _impl.quantile_head(_f64(pre), _f64(base), float(scale))
    if gaps.size and (gaps.min() < GAP_FLOOR or (q.shape[1] > 1 and np.diff(q, axis=1).min() <= 0)):
        return strict_cumsum(_f64(base), gaps)
    return gaps, q


def quantile_head_backward(pre, dq, scale=1.0):
    return _impl.quantile_head_backward(_f64(pre), _f64(dq), float(scale))


def pinball(y, q, taus):
    """Mean pinball loss over samples and levels, and its gradient w.r.t. ``q``."""
    return _impl.pinball(_f64(y), _f64(q), _f64(taus))


def mixture_pdf_cdf(centers, b, y):
    """Gaussian-kernel pdf and cdf, one row of centers/bandwidth per row of probes."""
    return _impl.mixture_pdf_cdf(_f64(centers), _f64(b), _f64(y))
