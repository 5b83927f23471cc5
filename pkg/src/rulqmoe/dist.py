"""Predictive distributions built from a vector of quantile estimates.

A Gaussian kernel of bandwidth ``b`` sits on each of the K quantile values, so
the density is an equal-weight Gaussian mixture and the CDF has the closed
form ``(1/K) * sum_k Phi((y - q_k) / b)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .expert import QuantileLevels


@dataclass(frozen=True)
class QuantileVector:
    values: np.ndarray
    levels: QuantileLevels

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        object.__setattr__(self, "values", values)
        if not isinstance(self.levels, QuantileLevels):
            object.__setattr__(self, "levels", QuantileLevels(self.levels))
        if values.size != len(self.levels):
            raise ValueError(f"{values.size} values for {len(self.levels)} levels")
        if not np.all(np.isfinite(values)):
            raise ValueError("quantile values must be finite")
        if np.any(np.diff(values) <= 0):
            raise ValueError("quantile values must be strictly increasing")

    def at(self, tau: float) -> float:
        return float(self.values[self.levels.index(tau)])


@dataclass(frozen=True)
class PredictiveDistribution:
    quantiles: QuantileVector
    bandwidth: float

    def __post_init__(self):
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise ValueError("bandwidth must be positive and finite")

    @classmethod
    def from_quantiles(cls, q: QuantileVector, bandwidth: float | None = None) -> "PredictiveDistribution":
        return cls(q, select_bandwidth(q) if bandwidth is None else float(bandwidth))


@dataclass(frozen=True)
class PredictionInterval:
    lower: float
    upper: float
    coverage: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("interval lower bound must be below upper bound")
        if not 0.0 < self.coverage < 1.0:
            raise ValueError("coverage must lie in (0, 1)")


def _interp_level(q: QuantileVector, tau: float) -> float:
    return float(np.interp(tau, q.levels.array, q.values))


def select_bandwidth(q: QuantileVector) -> float:
    """Silverman-style rule on the quantile values, floored at 1e-6 of their spread.

    ``b = 0.9 * min(sd, iqr / 1.34) * K ** (-1/5)``, with ``sd`` the population
    standard deviation of the values and ``iqr = Q(0.75) - Q(0.25)`` read off
    the quantile vector (linear in tau); if the levels do not bracket 0.25 and
    0.75 the sample IQR of the values is used instead.
    """
    v = q.values
    k = v.size
    if k < 2:
        raise ValueError("bandwidth selection needs at least 2 quantiles")
    spread = float(v[-1] - v[0])
    if not spread > 0:
        raise ValueError("degenerate quantile spread")
    lv = q.levels
    if lv[0] <= 0.25 and lv[-1] >= 0.75:
        iqr = _interp_level(q, 0.75) - _interp_level(q, 0.25)
    else:
        p75, p25 = np.percentile(v, [75, 25])
        iqr = float(p75 - p25)
    sd = float(v.std())
    scale = min(sd, iqr / 1.34) if iqr > 0 else sd
    return max(0.9 * scale * k ** (-0.2), 1e-6 * spread)


def _probe(d: PredictiveDistribution, y):
    y_arr = np.asarray(y, dtype=np.float64)
    pdf, cdf = kernels.mixture_pdf_cdf(
        d.quantiles.values[None, :], np.array([d.bandwidth]), y_arr.reshape(1, -1)
    )
    return pdf.reshape(y_arr.shape), cdf.reshape(y_arr.shape)


def _scalar_or_array(a):
    return float(a) if a.ndim == 0 else a


def pdf(d: PredictiveDistribution, y):
    return _scalar_or_array(_probe(d, y)[0])


def cdf(d: PredictiveDistribution, y):
    return _scalar_or_array(_probe(d, y)[1])


def survival(d: PredictiveDistribution, y):
    """P(RUL > y) = 1 - cdf."""
    return _scalar_or_array(1.0 - _probe(d, y)[1])


def prediction_interval(q: QuantileVector, alpha: float = 0.1, interpolate: bool = False) -> PredictionInterval:
    """``[Q(alpha/2), Q(1 - alpha/2)]`` taken directly from the quantile vector.

    Both levels must be present unless ``interpolate`` is set, in which case
    values are linear in tau between neighbouring levels (still no
    extrapolation outside ``[tau_1, tau_K]``).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    lo_tau, hi_tau = alpha / 2.0, 1.0 - alpha / 2.0
    levels = q.levels
    if interpolate:
        if lo_tau < levels[0] - 1e-12 or hi_tau > levels[-1] + 1e-12:
            raise KeyError(
                f"levels {lo_tau:g}/{hi_tau:g} fall outside [{levels[0]:g}, {levels[-1]:g}]"
            )
        lo, hi = _interp_level(q, lo_tau), _interp_level(q, hi_tau)
    else:
        if lo_tau not in levels or hi_tau not in levels:
            raise KeyError(
                f"alpha={alpha:g} needs levels {lo_tau:g} and {hi_tau:g}; "
                f"available levels: {', '.join(f'{t:g}' for t in levels)}"
            )
        lo, hi = q.at(lo_tau), q.at(hi_tau)
    return PredictionInterval(lo, hi, 1.0 - alpha)


def summary(d: PredictiveDistribution) -> dict:
    v = d.quantiles.values
    mean = float(v.mean())
    var = d.bandwidth**2 + float(((v - mean) ** 2).mean())
    median = d.quantiles.at(0.5) if 0.5 in d.quantiles.levels else _interp_level(d.quantiles, 0.5)
    return {"mean": mean, "median": median, "std": math.sqrt(var)}


def describe_survival(probability: float, threshold: float) -> str:
    """Plain-language reading of ``P(RUL > threshold)``."""
    return (
        f"{100.0 * probability:.0f}% chance of operating for at least an additional "
        f"{threshold:g} cycles"
    )
