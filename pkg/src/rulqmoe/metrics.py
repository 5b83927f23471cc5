"""Point-prediction metrics and interval coverage."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Metrics:
    mae: float
    mape: float  # percent
    rmse: float
    r2: float  # nan when all labels are equal
    n: int
    mape_excluded: int = 0  # samples with y == 0, left out of MAPE

    def as_row(self) -> dict:
        return {"n": self.n, "mae": self.mae, "mape": self.mape, "rmse": self.rmse, "r2": self.r2}


def compute_metrics(y, yhat) -> Metrics:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.size} labels vs {yhat.size} predictions")
    if y.size == 0:
        raise ValueError("metrics need at least one sample")
    err = y - yhat
    abs_err = np.abs(err)
    mae = float(abs_err.mean())
    # scale by the largest error so squaring cannot underflow or overflow
    peak = float(abs_err.max())
    rmse = peak * math.sqrt(float(((abs_err / peak) ** 2).mean())) if peak > 0 else 0.0
    nonzero = np.abs(y) > 0
    excluded = int(y.size - nonzero.sum())
    mape = float(100.0 * (abs_err[nonzero] / np.abs(y[nonzero])).mean()) if nonzero.any() else math.nan
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((err * err).sum()) / ss_tot if ss_tot > 0 else math.nan
    return Metrics(mae, mape, rmse, r2, int(y.size), excluded)


def interval_coverage(y, intervals) -> float:
    """Fraction of labels inside their interval (bounds inclusive).

    ``intervals`` is a sequence of objects with ``lower``/``upper`` or of
    ``(lower, upper)`` pairs, or an ``(n, 2)`` array.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("coverage of an empty set")
    if isinstance(intervals, np.ndarray):
        bounds = intervals.reshape(-1, 2)
    else:
        bounds = np.array([(iv.lower, iv.upper) if hasattr(iv, "lower") else tuple(iv) for iv in intervals])
    if bounds.shape[0] != y.size:
        raise ValueError(f"{y.size} labels but {bounds.shape[0]} intervals")
    inside = (bounds[:, 0] <= y) & (y <= bounds[:, 1])
    return float(inside.mean())
