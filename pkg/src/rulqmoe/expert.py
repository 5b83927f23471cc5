"""Chemistry expert: a residual MLP whose head emits non-crossing quantiles.

Layout (``H`` = hidden width, ``K`` = number of quantile levels)::

    h0 = proj(x)                                   # D -> H
    h1 = h0 + relu(fc1(dropout(norm1(h0))))
    h2 = h1 + relu(fc2(dropout(norm2(h1))))
    gaps = out_scale * softplus(gap(h2))           # H -> K, all > 0
    base = out_shift + out_scale * base_head(h2)   # H -> 1
    q_k  = base + gaps_1 + ... + gaps_k

``out_shift``/``out_scale`` are fixed label-standardization constants (in
cycles) so the trainable part works on unit-scale targets. Because every gap
is strictly positive, ``q_1 < q_2 < ... < q_K`` for any parameter values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import kernels
from .numcore import (
    DimensionError,
    LinearParams,
    NonFiniteError,
    NormParams,
    dropout_forward,
    init_linear,
    init_norm,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
    linear_forward,
)

DEFAULT_LEVELS = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95)


class QuantileLevels(tuple):
    """Strictly increasing quantile levels in (0, 1)."""

    def __new__(cls, taus: Sequence[float] = DEFAULT_LEVELS):
        taus = tuple(float(t) for t in taus)
        if not taus:
            raise ValueError("at least one quantile level is required")
        if any(not (0.0 < t < 1.0) for t in taus):
            raise ValueError(f"quantile levels must lie in (0, 1): {taus}")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValueError(f"quantile levels must be strictly increasing: {taus}")
        return super().__new__(cls, taus)

    def index(self, tau: float, *args) -> int:  # type: ignore[override]
        for i, t in enumerate(self):
            if abs(t - tau) < 1e-12:
                return i
        raise KeyError(f"level {tau} not among {list(self)}")

    def __contains__(self, tau) -> bool:  # type: ignore[override]
        return any(abs(t - float(tau)) < 1e-12 for t in self)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self, dtype=np.float64)


@dataclass
class ExpertParams:
    proj: LinearParams
    norm1: NormParams
    fc1: LinearParams
    norm2: NormParams
    fc2: LinearParams
    gap: LinearParams
    base: LinearParams
    dropout_rate: float = 0.0
    out_shift: float = 0.0
    out_scale: float = 1.0

    LAYERS = ("proj", "norm1", "fc1", "norm2", "fc2", "gap", "base")

    @property
    def input_dim(self) -> int:
        return self.proj.in_dim

    @property
    def hidden_dim(self) -> int:
        return self.proj.out_dim

    @property
    def n_quantiles(self) -> int:
        return self.gap.out_dim

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for layer in self.LAYERS:
            for name, arr in getattr(self, layer).arrays():
                yield f"{layer}.{name}", arr

    def copy(self) -> "ExpertParams":
        return ExpertParams(
            *(_copy_layer(getattr(self, name)) for name in self.LAYERS),
            dropout_rate=self.dropout_rate,
            out_shift=self.out_shift,
            out_scale=self.out_scale,
        )


def _copy_layer(layer):
    if isinstance(layer, LinearParams):
        return LinearParams(layer.weight.copy(), layer.bias.copy())
    return NormParams(layer.gamma.copy(), layer.beta.copy(), layer.epsilon)


@dataclass
class ExpertOutput:
    quantiles: np.ndarray  # (n, K), cycles
    gaps: np.ndarray  # (n, K), cycles, > 0
    base: np.ndarray  # (n,), cycles


def inverse_softplus(y: float) -> float:
    if y <= 0:
        raise ValueError("softplus is strictly positive")
    return float(y + np.log(-np.expm1(-y)))


def expert_init(
    input_dim: int,
    hidden_dim: int = 256,
    n_quantiles: int = len(DEFAULT_LEVELS),
    dropout_rate: float = 0.0,
    seed: int | np.random.Generator = 42,
    initial_gap: float = float(np.log(2.0)),
) -> ExpertParams:
    if n_quantiles < 2:
        raise ValueError("an expert needs at least 2 quantile levels")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError("dropout_rate must lie in [0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = ExpertParams(
        proj=init_linear(input_dim, hidden_dim, rng),
        norm1=init_norm(hidden_dim),
        fc1=init_linear(hidden_dim, hidden_dim, rng),
        norm2=init_norm(hidden_dim),
        fc2=init_linear(hidden_dim, hidden_dim, rng),
        gap=init_linear(hidden_dim, n_quantiles, rng),
        base=init_linear(hidden_dim, 1, rng),
        dropout_rate=dropout_rate,
    )
    p.gap.bias[:] = inverse_softplus(initial_gap)
    # start with the middle level near zero in standardized units
    p.base.bias[:] = -initial_gap * (n_quantiles + 1) / 2.0
    return p


def _check_input(p: ExpertParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != p.input_dim:
        raise DimensionError(f"expected features of width {p.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite value in expert input")
    return x


def _block_forward(h, norm, fc, rate, rng, train):
    n_out, n_cache = layer_norm_forward(h, norm)
    d, mask = dropout_forward(n_out, rate, rng, train)
    pre = linear_forward(d, fc)
    return h + np.maximum(pre, 0.0), (n_cache, d, mask, pre)


def _block_backward(dh_out, norm, fc, cache):
    n_cache, d, mask, pre = cache
    dpre = dh_out * (pre > 0)
    dd, dfc = linear_backward(d, fc, dpre)
    if mask is not None:
        dd = dd * mask
    dh, dnorm = layer_norm_backward(n_cache, norm, dd)
    return dh_out + dh, dnorm, dfc


def expert_forward_cached(p: ExpertParams, x, train_mode: bool = False, rng=None):
    x = _check_input(p, x)
    h0 = linear_forward(x, p.proj)
    h1, c1 = _block_forward(h0, p.norm1, p.fc1, p.dropout_rate, rng, train_mode)
    h2, c2 = _block_forward(h1, p.norm2, p.fc2, p.dropout_rate, rng, train_mode)
    gap_pre = linear_forward(h2, p.gap)
    base_n = linear_forward(h2, p.base)[:, 0]
    base = p.out_shift + p.out_scale * base_n
    gaps, q = kernels.quantile_head(gap_pre, base, p.out_scale)
    cache = (x, c1, h1, c2, h2, gap_pre)
    return ExpertOutput(q, gaps, base), cache


def expert_forward(p: ExpertParams, x, train_mode: bool = False, rng=None) -> ExpertOutput:
    """Quantiles for a single feature vector (1-D) or a batch (2-D)."""
    return expert_forward_cached(p, x, train_mode, rng)[0]


def expert_backward(p: ExpertParams, cache, dq: np.ndarray) -> ExpertParams:
    """Gradients of ``sum(dq * quantiles)`` w.r.t. every trainable array.

    Returned as an ``ExpertParams`` whose arrays hold the gradients.
    """
    x, c1, h1, c2, h2, gap_pre = cache
    dq = np.asarray(dq, dtype=np.float64)
    dgap_pre, dbase = kernels.quantile_head_backward(gap_pre, dq, p.out_scale)
    dh2, dgap = linear_backward(h2, p.gap, dgap_pre)
    dh2_b, dbase_l = linear_backward(h2, p.base, (p.out_scale * dbase)[:, None])
    dh2 = dh2 + dh2_b
    dh1, dnorm2, dfc2 = _block_backward(dh2, p.norm2, p.fc2, c2)
    dh0, dnorm1, dfc1 = _block_backward(dh1, p.norm1, p.fc1, c1)
    _, dproj = linear_backward(x, p.proj, dh0)
    return ExpertParams(
        dproj, dnorm1, dfc1, dnorm2, dfc2, dgap, dbase_l,
        dropout_rate=p.dropout_rate, out_shift=0.0, out_scale=0.0,
    )
