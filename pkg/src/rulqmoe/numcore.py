"""Minimal differentiable building blocks for the fixed QMoE architecture.

Every layer is a pair of functions: a forward that returns its output (plus
whatever the backward needs) and a backward that maps an upstream gradient to
input and parameter gradients. Arrays are float64 throughout; batches are
``(n_samples, n_features)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Array shapes do not line up."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf where finite values are required."""


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class LinearParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"weight {self.weight.shape} and bias {self.bias.shape} are inconsistent"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "weight", self.weight
        yield "bias", self.bias


@dataclass
class NormParams:
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise DimensionError("gamma and beta must be vectors of equal length")

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "gamma", self.gamma
        yield "beta", self.beta


def init_linear(in_dim: int, out_dim: int, rng: np.random.Generator) -> LinearParams:
    """Uniform(-1/sqrt(in), 1/sqrt(in)) weights, zero bias."""
    if in_dim <= 0 or out_dim <= 0:
        raise DimensionError("layer widths must be positive")
    limit = 1.0 / np.sqrt(in_dim)
    return LinearParams(rng.uniform(-limit, limit, size=(out_dim, in_dim)), np.zeros(out_dim))


def init_norm(dim: int, epsilon: float = 1e-5) -> NormParams:
    return NormParams(np.ones(dim), np.zeros(dim), epsilon)


# ---------------------------------------------------------------------------
# affine


def linear_forward(x, p: LinearParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.in_dim:
        raise DimensionError(f"input has {x.shape[-1]} features, layer expects {p.in_dim}")
    return x @ p.weight.T + p.bias


def linear_backward(x: np.ndarray, p: LinearParams, dout: np.ndarray):
    """Returns ``(dx, LinearParams(dW, db))`` for a batch ``x``."""
    dx = dout @ p.weight
    return dx, LinearParams(dout.T @ x, dout.sum(axis=0))


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x, p: NormParams) -> np.ndarray:
    return layer_norm_forward(x, p)[0]


def layer_norm_forward(x, p: NormParams):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise DimensionError("layer_norm of an empty vector")
    if x.shape[-1] != p.gamma.shape[0]:
        raise DimensionError(f"input has {x.shape[-1]} features, norm expects {p.gamma.shape[0]}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.epsilon) if p.epsilon > 0 else _safe_inv_sqrt(var)
    xhat = centered * inv_std
    return xhat * p.gamma + p.beta, (xhat, inv_std)


def _safe_inv_sqrt(var):
    # epsilon == 0: constant rows have xhat == 0 regardless, so any finite scale works
    return np.where(var > 0, 1.0 / np.sqrt(np.where(var > 0, var, 1.0)), 0.0)


def layer_norm_backward(cache, p: NormParams, dout: np.ndarray):
    xhat, inv_std = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * p.gamma
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, NormParams(dgamma, dbeta, p.epsilon)


# ---------------------------------------------------------------------------
# activations


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def leaky_relu(x, theta: float = 0.01):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + theta * np.minimum(x, 0.0)


def softplus(x):
    """ln(1 + e^x), stable at both tails (strictly positive down to x = -700)."""
    return kernels.softplus(np.asarray(x, dtype=np.float64))


def activation(x, kind: str = "relu", theta: float = 0.01):
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, theta)
    if kind == "softplus":
        return softplus(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(x, kind: str = "relu", theta: float = 0.01):
    """Elementwise derivative; the kink at 0 takes the left-hand slope."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "leaky_relu":
        return np.where(x > 0, 1.0, theta)
    if kind == "softplus":
        return kernels.sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def dropout_forward(x: np.ndarray, rate: float, rng: np.random.Generator | None, train: bool):
    """Inverted dropout. Returns ``(out, mask)``; mask is None when inactive."""
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_adam: float = 1e-8
    learning_rate: float = 1e-3

    @classmethod
    def zeros_like(cls, params: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, name: str = "params") -> np.ndarray:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise DimensionError(f"{name}: params {params.shape}, grads {grads.shape} and state disagree")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteError(f"non-finite gradient in parameter block {name!r}")
    state.step_count += 1
    m, v = state.first_moment, state.second_moment
    m *= state.beta1
    m += (1.0 - state.beta1) * grads
    v *= state.beta2
    v += (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**state.step_count)
    v_hat = v / (1.0 - state.beta2**state.step_count)
    params -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon_adam)
    return params


@dataclass
class Adam:
    """Adam over a fixed list of named arrays, one AdamState per array."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    states: dict = field(default_factory=dict)

    def step(self, named_params, named_grads) -> None:
        for (name, p), (gname, g) in zip(named_params, named_grads):
            if name != gname:
                raise DimensionError(f"parameter {name!r} paired with gradient {gname!r}")
            state = self.states.get(name)
            if state is None:
                state = AdamState.zeros_like(
                    p,
                    beta1=self.beta1,
                    beta2=self.beta2,
                    epsilon_adam=self.epsilon,
                    learning_rate=self.learning_rate,
                )
                self.states[name] = state
            adam_step(p, g, state, name)


# ---------------------------------------------------------------------------
# flat views and gradient checking


def flatten(named_arrays) -> np.ndarray:
    return np.concatenate([a.ravel() for _, a in named_arrays])


def assign_flat(named_arrays, vec: np.ndarray) -> None:
    """Copy ``vec`` back into the arrays, in order, in place."""
    named_arrays = list(named_arrays)
    total = sum(a.size for _, a in named_arrays)
    if total != vec.size:
        raise DimensionError(f"flat vector has {vec.size} entries, parameters need {total}")
    offset = 0
    for _, a in named_arrays:
        n = a.size
        a[...] = vec[offset : offset + n].reshape(a.shape)
        offset += n


def grad_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    h: float = 1e-5,
    indices=None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(p)`` returns ``(loss, grad)``. The relative error of a coordinate
    is ``|a - n| / max(|a|, |n|, 1e-8)``. ``indices`` restricts the check to a
    subset of coordinates.
    """
    p = np.array(params, dtype=np.float64, copy=True)
    _, analytic = loss_fn(p.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    flat = p.ravel()
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = loss_fn(p.copy())[0]
        flat[i] = orig - h
        f_minus = loss_fn(p.copy())[0]
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
