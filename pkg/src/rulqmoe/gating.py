"""Gating network: four affine layers, LeakyReLU between them, softmax on top."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .numcore import (
    DimensionError,
    LinearParams,
    NonFiniteError,
    init_linear,
    linear_backward,
    linear_forward,
    softmax,
    softmax_backward,
)

DEFAULT_GATE_HIDDEN = (256, 128, 64)


@dataclass
class GatingParams:
    layers: list[LinearParams] = field(default_factory=list)
    negative_slope: float = 0.01

    def __post_init__(self):
        if len(self.layers) != 4:
            raise ValueError(f"gating network has 4 layers, got {len(self.layers)}")
        if self.negative_slope < 0:
            raise ValueError("negative_slope must be >= 0")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError("gating layer widths do not chain")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def expert_count(self) -> int:
        return self.layers[-1].out_dim

    @property
    def hidden_dims(self) -> tuple[int, int, int]:
        return tuple(layer.out_dim for layer in self.layers[:3])  # type: ignore[return-value]

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, arr in layer.arrays():
                yield f"layer{i}.{name}", arr

    def copy(self) -> "GatingParams":
        return GatingParams(
            [LinearParams(l.weight.copy(), l.bias.copy()) for l in self.layers],
            self.negative_slope,
        )


def gating_init(
    input_dim: int,
    hidden: Sequence[int] = DEFAULT_GATE_HIDDEN,
    expert_count: int = 5,
    negative_slope: float = 0.01,
    seed: int | np.random.Generator = 42,
) -> GatingParams:
    if len(hidden) != 3:
        raise ValueError("gating network needs exactly three hidden widths")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    widths = [input_dim, *hidden, expert_count]
    layers = [init_linear(a, b, rng) for a, b in zip(widths, widths[1:])]
    return GatingParams(layers, negative_slope)


def gating_forward_cached(g: GatingParams, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != g.input_dim:
        raise DimensionError(f"gate expects {g.input_dim} features, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite value in gate input")
    inputs, pres = [], []
    h = x
    for i, layer in enumerate(g.layers):
        inputs.append(h)
        pre = linear_forward(h, layer)
        pres.append(pre)
        if i < 3:
            h = np.maximum(pre, 0.0) + g.negative_slope * np.minimum(pre, 0.0)
        else:
            h = softmax(pre)
    return h, (inputs, pres, h)


def gating_forward(g: GatingParams, x) -> np.ndarray:
    """Softmax weights over experts, shape ``(n, E)`` (or ``(E,)`` for one sample)."""
    p, _ = gating_forward_cached(g, x)
    return p[0] if np.ndim(x) == 1 else p


def gating_backward(g: GatingParams, cache, dp: np.ndarray) -> GatingParams:
    """Gradients of ``sum(dp * weights)`` w.r.t. gate parameters."""
    inputs, pres, p = cache
    dh = softmax_backward(p, np.asarray(dp, dtype=np.float64))
    grads: list[LinearParams] = [None] * 4  # type: ignore[list-item]
    for i in range(3, -1, -1):
        if i < 3:
            dh = dh * np.where(pres[i] > 0, 1.0, g.negative_slope)
        dh, grads[i] = linear_backward(inputs[i], g.layers[i], dh)
    return GatingParams(grads, g.negative_slope)
