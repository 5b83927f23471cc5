"""Independent reference implementations used as test oracles.

Nothing here imports the package's forward or backward code: the mixture
forward pass is re-derived directly from the model definition and evaluated
in extended precision (``np.longdouble``), so central differences taken on it
are accurate well past the 1e-4 relative tolerance even for gradients that
are tiny in float64.
"""

from __future__ import annotations

import numpy as np

LD = np.longdouble


def _ld(a):
    return np.asarray(a, dtype=LD)


def ref_linear(x, w, b):
    return x @ _ld(w).T + _ld(b)


def ref_layer_norm(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LD(eps)) * _ld(gamma) + _ld(beta)


def ref_softplus(z):
    return np.where(z > 0, z + np.log1p(np.exp(-np.abs(z))), np.log1p(np.exp(z)))


def ref_expert(arrays: dict, shift: float, scale: float, eps: float, x):
    """Quantiles of one expert from its named arrays (no dropout)."""
    a = arrays
    h = ref_linear(x, a["proj.weight"], a["proj.bias"])
    for n, fc in (("norm1", "fc1"), ("norm2", "fc2")):
        z = ref_layer_norm(h, a[f"{n}.gamma"], a[f"{n}.beta"], eps)
        h = h + np.maximum(ref_linear(z, a[f"{fc}.weight"], a[f"{fc}.bias"]), LD(0))
    gaps = LD(scale) * ref_softplus(ref_linear(h, a["gap.weight"], a["gap.bias"]))
    base = LD(shift) + LD(scale) * ref_linear(h, a["base.weight"], a["base.bias"])[:, 0]
    return base[:, None] + np.cumsum(gaps, axis=1)


def ref_gate(arrays: dict, slope: float, x):
    h = x
    for i in range(4):
        pre = ref_linear(h, arrays[f"layer{i}.weight"], arrays[f"layer{i}.bias"])
        if i < 3:
            h = np.where(pre > 0, pre, LD(slope) * pre)
        else:
            z = pre - pre.max(axis=1, keepdims=True)
            e = np.exp(z)
            h = e / e.sum(axis=1, keepdims=True)
    return h


def ref_pinball(y, q, taus):
    u = _ld(y)[:, None] - q
    t = _ld(taus)[None, :]
    return np.maximum(t * u, (t - 1) * u).mean()


class MixtureLoss:
    """Quantile score of the gated mixture as a function of one flat vector.

    ``experts`` and ``gate`` are the package's parameter objects; only their
    shapes, fixed scalars and the ordering of ``arrays()`` are used here.
    """

    def __init__(self, experts, gate, X, y, taus):
        self.names = []
        self.shapes = []
        for i, e in enumerate(experts):
            for n, arr in e.arrays():
                self.names.append(("e", i, n))
                self.shapes.append(arr.shape)
        for n, arr in gate.arrays():
            self.names.append(("g", 0, n))
            self.shapes.append(arr.shape)
        self.fixed = [(e.out_shift, e.out_scale, e.norm1.epsilon) for e in experts]
        self.slope = gate.negative_slope
        self.n_experts = len(experts)
        self.X, self.y, self.taus = _ld(X), y, taus

    def unflatten(self, vec):
        out = {"g": {}, "e": [dict() for _ in range(self.n_experts)]}
        off = 0
        for (kind, i, n), shape in zip(self.names, self.shapes):
            size = int(np.prod(shape))
            block = vec[off : off + size].reshape(shape)
            off += size
            if kind == "g":
                out["g"][n] = block
            else:
                out["e"][i][n] = block
        return out

    def __call__(self, vec) -> LD:
        parts = self.unflatten(_ld(vec))
        p = ref_gate(parts["g"], self.slope, self.X)
        q = sum(
            p[:, i : i + 1] * ref_expert(parts["e"][i], *self.fixed[i], self.X)
            for i in range(self.n_experts)
        )
        return ref_pinball(self.y, q, self.taus)

    def numeric_grad(self, vec, h=1e-6):
        vec = _ld(vec).copy()
        g = np.empty(vec.size, dtype=LD)
        for j in range(vec.size):
            orig = vec[j]
            vec[j] = orig + LD(h)
            fp = self(vec)
            vec[j] = orig - LD(h)
            fm = self(vec)
            vec[j] = orig
            g[j] = (fp - fm) / (2 * LD(h))
        return g


def relative_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=LD)
    n = np.asarray(numeric, dtype=LD)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), LD(floor))))
