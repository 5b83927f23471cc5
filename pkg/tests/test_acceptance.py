"""Acceptance checks, one per criterion.

Every test records a single ``[PASS]``/``[FAIL]`` line and then asserts. The
lines are printed together in pytest's terminal summary (see conftest.py).
Tolerances are the ones fixed by the acceptance contract. The file also runs
directly: ``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import sys
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate
from scipy.special import ndtri

sys.path.insert(0, str(Path(__file__).parent))
from oracles import MixtureLoss, relative_error  # noqa: E402

from rulqmoe import cli, dataio  # noqa: E402
from rulqmoe.dataio import CHEMISTRIES, CellRecord, Curve, Dataset, SynthSpec  # noqa: E402
from rulqmoe.dist import (  # noqa: E402
    PredictiveDistribution,
    QuantileVector,
    cdf,
    pdf,
    prediction_interval,
    select_bandwidth,
    survival,
)
from rulqmoe.expert import DEFAULT_LEVELS, QuantileLevels, expert_forward, expert_init  # noqa: E402
from rulqmoe.gating import gating_init  # noqa: E402
from rulqmoe.metrics import compute_metrics  # noqa: E402
from rulqmoe.modelfile import dumps, load_model, loads, save_model  # noqa: E402
from rulqmoe.moe import (  # noqa: E402
    MoEModel,
    TrainConfig,
    moe_forward,
    moe_loss_and_grads,
    predict,
    train_stage1,
    train_stage2,
)
from rulqmoe.numcore import flatten  # noqa: E402

pytestmark = pytest.mark.acceptance


VERDICTS: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. non-crossing under fuzzing


def _fuzz_expert(rng, d, k):
    h = int(rng.integers(1, 17))
    e = expert_init(d, h, k, seed=rng)
    for _, a in e.arrays():
        a[...] = rng.standard_normal(a.shape) * 10.0 ** rng.uniform(-2, 2)
    e.out_shift = float(rng.normal(0, 1e4))
    e.out_scale = float(10.0 ** rng.uniform(-3, 3))
    return e


def _fuzz_levels(rng, k):
    while True:
        taus = np.sort(rng.uniform(0.001, 0.999, k))
        if np.all(np.diff(taus) > 0):
            return QuantileLevels(taus)


def test_criterion_1_non_crossing():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    checked = bad = 0
    for _ in range(250):
        d, k = int(rng.integers(1, 9)), int(rng.integers(2, 16))
        x = rng.standard_normal((20, d)) * 10.0 ** rng.uniform(-3, 3, size=(20, 1))
        e = _fuzz_expert(rng, d, k)
        q = expert_forward(e, x).quantiles
        bad += int(np.sum(~np.all(np.diff(q, axis=1) > 0, axis=1)))
        checked += len(x)

        experts = [_fuzz_expert(rng, d, k) for _ in CHEMISTRIES]
        gate = gating_init(d, tuple(int(v) for v in rng.integers(1, 9, 3)), len(CHEMISTRIES), 0.01, seed=rng)
        for _, a in gate.arrays():
            a[...] = rng.standard_normal(a.shape) * 10.0 ** rng.uniform(-2, 2)
        m = MoEModel(experts, gate, _fuzz_levels(rng, k))
        qm = moe_forward(m, x)
        bad += int(np.sum(~np.all(np.diff(qm, axis=1) > 0, axis=1)))
        checked += len(x)
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and checked == 10_000 and elapsed < 60
    verdict(1, "non-crossing quantiles", ok, f"{checked} pairs, {bad} violations, {elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------------------------
# 2. gradients against an extended-precision finite-difference oracle


def _random_point(seed):
    rng = np.random.default_rng([123, seed])
    experts = []
    for _ in CHEMISTRIES:
        e = expert_init(4, 6, len(DEFAULT_LEVELS), seed=rng)
        for _, a in e.arrays():
            a += 0.3 * rng.standard_normal(a.shape)
        e.out_shift = float(rng.normal(0, 3))
        e.out_scale = float(rng.uniform(0.5, 3))
        experts.append(e)
    gate = gating_init(4, (6, 5, 4), len(CHEMISTRIES), 0.01, seed=rng)
    for _, a in gate.arrays():
        a += 0.1 * rng.standard_normal(a.shape)
    X = rng.standard_normal((8, 4))
    y = rng.normal(0, 3, 8)
    return experts, gate, X, y


def test_criterion_2_gradients():
    taus = np.asarray(DEFAULT_LEVELS)
    t0 = time.perf_counter()
    worst = 0.0
    for point in range(20):
        experts, gate, X, y = _random_point(point)
        _, g_experts, g_gate = moe_loss_and_grads(experts, gate, X, y, taus)
        analytic = np.concatenate([flatten(g.arrays()) for g in g_experts] + [flatten(g_gate.arrays())])
        ref = MixtureLoss(experts, gate, X, y, taus)
        vec = np.concatenate([flatten(e.arrays()) for e in experts] + [flatten(gate.arrays())])
        worst = max(worst, relative_error(analytic, ref.numeric_grad(vec)))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 120
    verdict(2, "gradient correctness", ok, f"max rel err {worst:.2e} (< 1e-4) over 20 points, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. distribution coherence against adaptive quadrature


def _quad_pdf(d, lo, hi):
    """Integral of the mixture pdf over [lo, hi], split at every kernel's bulk."""
    c, b = d.quantiles.values, d.bandwidth
    marks = np.concatenate([c, c - 3 * b, c + 3 * b, c - 8 * b, c + 8 * b])
    marks = np.unique(np.clip(marks, lo, hi))
    edges = np.unique(np.concatenate([[lo], marks, [hi]]))
    total = 0.0
    for a, z in zip(edges[:-1], edges[1:]):
        total += integrate.quad(lambda t: pdf(d, t), a, z, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
    return total


def _random_distribution(rng):
    k = int(rng.integers(2, 16))
    levels = _fuzz_levels(rng, k)
    values = np.cumsum(rng.exponential(1.0, k) * 10.0 ** rng.uniform(-1, 3)) + rng.normal(0, 1000)
    q = QuantileVector(values, levels)
    b = select_bandwidth(q) * (10.0 ** rng.uniform(-0.5, 0.5) if rng.random() < 0.5 else 1.0)
    return PredictiveDistribution(q, b)


def test_criterion_3_distribution_coherence():
    rng = np.random.default_rng(77)
    worst_mass = worst_cdf = 0.0
    monotone = exact = True
    for _ in range(100):
        d = _random_distribution(rng)
        v, b = d.quantiles.values, d.bandwidth
        lo, hi = v[0] - 40 * b, v[-1] + 40 * b
        worst_mass = max(worst_mass, abs(_quad_pdf(d, lo, hi) - 1.0))
        grid = np.linspace(v[0] - 5 * b, v[-1] + 5 * b, 1000)
        F = cdf(d, grid)
        monotone &= bool(np.all(np.diff(F) >= 0))
        exact &= bool(np.all(survival(d, grid) + F == 1.0))
        for y in rng.choice(grid, 5, replace=False):
            worst_cdf = max(worst_cdf, abs(_quad_pdf(d, lo, y) - cdf(d, y)))
    ok = worst_mass < 1e-6 and worst_cdf < 1e-8 and monotone and exact
    verdict(
        3,
        "distribution coherence",
        ok,
        f"|mass-1| {worst_mass:.1e} (< 1e-6), |cdf-quad| {worst_cdf:.1e} (< 1e-8), "
        f"cdf monotone={monotone}, S+F==1 exactly={exact}",
    )


# ---------------------------------------------------------------------------
# 4 and 6. synthetic Gaussian task with closed-form quantiles

SIGMA = 20.0


def _gaussian_rows(n, rng):
    x = rng.uniform(-1, 1, size=(n, 1))
    mu = 500.0 + 150.0 * x[:, 0]
    return Dataset(x, mu + SIGMA * rng.standard_normal(n), np.zeros(n, dtype=int), [str(i) for i in range(n)])


@lru_cache(maxsize=1)
def _gaussian_fit():
    rng = np.random.default_rng(0)
    train, val, test = _gaussian_rows(5000, rng), _gaussian_rows(2000, rng), _gaussian_rows(2000, rng)
    t0 = time.perf_counter()
    result = train_stage1(train, val, TrainConfig(hidden_dim=32, seed=42))
    return result, test, time.perf_counter() - t0


def test_criterion_4_quantile_recovery():
    result, test, seconds = _gaussian_fit()
    e, scaler = result.experts[0], result.scaler
    grid = np.linspace(-1, 1, 201)[:, None]
    truth = 500.0 + 150.0 * grid + SIGMA * ndtri(np.asarray(DEFAULT_LEVELS))[None, :]
    q = expert_forward(e, scaler.transform(grid)).quantiles
    mad = float(np.abs(q - truth).mean()) / SIGMA
    median = expert_forward(e, scaler.transform(test.X)).quantiles[:, DEFAULT_LEVELS.index(0.5)]
    r2 = compute_metrics(test.y, median).r2
    ok = mad < 0.15 and r2 >= 0.9 and seconds < 300
    verdict(4, "quantile recovery", ok, f"MAD {mad:.3f} sigma (< 0.15), median R2 {r2:.3f} (>= 0.9), {seconds:.1f}s")


def test_criterion_6_calibration():
    result, test, _ = _gaussian_fit()
    q = expert_forward(result.experts[0], result.scaler.transform(test.X)).quantiles
    inside = 0
    for y, row in zip(test.y, q):
        pi = prediction_interval(QuantileVector(row, DEFAULT_LEVELS), alpha=0.1)
        inside += pi.lower <= y <= pi.upper
    coverage = inside / len(test.y)
    verdict(6, "90% PI calibration", 0.85 <= coverage <= 0.95, f"coverage {coverage:.3f} in [0.85, 0.95]")


# ---------------------------------------------------------------------------
# 5. routing after the two-stage protocol


def test_criterion_5_routing():
    records = dataio.synth_generate(SynthSpec({"LFP": 1000, "NMC": 1000, "LCO": 1000}, seed=7))
    train_recs, test_recs = dataio.split(records, 0.7, 42)
    train, test = dataio.build_dataset(train_recs), dataio.build_dataset(test_recs)
    cfg = TrainConfig(hidden_dim=32, gate_hidden=(32, 16, 8), max_epochs=1000, seed=42)
    stage1 = train_stage1(train, test, cfg)
    model, report = train_stage2(train, test, stage1, cfg)
    gate = predict(model, test.X).gate
    accuracy = float(np.mean(gate.argmax(axis=1) == test.chem))
    ok = accuracy >= 0.95 and report.best_val_loss <= report.baseline_val_loss
    verdict(
        5,
        "routing",
        ok,
        f"argmax accuracy {accuracy:.3f} (>= 0.95), stage-2 val QS {report.best_val_loss:.3f} "
        f"<= uniform mixture {report.baseline_val_loss:.3f}",
    )


# ---------------------------------------------------------------------------
# 7. metric oracle


def test_criterion_7_metric_oracle():
    m = compute_metrics([100.0, 200.0], [110.0, 180.0])
    fixture = {
        "MAE 15": abs(m.mae - 15.0) < 1e-12,
        "MAPE 7.5%": abs(m.mape - 7.5) < 1e-9,
        "RMSE 15.8114": abs(m.rmse - 15.8114) < 1e-3,
        "R2 0.9": abs(m.r2 - 0.9) < 1e-12,
    }
    rng = np.random.default_rng(7)
    rmse_ge_mae = all(
        (mm := compute_metrics(rng.normal(500, 200, n), rng.normal(500, 200, n))).rmse >= mm.mae
        for n in rng.integers(1, 200, 1000)
    )
    failed = [k for k, v in fixture.items() if not v]
    detail = (
        f"MAE {m.mae:g}, MAPE {m.mape:g}%, RMSE {m.rmse:.4f}, R2 {m.r2:g}; RMSE>=MAE on 1000 sets={rmse_ge_mae}"
        + (f"; mismatched: {', '.join(failed)}" if failed else "")
    )
    verdict(7, "metric oracle", not failed and rmse_ge_mae, detail)


# ---------------------------------------------------------------------------
# 8. determinism and persistence


def test_criterion_8_determinism_and_persistence(tmp_path):
    data = tmp_path / "cells.jsonl"
    dataio.write_cells(data, dataio.synth_generate(SynthSpec({"LFP": 30, "NCA": 30, "LCO": 30}, seed=3)))
    conf = tmp_path / "run.conf"
    conf.write_text("hidden_dim = 16\ngate_hidden = 16,8,8\nmax_epochs = 40\npatience = 5\n", encoding="utf-8")
    for run in ("a", "b"):
        code = cli.main(["train", "--data", str(data), "--config", str(conf), "--seed", "5", "--out", str(tmp_path / run)])
        assert code == 0
    reports_equal = (tmp_path / "a/report.csv").read_bytes() == (tmp_path / "b/report.csv").read_bytes()

    model = load_model(tmp_path / "a/model.qmoe")
    save_model(model, tmp_path / "again.qmoe")
    reloaded = load_model(tmp_path / "again.qmoe")
    params_equal = dumps(model) == dumps(reloaded) and all(
        a.tobytes() == b.tobytes()
        for x, y in zip(model.experts, reloaded.experts)
        for (_, a), (_, b) in zip(x.arrays(), y.arrays())
    )
    X = dataio.build_dataset(dataio.parse_cells(data)).X
    preds_equal = predict(model, X).quantiles.tobytes() == predict(reloaded, X).quantiles.tobytes()
    in_memory = loads(dumps(model))
    preds_equal &= predict(in_memory, X).quantiles.tobytes() == predict(model, X).quantiles.tobytes()
    ok = reports_equal and params_equal and preds_equal
    verdict(
        8,
        "determinism and persistence",
        ok,
        f"reports byte-identical={reports_equal}, params bit-exact={params_equal}, predictions bit-exact={preds_equal}",
    )


# ---------------------------------------------------------------------------
# 9. feature pipeline


def test_criterion_9_feature_pipeline():
    rng = np.random.default_rng(9)
    records = dataio.synth_generate(SynthSpec({c: 20 for c in CHEMISTRIES}, seed=11))
    for i in range(200):
        cap = float(rng.uniform(0.5, 5))
        caps = np.sort(rng.uniform(0, cap * 1.1, int(rng.integers(2, 50))))
        caps = np.unique(caps)
        if caps.size < 2:
            continue
        volts = np.sort(rng.uniform(2.0, 4.2, caps.size))[::-1]
        records.append(
            CellRecord(
                f"r{i}", CHEMISTRIES[i % 5], cap, 2.0, 4.2, float(rng.uniform(0.1, 3)), float(rng.uniform(0.1, 3)),
                float(rng.uniform(0, 3000)), [Curve(100, np.column_stack([caps, volts]))],
            )
        )
    lengths_ok = onehot_ok = True
    for r in records:
        f = dataio.build_features(r)
        lengths_ok &= f.shape == (1010,)
        block = f[:5]
        onehot_ok &= bool(set(block.tolist()) <= {0.0, 1.0} and block.sum() == 1.0)
        onehot_ok &= bool(block[CHEMISTRIES.index(r.chemistry)] == 1.0)

    small = dataio.interpolate_curve([(0.0, 4.2), (1.1, 2.7)], [0.0, 0.55, 1.1])
    small_ok = small.tolist() == [4.2, 3.45, 2.7]
    # V = 4 - c / 1024 sampled every 37 units; the 1000-point grid on [0, 999] is the integers
    caps = np.arange(0, 1000, 37, dtype=float)
    full = dataio.interpolate_curve(np.column_stack([caps, 4.0 - caps / 1024.0]), dataio.capacity_grid(999.0))
    grid_exact = dataio.capacity_grid(999.0).tolist() == list(range(1000))
    truth = 4.0 - np.arange(1000) / 1024.0
    truth[caps[-1].astype(int) + 1 :] = 4.0 - caps[-1] / 1024.0  # clamp past the last measurement
    full_ok = grid_exact and bool(np.array_equal(full, truth))
    ok = lengths_ok and onehot_ok and small_ok and full_ok
    verdict(
        9,
        "feature pipeline",
        ok,
        f"{len(records)} records length 1010={lengths_ok}, one-hot valid={onehot_ok}, "
        f"linear fixtures exact={small_ok and full_ok}",
    )


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
