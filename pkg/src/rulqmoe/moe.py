"""Mixture of chemistry experts, quantile-score loss, and two-stage training."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .dataio import CHEMISTRIES, DEFAULT_CURVE_CYCLE, SCHEMA_VERSION, Dataset, FeatureScaler
from .expert import (
    DEFAULT_LEVELS,
    ExpertParams,
    QuantileLevels,
    expert_backward,
    expert_forward_cached,
    expert_init,
)
from .gating import DEFAULT_GATE_HIDDEN, GatingParams, gating_backward, gating_forward_cached, gating_init
from .metrics import Metrics, compute_metrics
from .numcore import Adam, DimensionError

logger = logging.getLogger(__name__)


@dataclass
class MoEModel:
    experts: list[ExpertParams]
    gate: GatingParams
    levels: QuantileLevels = field(default_factory=QuantileLevels)
    scaler: FeatureScaler | None = None
    expert_order: tuple[str, ...] = CHEMISTRIES
    schema_version: str = SCHEMA_VERSION
    curve_cycle: int = DEFAULT_CURVE_CYCLE

    def __post_init__(self):
        self.levels = QuantileLevels(self.levels)
        self.expert_order = tuple(self.expert_order)
        if len(self.experts) != len(self.expert_order) or self.gate.expert_count != len(self.experts):
            raise DimensionError("expert count, expert order and gate width disagree")
        dims = {(e.input_dim, e.n_quantiles) for e in self.experts}
        if len(dims) != 1:
            raise DimensionError(f"experts disagree on (input_dim, K): {sorted(dims)}")
        input_dim, k = dims.pop()
        if k != len(self.levels):
            raise DimensionError(f"experts emit {k} quantiles for {len(self.levels)} levels")
        if self.gate.input_dim != input_dim:
            raise DimensionError("gate and experts see different input widths")
        if self.scaler is None:
            self.scaler = FeatureScaler.identity(input_dim)

    @property
    def input_dim(self) -> int:
        return self.experts[0].input_dim


@dataclass
class Prediction:
    quantiles: np.ndarray  # (n, K)
    gate: np.ndarray  # (n, E)


# ---------------------------------------------------------------------------
# forward / loss / backward


def _mixture_forward(experts, gate, Xs, train=False, rng=None):
    outs, caches = [], []
    for e in experts:
        out, cache = expert_forward_cached(e, Xs, train, rng)
        outs.append(out)
        caches.append(cache)
    p, gcache = gating_forward_cached(gate, Xs)
    base = sum(p[:, i] * o.base for i, o in enumerate(outs))
    gaps = sum(p[:, i : i + 1] * o.gaps for i, o in enumerate(outs))
    # summing mixed gaps (all > 0) keeps the output strictly increasing
    _, q = kernels.strict_cumsum(base, gaps)
    return q, p, (outs, caches, gcache)


def _mixture_backward(experts, gate, p, cache, dq):
    outs, caches, gcache = cache
    dp = np.stack([(dq * o.quantiles).sum(axis=1) for o in outs], axis=1)
    g_gate = gating_backward(gate, gcache, dp)
    g_experts = [expert_backward(e, c, p[:, i : i + 1] * dq) for i, (e, c) in enumerate(zip(experts, caches))]
    return g_experts, g_gate


def predict(m: MoEModel, X) -> Prediction:
    """Quantiles and gate weights for raw (unscaled) features."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != m.input_dim:
        raise DimensionError(
            f"feature width {X.shape[1]} does not match model schema ({m.input_dim}, {m.schema_version})"
        )
    if X.shape[0] == 0:
        return Prediction(np.empty((0, len(m.levels))), np.empty((0, len(m.experts))))
    q, p, _ = _mixture_forward(m.experts, m.gate, m.scaler.transform(X))
    return Prediction(q, p)


def moe_forward(m: MoEModel, x):
    """``Q(tau_k) = sum_i p_i Q_i(tau_k)``; a QuantileVector for one input, an array for a batch."""
    from .dist import QuantileVector

    pred = predict(m, x)
    if np.ndim(x) == 1:
        return QuantileVector(pred.quantiles[0], m.levels)
    return pred.quantiles


def quantile_score(y, q, levels=DEFAULT_LEVELS) -> float:
    """Mean pinball loss over levels (and over samples for a batch)."""
    q = np.asarray(q, dtype=np.float64)
    q2 = q.reshape(1, -1) if q.ndim == 1 else q
    y2 = np.asarray(y, dtype=np.float64).reshape(-1)
    taus = np.asarray(levels, dtype=np.float64)
    if q2.shape[1] != taus.size:
        raise DimensionError(f"{q2.shape[1]} quantiles for {taus.size} levels")
    return kernels.pinball(y2, q2, taus)[0]


def expert_loss_and_grads(e: ExpertParams, Xs, y, taus, train=False, rng=None):
    out, cache = expert_forward_cached(e, Xs, train, rng)
    loss, dq = kernels.pinball(y, out.quantiles, taus)
    return loss, expert_backward(e, cache, dq)


def moe_loss_and_grads(experts, gate, Xs, y, taus, train=False, rng=None):
    q, p, cache = _mixture_forward(experts, gate, Xs, train, rng)
    loss, dq = kernels.pinball(y, q, taus)
    g_experts, g_gate = _mixture_backward(experts, gate, p, cache, dq)
    return loss, g_experts, g_gate


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    hidden_dim: int = 256
    max_epochs: int = 500
    patience: int = 20
    split_ratio: float = 0.7
    seed: int = 42
    stage2_learning_rate: float = 1e-4
    dropout_rate: float = 0.0
    validation_fraction: float = 0.0  # > 0 carves validation out of the training split
    stage2_epochs: int | None = None  # total stage-2 budget; None -> max_epochs per phase
    stage2_warmup_epochs: int | None = None  # cap on the gate-only phase; None -> max_epochs
    gate_hidden: tuple[int, int, int] = DEFAULT_GATE_HIDDEN
    negative_slope: float = 0.01
    initial_gap: float = math.log(2.0)

    def __post_init__(self):
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.stage2_epochs is not None and self.stage2_epochs < 0:
            raise ValueError("stage2_epochs must be >= 0")
        if self.stage2_warmup_epochs is not None and self.stage2_warmup_epochs < 0:
            raise ValueError("stage2_warmup_epochs must be >= 0")
        if self.batch_size < 1 or self.hidden_dim < 1 or self.max_epochs < 0:
            raise ValueError("batch_size and hidden_dim must be positive, max_epochs >= 0")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.learning_rate <= 0 or self.stage2_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        self.gate_hidden = tuple(int(h) for h in self.gate_hidden)  # type: ignore[assignment]


@dataclass
class TrainReport:
    name: str
    train_loss: list[float] = field(default_factory=list)  # index 0 = before training
    val_loss: list[float] = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    seconds: float = 0.0
    warnings: list[str] = field(default_factory=list)
    skipped: bool = False
    baseline_val_loss: float | None = None  # stage 2: uniform mixture of warm-start experts
    warmup_epochs: int = 0  # stage 2: epochs of the gate-only phase (loss entries 1..warmup_epochs)

    @property
    def best_val_loss(self) -> float:
        return min(self.val_loss) if self.val_loss else math.nan

    @property
    def regressed(self) -> bool:
        return self.baseline_val_loss is not None and self.best_val_loss > self.baseline_val_loss


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.snapshot = None

    def update(self, epoch: int, loss: float, snapshot_fn) -> bool:
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.snapshot = snapshot_fn()
            return False
        return epoch - self.best_epoch >= self.patience


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _label_scaling(y: np.ndarray) -> tuple[float, float]:
    if y.size == 0:
        return 0.0, 1.0
    shift = float(y.mean())
    scale = float(y.std())
    if not scale > 1e-8 * max(1.0, abs(shift)):
        scale = max(0.1 * abs(shift), 1.0)
    return shift, scale


def _fit(report, state, loss_grads, eval_loss, n_train, cfg, max_epochs, seed_key):
    """Shared mini-batch loop with early stopping.

    ``state`` exposes ``snapshot()`` and ``restore(snap)``; ``loss_grads(idx,
    rng, epoch)`` performs one optimizer update on the rows ``idx`` and returns
    the batch loss; ``eval_loss(which)`` returns the full-pass loss on
    ``"train"`` or ``"val"`` in inference mode.
    """
    t0 = time.perf_counter()
    stopper = EarlyStopping(cfg.patience)
    report.train_loss.append(eval_loss("train"))
    report.val_loss.append(eval_loss("val"))
    stopper.update(0, report.val_loss[0], state.snapshot)
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, *seed_key, epoch])
        total = 0.0
        for idx in _batches(n_train, cfg.batch_size, rng):
            total += loss_grads(idx, rng, epoch) * idx.size
        report.train_loss.append(total / n_train)
        report.val_loss.append(eval_loss("val"))
        if stopper.update(epoch, report.val_loss[-1], state.snapshot):
            break
    state.restore(stopper.snapshot)
    report.stop_epoch = epoch
    report.best_epoch = stopper.best_epoch
    report.seconds = time.perf_counter() - t0
    return report


class _ExpertState:
    def __init__(self, expert: ExpertParams):
        self.expert = expert

    def snapshot(self):
        return self.expert.copy()

    def restore(self, snap):
        self.expert = snap


class _MixtureState:
    def __init__(self, experts, gate):
        self.experts = experts
        self.gate = gate

    def snapshot(self):
        return [e.copy() for e in self.experts], self.gate.copy()

    def restore(self, snap):
        self.experts, self.gate = snap


def _carve_validation(train: Dataset, val: Dataset | None, cfg: TrainConfig):
    if cfg.validation_fraction > 0:
        n = len(train)
        perm = np.random.default_rng([cfg.seed, 7]).permutation(n)
        n_val = max(1, int(math.floor(cfg.validation_fraction * n)))
        return train.subset(np.sort(perm[n_val:])), train.subset(np.sort(perm[:n_val]))
    if val is None or len(val) == 0:
        raise ValueError("a validation set is required when validation_fraction is 0")
    return train, val


@dataclass
class Stage1Result:
    experts: list[ExpertParams]
    reports: list[TrainReport]
    scaler: FeatureScaler
    levels: QuantileLevels


def train_expert(
    train_X: np.ndarray,
    train_y: np.ndarray,
    val_X: np.ndarray,
    val_y: np.ndarray,
    cfg: TrainConfig,
    levels=DEFAULT_LEVELS,
    seed_key: Sequence[int] = (1, 0),
    name: str = "expert",
    expert: ExpertParams | None = None,
):
    """Adam on the quantile score for one expert on already-scaled features."""
    levels = QuantileLevels(levels)
    taus = levels.array
    if expert is None:
        expert = expert_init(
            train_X.shape[1], cfg.hidden_dim, len(levels), cfg.dropout_rate,
            seed=np.random.default_rng([cfg.seed, *seed_key]), initial_gap=cfg.initial_gap,
        )
        expert.out_shift, expert.out_scale = _label_scaling(train_y)
    state = _ExpertState(expert)
    opt = Adam(cfg.learning_rate)

    def loss_grads(idx, rng, epoch):
        loss, g = expert_loss_and_grads(state.expert, train_X[idx], train_y[idx], taus, True, rng)
        opt.step(state.expert.arrays(), g.arrays())
        return loss

    def eval_loss(which):
        X, y = (train_X, train_y) if which == "train" else (val_X, val_y)
        out, _ = expert_forward_cached(state.expert, X)
        return kernels.pinball(y, out.quantiles, taus)[0]

    report = _fit(TrainReport(name), state, loss_grads, eval_loss, len(train_y), cfg, cfg.max_epochs, seed_key)
    return state.expert, report


def train_stage1(
    train: Dataset,
    val: Dataset | None,
    cfg: TrainConfig,
    levels=DEFAULT_LEVELS,
    scaler: FeatureScaler | None = None,
) -> Stage1Result:
    """Train one expert per chemistry on that chemistry's rows only.

    Chemistries with no training rows keep a freshly initialized expert and a
    warning in their report.
    """
    levels = QuantileLevels(levels)
    if len(train) == 0:
        raise ValueError("every chemistry partition is empty")
    train, val = _carve_validation(train, val, cfg)
    if scaler is None:
        scaler = FeatureScaler.fit(train.X)
    Xtr, Xva = scaler.transform(train.X), scaler.transform(val.X)
    experts, reports = [], []
    for i, chem in enumerate(CHEMISTRIES):
        tr = np.flatnonzero(train.chem == i)
        va = np.flatnonzero(val.chem == i)
        if tr.size == 0:
            msg = f"no training cells for {chem}; expert left at initialization"
            logger.warning(msg)
            e = expert_init(
                train.X.shape[1], cfg.hidden_dim, len(levels), cfg.dropout_rate,
                seed=np.random.default_rng([cfg.seed, 1, i]), initial_gap=cfg.initial_gap,
            )
            e.out_shift, e.out_scale = _label_scaling(train.y)
            experts.append(e)
            reports.append(TrainReport(f"stage1/{chem}", warnings=[msg], skipped=True))
            continue
        warnings = []
        if va.size == 0:
            msg = f"no validation cells for {chem}; early stopping on training loss"
            logger.warning(msg)
            warnings.append(msg)
            val_X, val_y = Xtr[tr], train.y[tr]
        else:
            val_X, val_y = Xva[va], val.y[va]
        e, rep = train_expert(
            Xtr[tr], train.y[tr], val_X, val_y, cfg, levels, seed_key=(1, i), name=f"stage1/{chem}"
        )
        rep.warnings.extend(warnings)
        experts.append(e)
        reports.append(rep)
    if all(r.skipped for r in reports):
        raise ValueError("every chemistry partition is empty")
    return Stage1Result(experts, reports, scaler, levels)


def train_stage2(
    train: Dataset,
    val: Dataset | None,
    stage1: Stage1Result,
    cfg: TrainConfig,
) -> tuple[MoEModel, TrainReport]:
    """Fresh gate on top of the warm-start experts, then joint fine-tuning.

    The gate is first trained alone, with its own early stopping, so that it
    commits to a routing before any expert can drift onto another chemistry's
    rows. Joint training then resumes from the best gate snapshot with the
    experts at ``cfg.stage2_learning_rate``. Both phases land in one report;
    ``report.warmup_epochs`` marks where the first one ended. A set
    ``cfg.stage2_epochs`` is a budget shared by the two phases, so 0 returns
    the warm-start experts under a freshly initialized gate.
    """
    experts = [e.copy() for e in stage1.experts]
    if len({(e.input_dim, e.n_quantiles, e.hidden_dim) for e in experts}) != 1:
        raise DimensionError("warm-start experts have incompatible shapes")
    levels = stage1.levels
    taus = levels.array
    train, val = _carve_validation(train, val, cfg)
    Xtr, Xva = stage1.scaler.transform(train.X), stage1.scaler.transform(val.X)
    gate = gating_init(
        experts[0].input_dim, cfg.gate_hidden, len(experts), cfg.negative_slope,
        seed=np.random.default_rng([cfg.seed, 2]),
    )
    state = _MixtureState(experts, gate)
    gate_opt = Adam(cfg.learning_rate)
    expert_opts = [Adam(cfg.stage2_learning_rate) for _ in experts]
    phase = {"joint": False}

    def loss_grads(idx, rng, epoch):
        loss, g_experts, g_gate = moe_loss_and_grads(
            state.experts, state.gate, Xtr[idx], train.y[idx], taus, True, rng
        )
        gate_opt.step(state.gate.arrays(), g_gate.arrays())
        if phase["joint"]:
            for e, g, opt in zip(state.experts, g_experts, expert_opts):
                opt.step(e.arrays(), g.arrays())
        return loss

    def eval_loss(which):
        X, y = (Xtr, train.y) if which == "train" else (Xva, val.y)
        q, _, _ = _mixture_forward(state.experts, state.gate, X)
        return kernels.pinball(y, q, taus)[0]

    t0 = time.perf_counter()
    report = TrainReport("stage2")
    report.baseline_val_loss = uniform_mixture_loss(experts, Xva, val.y, taus)
    warmup = cfg.max_epochs if cfg.stage2_warmup_epochs is None else cfg.stage2_warmup_epochs
    if cfg.stage2_epochs is not None:
        warmup = min(warmup, cfg.stage2_epochs)
    _fit(report, state, loss_grads, eval_loss, len(train), cfg, warmup, (2, 0))
    report.warmup_epochs = report.stop_epoch
    best_gate_epoch = report.best_epoch

    phase["joint"] = True
    joint = TrainReport("stage2")
    if cfg.stage2_epochs is None:
        epochs = cfg.max_epochs
    else:
        epochs = cfg.stage2_epochs - report.warmup_epochs
    _fit(joint, state, loss_grads, eval_loss, len(train), cfg, epochs, (2, 1))
    # joint.*_loss[0] repeats the restored warm-up optimum, so it is dropped
    report.train_loss.extend(joint.train_loss[1:])
    report.val_loss.extend(joint.val_loss[1:])
    report.stop_epoch = report.warmup_epochs + joint.stop_epoch
    report.best_epoch = report.warmup_epochs + joint.best_epoch if joint.best_epoch else best_gate_epoch
    report.seconds = time.perf_counter() - t0
    if report.regressed:
        msg = (
            f"stage-2 validation QS {report.best_val_loss:.6g} exceeds the uniform "
            f"frozen-expert mixture ({report.baseline_val_loss:.6g})"
        )
        logger.warning(msg)
        report.warnings.append(msg)
    model = MoEModel(state.experts, state.gate, levels, stage1.scaler)
    return model, report


def uniform_mixture_loss(experts, Xs, y, taus) -> float:
    """Quantile score of the equal-weight mixture of fixed experts."""
    outs = [expert_forward_cached(e, Xs)[0] for e in experts]
    w = 1.0 / len(outs)
    base = sum(w * o.base for o in outs)
    gaps = sum(w * o.gaps for o in outs)
    q = base[:, None] + np.cumsum(gaps, axis=1)
    return kernels.pinball(y, q, taus)[0]


def train_moe(train: Dataset, val: Dataset | None, cfg: TrainConfig, levels=DEFAULT_LEVELS):
    """Both stages; returns ``(model, [stage-1 reports..., stage-2 report])``."""
    stage1 = train_stage1(train, val, cfg, levels)
    model, report = train_stage2(train, val, stage1, cfg)
    return model, [*stage1.reports, report]


def evaluate_point(m: MoEModel, data: Dataset) -> Metrics:
    """Metrics of the conditional median against the labels."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if 0.5 not in m.levels:
        raise KeyError(f"median level 0.5 not among {list(m.levels)}")
    q = predict(m, data.X).quantiles
    return compute_metrics(data.y, q[:, m.levels.index(0.5)])


def report_rows(reports: Sequence[TrainReport]):
    """Rows ``(stage, expert, epoch, train_qs, val_qs)`` for the loss CSV."""
    for r in reports:
        stage, _, who = r.name.partition("/")
        for epoch, (tl, vl) in enumerate(zip(r.train_loss, r.val_loss)):
            yield stage, who or "ALL", epoch, tl, vl
