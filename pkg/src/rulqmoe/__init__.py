"""Non-crossing multi-quantile mixture of experts for battery RUL prediction."""

from .dataio import CHEMISTRIES, FEATURE_DIM, SCHEMA_VERSION, build_dataset, build_features, parse_cells
from .dist import (
    PredictionInterval,
    PredictiveDistribution,
    QuantileVector,
    cdf,
    pdf,
    prediction_interval,
    select_bandwidth,
    summary,
    survival,
)
from .expert import DEFAULT_LEVELS, QuantileLevels, expert_forward, expert_init
from .gating import gating_forward, gating_init
from .kernels import BACKEND
from .metrics import Metrics, compute_metrics, interval_coverage
from .modelfile import load_model, save_model
from .moe import MoEModel, TrainConfig, evaluate_point, moe_forward, predict, quantile_score, train_moe

__version__ = "0.1.0"
