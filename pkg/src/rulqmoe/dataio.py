"""Cell records, the 1010-wide feature layout, splitting, and synthetic cells.

Feature layout (``SCHEMA_VERSION``)::

    [0:5]     one-hot chemistry, order LFP, NCA, NMC, LCO, NMC_LCO
    [5]       nominal capacity (Ah)
    [6]       minimum voltage (V)
    [7]       maximum voltage (V)
    [8]       charge C-rate
    [9]       discharge C-rate
    [10:1010] discharge voltage at 1000 capacities evenly spaced on
              [0, nominal capacity], from the curve at ``curve_cycle``

Cell files are JSON Lines, one cell per line.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtri

logger = logging.getLogger(__name__)

CHEMISTRIES = ("LFP", "NCA", "NMC", "LCO", "NMC_LCO")
SCHEMA_VERSION = "rulqmoe-features-v1"
N_SCALARS = 5
CURVE_POINTS = 1000
FEATURE_DIM = len(CHEMISTRIES) + N_SCALARS + CURVE_POINTS
DEFAULT_CURVE_CYCLE = 100

_ALIASES = {"NMC-LCO": "NMC_LCO", "NMC/LCO": "NMC_LCO"}


class CellFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnsupportedChemistryError(CellFormatError):
    pass


class MissingCurveError(KeyError):
    def __str__(self):
        return str(self.args[0])


def normalize_chemistry(name: str) -> str:
    key = str(name).strip().upper()
    key = _ALIASES.get(key, key)
    if key not in CHEMISTRIES:
        raise UnsupportedChemistryError(
            f"unsupported chemistry {name!r}; expected one of {', '.join(CHEMISTRIES)}"
        )
    return key


@dataclass
class Curve:
    cycle: int
    points: np.ndarray  # (m, 2): capacity Ah, voltage V

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.points.shape[0] < 2:
            raise CellFormatError(f"curve at cycle {self.cycle} needs at least 2 points")
        if not np.all(np.isfinite(self.points)):
            raise CellFormatError(f"curve at cycle {self.cycle} has non-finite values")
        if np.any(np.diff(self.points[:, 0]) <= 0):
            raise CellFormatError(f"curve at cycle {self.cycle}: capacities must strictly increase")


@dataclass
class CellRecord:
    cell_id: str
    chemistry: str
    nominal_capacity: float
    v_min: float
    v_max: float
    charge_c_rate: float
    discharge_c_rate: float
    rul: float
    curves: list[Curve] = field(default_factory=list)
    schema_version: str | None = None

    def __post_init__(self):
        self.chemistry = normalize_chemistry(self.chemistry)
        if not self.nominal_capacity > 0:
            raise CellFormatError(f"cell {self.cell_id}: nominal capacity must be positive")
        if not self.v_min < self.v_max:
            raise CellFormatError(
                f"cell {self.cell_id}: v_min ({self.v_min}) must be below v_max ({self.v_max})"
            )
        if not self.rul >= 0:
            raise CellFormatError(f"cell {self.cell_id}: rul must be >= 0")
        for name in ("nominal_capacity", "v_min", "v_max", "charge_c_rate", "discharge_c_rate", "rul"):
            if not math.isfinite(getattr(self, name)):
                raise CellFormatError(f"cell {self.cell_id}: {name} is not finite")

    def curve_at(self, cycle: int) -> Curve:
        for c in self.curves:
            if c.cycle == cycle:
                return c
        available = sorted(c.cycle for c in self.curves)
        raise MissingCurveError(
            f"cell {self.cell_id} has no curve at cycle {cycle}; available cycles: {available}"
        )


_REQUIRED = (
    "cell_id", "chemistry", "nominal_capacity_ah", "v_min", "v_max",
    "charge_c_rate", "discharge_c_rate", "rul_cycles", "curves",
)


def record_from_dict(d: dict, line: int | None = None) -> CellRecord:
    try:
        missing = [k for k in _REQUIRED if k not in d]
        if missing:
            raise CellFormatError(f"missing keys {missing}", line)
        curves = [Curve(int(c["cycle"]), c["points"]) for c in d["curves"]]
        return CellRecord(
            cell_id=str(d["cell_id"]),
            chemistry=d["chemistry"],
            nominal_capacity=float(d["nominal_capacity_ah"]),
            v_min=float(d["v_min"]),
            v_max=float(d["v_max"]),
            charge_c_rate=float(d["charge_c_rate"]),
            discharge_c_rate=float(d["discharge_c_rate"]),
            rul=float(d["rul_cycles"]),
            curves=curves,
            schema_version=d.get("schema_version"),
        )
    except CellFormatError as exc:
        if exc.line is None and line is not None:
            raise type(exc)(exc.args[0], line) from None
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise CellFormatError(f"malformed record: {exc}", line) from None


def record_to_dict(c: CellRecord) -> dict:
    d = {
        "cell_id": c.cell_id,
        "chemistry": c.chemistry,
        "nominal_capacity_ah": c.nominal_capacity,
        "v_min": c.v_min,
        "v_max": c.v_max,
        "charge_c_rate": c.charge_c_rate,
        "discharge_c_rate": c.discharge_c_rate,
        "rul_cycles": c.rul,
        "curves": [{"cycle": cv.cycle, "points": cv.points.tolist()} for cv in c.curves],
    }
    if c.schema_version is not None:
        d["schema_version"] = c.schema_version
    return d


def parse_cells(path, strict: bool = True, errors: list | None = None) -> list[CellRecord]:
    """Read a JSON Lines cell file.

    In strict mode the first invalid line raises ``CellFormatError`` (its
    ``line`` attribute is 1-based). In lenient mode invalid lines are logged,
    appended to ``errors`` as ``(line, message)`` and skipped.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                try:
                    d = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise CellFormatError(f"invalid JSON: {exc.msg}", lineno) from None
                if not isinstance(d, dict):
                    raise CellFormatError("record must be a JSON object", lineno)
                records.append(record_from_dict(d, lineno))
            except CellFormatError as exc:
                if strict:
                    raise
                logger.warning("skipping %s", exc)
                if errors is not None:
                    errors.append((lineno, str(exc)))
    return records


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_cells(path, records: Iterable[CellRecord]) -> None:
    lines = [json.dumps(record_to_dict(c), separators=(",", ":")) for c in records]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


# ---------------------------------------------------------------------------
# features


def capacity_grid(nominal_capacity: float, n: int = CURVE_POINTS) -> np.ndarray:
    return np.linspace(0.0, nominal_capacity, n)


def interpolate_curve(points, grid) -> np.ndarray:
    """Piecewise-linear voltage on ``grid``; clamped to the end voltages outside the data."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] < 2:
        raise ValueError("interpolation needs at least 2 points")
    if np.any(np.diff(pts[:, 0]) <= 0):
        raise ValueError("capacities must strictly increase")
    return np.interp(np.asarray(grid, dtype=np.float64), pts[:, 0], pts[:, 1])


def one_hot(chemistry: str) -> np.ndarray:
    v = np.zeros(len(CHEMISTRIES))
    v[CHEMISTRIES.index(normalize_chemistry(chemistry))] = 1.0
    return v


def build_features(c: CellRecord, curve_cycle: int = DEFAULT_CURVE_CYCLE) -> np.ndarray:
    curve = c.curve_at(curve_cycle)
    scalars = [c.nominal_capacity, c.v_min, c.v_max, c.charge_c_rate, c.discharge_c_rate]
    voltages = interpolate_curve(curve.points, capacity_grid(c.nominal_capacity))
    return np.concatenate([one_hot(c.chemistry), scalars, voltages])


@dataclass
class Dataset:
    X: np.ndarray  # (n, FEATURE_DIM) raw features
    y: np.ndarray  # (n,) RUL cycles
    chem: np.ndarray  # (n,) index into CHEMISTRIES
    cell_ids: list[str]

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.chem[idx], [self.cell_ids[i] for i in idx])


def build_dataset(records: Sequence[CellRecord], curve_cycle: int = DEFAULT_CURVE_CYCLE) -> Dataset:
    if records:
        X = np.stack([build_features(c, curve_cycle) for c in records])
    else:
        X = np.empty((0, FEATURE_DIM))
    return Dataset(
        X,
        np.array([c.rul for c in records], dtype=np.float64),
        np.array([CHEMISTRIES.index(c.chemistry) for c in records], dtype=np.int64),
        [c.cell_id for c in records],
    )


@dataclass
class FeatureScaler:
    """Per-feature z-scoring fitted on the training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "FeatureScaler":
        if len(X) == 0:
            raise ValueError("cannot fit a feature scaler on zero rows")
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        # constant features (e.g. an absent chemistry's one-hot column) pass through centered
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean, std)

    @classmethod
    def identity(cls, dim: int) -> "FeatureScaler":
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


def split(records: Sequence, ratio: float = 0.7, seed: int = 42):
    """Shuffled partition into ``floor(ratio * n)`` and the remainder."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("split ratio must lie strictly between 0 and 1")
    n = len(records)
    if n < 2:
        raise ValueError("need at least 2 records to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(ratio * n))
    return [records[i] for i in perm[:n_train]], [records[i] for i in perm[n_train:]]


# ---------------------------------------------------------------------------
# synthetic cells


@dataclass
class ChemistryProfile:
    """RUL = intercept + slope * s + noise * N(0, 1), with latent health s ~ U(0, 1).

    s also shapes the cycle-100 discharge curve: it sets the measured
    capacity (``nominal * (1 - fade * (1 - s))``) and the sharpness of the
    end-of-discharge knee.
    """

    nominal_capacity: float
    v_min: float
    v_max: float
    charge_c_rate: float
    discharge_c_rate: float
    rul_intercept: float
    rul_slope: float
    rul_noise: float
    fade: float = 0.2
    linear_share: float = 0.3

    def quantile(self, s, tau):
        """Closed-form conditional quantile of RUL given latent health ``s``."""
        return self.rul_intercept + self.rul_slope * np.asarray(s) + self.rul_noise * ndtri(tau)

    def curve(self, s: float, n_points: int) -> np.ndarray:
        q_max = self.nominal_capacity * (1.0 - self.fade * (1.0 - s))
        u = np.linspace(0.0, 1.0, n_points)
        power = 4.0 + 4.0 * s
        drop = self.linear_share * u + (1.0 - self.linear_share) * u**power
        v = self.v_max - (self.v_max - self.v_min) * drop
        return np.column_stack([u * q_max, v])


DEFAULT_PROFILES = {
    "LFP": ChemistryProfile(1.1, 2.0, 3.6, 1.0, 1.0, 1200.0, 1500.0, 60.0),
    "NCA": ChemistryProfile(3.2, 2.5, 4.2, 0.5, 1.0, 250.0, 400.0, 25.0),
    "NMC": ChemistryProfile(2.0, 3.0, 4.2, 0.7, 1.0, 500.0, 700.0, 40.0),
    "LCO": ChemistryProfile(1.1, 2.7, 4.2, 0.5, 0.5, 150.0, 300.0, 20.0),
    "NMC_LCO": ChemistryProfile(2.5, 2.7, 4.3, 0.5, 1.0, 350.0, 500.0, 30.0),
}


@dataclass
class SynthSpec:
    counts: dict  # chemistry -> number of cells
    seed: int = 7
    n_points: int = 100
    curve_cycle: int = DEFAULT_CURVE_CYCLE
    profiles: dict = field(default_factory=lambda: dict(DEFAULT_PROFILES))

    def __post_init__(self):
        self.counts = {normalize_chemistry(k): int(v) for k, v in self.counts.items()}
        if not self.counts or any(v <= 0 for v in self.counts.values()):
            raise ValueError("every requested chemistry needs a positive cell count")
        if self.n_points < 2:
            raise ValueError("curves need at least 2 points")
        for chem in self.counts:
            p = self.profiles[chem]
            if p.rul_noise < 0 or p.nominal_capacity <= 0 or not p.v_min < p.v_max:
                raise ValueError(f"invalid profile for {chem}")
            if not 0 < p.linear_share <= 1 or not 0 <= p.fade < 1:
                raise ValueError(f"invalid curve shape for {chem}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        profiles = dict(DEFAULT_PROFILES)
        for chem, overrides in d.get("profiles", {}).items():
            chem = normalize_chemistry(chem)
            base = profiles[chem].__dict__ | dict(overrides)
            profiles[chem] = ChemistryProfile(**base)
        return cls(
            counts=d.get("counts", {c: 200 for c in CHEMISTRIES}),
            seed=int(d.get("seed", 7)),
            n_points=int(d.get("n_points", 100)),
            curve_cycle=int(d.get("curve_cycle", DEFAULT_CURVE_CYCLE)),
            profiles=profiles,
        )


def synth_generate(spec: SynthSpec, return_latent: bool = False):
    """Synthetic cells, deterministic in ``spec.seed``.

    With ``return_latent`` also returns the latent health of every cell, so
    the closed-form quantiles ``profile.quantile(s, tau)`` can serve as an
    oracle.
    """
    rng = np.random.default_rng(spec.seed)
    records, latent = [], []
    for chem in CHEMISTRIES:
        n = spec.counts.get(chem, 0)
        if n == 0:
            continue
        p = spec.profiles[chem]
        s = rng.uniform(0.0, 1.0, n)
        noise = rng.standard_normal(n)
        for i in range(n):
            rul = max(0.0, p.rul_intercept + p.rul_slope * s[i] + p.rul_noise * noise[i])
            records.append(
                CellRecord(
                    cell_id=f"{chem}-{i:05d}",
                    chemistry=chem,
                    nominal_capacity=p.nominal_capacity,
                    v_min=p.v_min,
                    v_max=p.v_max,
                    charge_c_rate=p.charge_c_rate,
                    discharge_c_rate=p.discharge_c_rate,
                    rul=float(rul),
                    curves=[Curve(spec.curve_cycle, p.curve(float(s[i]), spec.n_points))],
                )
            )
            latent.append(s[i])
    if return_latent:
        return records, np.asarray(latent)
    return records
