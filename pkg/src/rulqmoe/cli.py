"""Command-line interface: ``rulqmoe {train,predict,survival,evaluate,synth,plotdata}``.

Exit codes: 0 success, 1 validation error (bad input, config, or model
file), 2 runtime or numerical error. Errors are printed to stderr as
``rulqmoe: error[<category>]: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import CHEMISTRIES, CellFormatError, MissingCurveError, SynthSpec
from .dist import (
    PredictiveDistribution,
    QuantileVector,
    describe_survival,
    prediction_interval,
)
from .metrics import compute_metrics, interval_coverage
from .modelfile import ModelFileError, SchemaVersionError, load_model, save_model
from .expert import DEFAULT_LEVELS
from .moe import MoEModel, TrainConfig, predict, report_rows, train_moe
from .numcore import DimensionError, NonFiniteError

logger = logging.getLogger("rulqmoe")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class CliError(Exception):
    def __init__(self, message: str, category: str = "validation"):
        super().__init__(message)
        self.category = category


# ---------------------------------------------------------------------------
# config


def _floats(v):
    return tuple(float(t) for t in v.split(",") if t.strip())


def _ints(v):
    return tuple(int(t) for t in v.split(",") if t.strip())


CONFIG_KEYS = {
    "learning_rate": float,
    "batch_size": int,
    "hidden_dim": int,
    "max_epochs": int,
    "patience": int,
    "split_ratio": float,
    "seed": int,
    "stage2_learning_rate": float,
    "stage2_epochs": int,
    "stage2_warmup_epochs": int,
    "dropout_rate": float,
    "validation_fraction": float,
    "gate_hidden": _ints,
    "negative_slope": float,
    "initial_gap": float,
    "data": str,
    "out": str,
    "curve_cycle": int,
    "levels": _floats,
    "bandwidth": float,
}
_TRAIN_FIELDS = set(TrainConfig.__dataclass_fields__)


def parse_config(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise CliError(f"unknown key {key!r} in config (line {lineno})")
        try:
            out[key] = CONFIG_KEYS[key](value)
        except ValueError:
            raise CliError(f"config line {lineno}: bad value {value!r} for {key}") from None
    return out


def train_config_from(conf: dict, seed: int | None) -> TrainConfig:
    kw = {k: v for k, v in conf.items() if k in _TRAIN_FIELDS}
    if seed is not None:
        kw["seed"] = seed
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise CliError(f"invalid config: {exc}") from None


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _emit(text: str, out: str | None) -> None:
    if out:
        dataio.atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def _level_label(t: float) -> str:
    return f"{t:g}"


def _load_cells(path, model: MoEModel | None = None):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"input file not found: {path}")
    records = dataio.parse_cells(p, strict=True)
    if model is not None:
        for r in records:
            if r.schema_version is not None and r.schema_version != model.schema_version:
                raise SchemaVersionError(
                    f"cell {r.cell_id} declares schema {r.schema_version!r}, model uses {model.schema_version!r}"
                )
    return records


def _load_model(path) -> MoEModel:
    if not Path(path).is_file():
        raise CliError(f"model file not found: {path}")
    return load_model(path)


def _features(model: MoEModel, records):
    return dataio.build_dataset(records, model.curve_cycle)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    conf = parse_config(args.config) if args.config else {}
    data = args.data or conf.get("data")
    out = args.out or conf.get("out")
    if not data:
        raise CliError("no training data given (--data or 'data' in config)")
    if not out:
        raise CliError("no output directory given (--out or 'out' in config)")
    if not Path(data).is_file():
        raise CliError(f"data file not found: {data}")
    out_dir = Path(out)
    if out_dir.exists() and not out_dir.is_dir():
        raise CliError(f"output path {out} exists and is not a directory")
    cfg = train_config_from(conf, args.seed)
    levels = conf.get("levels", None)
    curve_cycle = conf.get("curve_cycle", dataio.DEFAULT_CURVE_CYCLE)

    records = _load_cells(data)
    train_recs, test_recs = dataio.split(records, cfg.split_ratio, cfg.seed)
    train = dataio.build_dataset(train_recs, curve_cycle)
    test = dataio.build_dataset(test_recs, curve_cycle)
    t0 = time.perf_counter()
    model, reports = train_moe(train, test, cfg, levels or DEFAULT_LEVELS)
    model.curve_cycle = curve_cycle
    elapsed = time.perf_counter() - t0

    rows = []
    for r in reports:
        stage, _, who = r.name.partition("/")
        for note in r.warnings:
            rows.append((stage, who or "ALL", "", "", "", note))
    rows.extend((*row, "") for row in report_rows(reports))
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, out_dir / "model.qmoe")
    dataio.atomic_write_text(
        out_dir / "report.csv", _csv_text(["stage", "expert", "epoch", "train_qs", "val_qs", "note"], rows)
    )
    print(
        f"trained in {elapsed:.1f}s; model -> {out_dir / 'model.qmoe'}, report -> {out_dir / 'report.csv'}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    records = _load_cells(args.input, model)
    levels = list(model.levels)
    if args.quantiles:
        wanted = _floats(args.quantiles)
        missing = [t for t in wanted if t not in model.levels]
        if missing:
            raise CliError(f"levels {missing} not in model levels {levels}")
        cols = [model.levels.index(t) for t in wanted]
    else:
        cols = list(range(len(levels)))
    has_pi = 0.05 in model.levels and 0.95 in model.levels
    header = (
        ["cell_id"]
        + [f"gate_{c}" for c in model.expert_order]
        + [f"q_{_level_label(levels[j])}" for j in cols]
        + ["median", "pi90_low", "pi90_high"]
    )
    rows = []
    if records:
        ds = _features(model, records)
        pred = predict(model, ds.X)
        for i, cid in enumerate(ds.cell_ids):
            q = QuantileVector(pred.quantiles[i], model.levels)
            median = q.at(0.5) if 0.5 in model.levels else ""
            lo, hi = ("", "")
            if has_pi:
                pi = prediction_interval(q, 0.1)
                lo, hi = pi.lower, pi.upper
            rows.append([cid, *pred.gate[i], *(pred.quantiles[i, j] for j in cols), median, lo, hi])
    _emit(_csv_text(header, rows), args.out)
    return EXIT_OK


def _distributions(model, records, bandwidth):
    ds = _features(model, records)
    pred = predict(model, ds.X)
    for i, cid in enumerate(ds.cell_ids):
        q = QuantileVector(pred.quantiles[i], model.levels)
        yield cid, PredictiveDistribution.from_quantiles(q, bandwidth)


def cmd_survival(args) -> int:
    from .dist import cdf

    model = _load_model(args.model)
    records = _load_cells(args.input, model)
    y = float(args.threshold)
    rows = []
    for cid, d in (_distributions(model, records, args.bandwidth) if records else []):
        f = cdf(d, y)
        s = 1.0 - f
        rows.append([cid, y, s, f, d.bandwidth, describe_survival(s, y)])
    header = ["cell_id", "threshold", "survival", "cdf", "bandwidth", "interpretation"]
    _emit(_csv_text(header, rows), args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    records = _load_cells(args.data, model)
    if not records:
        raise CliError("evaluation data is empty")
    ds = _features(model, records)
    pred = predict(model, ds.X)
    if 0.5 not in model.levels:
        raise CliError("model has no median level (0.5)")
    med = pred.quantiles[:, model.levels.index(0.5)]
    has_pi = 0.05 in model.levels and 0.95 in model.levels
    groups = [(c, ds.chem == i) for i, c in enumerate(CHEMISTRIES) if np.any(ds.chem == i)]
    groups.append(("ALL", np.ones(len(ds), dtype=bool)))
    rows = []
    for name, mask in groups:
        m = compute_metrics(ds.y[mask], med[mask])
        cov = ""
        if has_pi:
            lo = pred.quantiles[mask, model.levels.index(0.05)]
            hi = pred.quantiles[mask, model.levels.index(0.95)]
            cov = interval_coverage(ds.y[mask], np.column_stack([lo, hi]))
        rows.append([name, m.n, m.mae, m.mape, m.rmse, m.r2, cov])
    header = ["group", "n", "mae", "mape", "rmse", "r2", "coverage90"]
    _emit(_csv_text(header, rows), args.out)
    table = [f"{'group':<8} {'n':>6} {'MAE':>10} {'MAPE%':>8} {'RMSE':>10} {'R2':>8} {'PI90 cov':>9}"]
    for name, n, mae, mape, rmse, r2, cov in rows:
        cov_s = f"{cov:.3f}" if cov != "" else "-"
        table.append(f"{name:<8} {n:>6} {mae:>10.2f} {mape:>8.2f} {rmse:>10.2f} {r2:>8.4f} {cov_s:>9}")
    print("\n".join(table), file=sys.stderr)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CliError(f"cannot read spec {args.spec}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"spec is not valid JSON: {exc.msg}") from None
    else:
        raw = {}
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(raw)
    except (ValueError, TypeError, KeyError) as exc:
        raise CliError(f"invalid synth spec: {exc}") from None
    records = dataio.synth_generate(spec)
    dataio.write_cells(args.out, records)
    for chem in CHEMISTRIES:
        if chem not in spec.counts:
            continue
        p = spec.profiles[chem]
        law = {
            "chemistry": chem,
            "cells": spec.counts[chem],
            "law": "rul = intercept + slope * s + noise * N(0,1), s ~ U(0,1)",
            "intercept": p.rul_intercept,
            "slope": p.rul_slope,
            "noise": p.rul_noise,
        }
        print(json.dumps(law))
    return EXIT_OK


def cmd_plotdata(args) -> int:
    model = _load_model(args.model)
    records = [r for r in _load_cells(args.input, model) if r.cell_id == args.cell]
    if not records:
        raise CliError(f"unknown cell id {args.cell!r}")
    from .dist import _probe

    _, d = next(_distributions(model, records[:1], args.bandwidth))
    v, b = d.quantiles.values, d.bandwidth
    grid = np.linspace(v[0] - 4 * b, v[-1] + 4 * b, 1000)
    f, F = _probe(d, grid)
    rows = zip(grid, f, F, 1.0 - F)
    _emit(_csv_text(["y", "pdf", "cdf", "survival"], rows), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master random seed")
    common.add_argument("--verbose", "-v", action="count", default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key=value config file")

    parser = argparse.ArgumentParser(prog="rulqmoe", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="two-stage training")
    p.add_argument("--data")
    p.add_argument("--out", help="output directory for model.qmoe and report.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="quantiles, median and 90%% PI per cell")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--quantiles", help="comma-separated subset of the model levels")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("survival", parents=[common], help="P(RUL > threshold) per cell")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_survival)

    p = sub.add_parser("evaluate", parents=[common], help="MAE/MAPE/RMSE/R2 and PI coverage")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic cell file")
    p.add_argument("--spec", help="JSON synth spec (defaults used when omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("plotdata", parents=[common], help="pdf/cdf/survival on a probe grid for one cell")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--cell", required=True)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", None), ("verbose", 0), ("config", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command != "train" and args.config:
        conf = parse_config_or_exit(args.config)
        if conf is None:
            return EXIT_VALIDATION
        if getattr(args, "bandwidth", None) is None and "bandwidth" in conf:
            args.bandwidth = conf["bandwidth"]
    try:
        return args.func(args)
    except BrokenPipeError:
        # downstream closed the pipe (``| head``); silence the final flush
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK
    except (CliError, CellFormatError, MissingCurveError, ModelFileError, DimensionError, KeyError) as exc:
        category = getattr(exc, "category", "validation")
        code = EXIT_VALIDATION if category == "validation" else EXIT_RUNTIME
        print(f"rulqmoe: error[{category}]: {exc}", file=sys.stderr)
        return code
    except (NonFiniteError, FloatingPointError, ValueError, ArithmeticError) as exc:
        print(f"rulqmoe: error[runtime]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def parse_config_or_exit(path):
    try:
        return parse_config(path)
    except CliError as exc:
        print(f"rulqmoe: error[{exc.category}]: {exc}", file=sys.stderr)
        return None


if __name__ == "__main__":
    sys.exit(main())
