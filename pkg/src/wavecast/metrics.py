"""Error metrics, cross-validated evaluation and the ablation runner."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TARGET, FoldSplit, WindowedDataset, fit_normalization
from .errors import ShapeError, StateError
from .model import (
    COMPLETE,
    VARIANTS,
    ModelConfig,
    PreparedData,
    TrainConfig,
    WavecastModel,
    config_hash,
    load_checkpoint,
    train,
    with_variant,
)

METRICS = ("rmse", "mae", "smape")


def _pair(pred, actual):
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise ShapeError(f"prediction shape {pred.shape} != actual shape {actual.shape}")
    if pred.size == 0:
        raise ShapeError("metrics need at least one value")
    return pred.ravel(), actual.ravel()


def rmse(pred, actual) -> float:
    p, a = _pair(pred, actual)
    return float(np.sqrt(np.mean((p - a) ** 2)))


def mae(pred, actual) -> float:
    p, a = _pair(pred, actual)
    return float(np.mean(np.abs(p - a)))


def smape(pred, actual) -> float:
    """Symmetric MAPE in percent; terms where both values are zero count as 0."""
    p, a = _pair(pred, actual)
    denom = (np.abs(a) + np.abs(p)) / 2.0
    both_zero = denom == 0
    terms = np.where(both_zero, 0.0, np.abs(p - a) / np.where(both_zero, 1.0, denom))
    return float(100.0 * np.mean(terms))


def all_metrics(pred, actual) -> dict:
    return {"rmse": rmse(pred, actual), "mae": mae(pred, actual), "smape": smape(pred, actual)}


def seasonal_naive(dataset: WindowedDataset, period: int = 24) -> np.ndarray:
    """Repeat the last observed ``period`` hours of CIF across the horizon."""
    if dataset.T < period:
        raise ShapeError(f"seasonal naive needs T >= {period}")
    steps = dataset.T - period + np.arange(dataset.S) % period
    return dataset.X[:, steps, TARGET]


@dataclass
class EvalReport:
    folds: list  # dicts with fold, n_windows, rmse, mae, smape
    variant: str = COMPLETE
    config_hash: str = ""
    seed: int = 0
    wall_clock: float = 0.0

    @property
    def mean(self) -> dict:
        return {m: float(np.mean([f[m] for f in self.folds])) for m in METRICS}

    def rows(self):
        out = [{"fold": str(f["fold"]), "n_windows": f["n_windows"], **{m: f[m] for m in METRICS}}
               for f in self.folds]
        out.append({"fold": "mean", "n_windows": sum(f["n_windows"] for f in self.folds), **self.mean})
        return out

    def header(self) -> str:
        return (f"variant={self.variant} config={self.config_hash} seed={self.seed} "
                f"wall_clock_s={self.wall_clock:.1f}")

    def to_csv(self, path, comment: str | None = None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            for line in ([self.header()] + (comment.splitlines() if comment else [])):
                fh.write(f"# {line}\n")
            writer = csv.DictWriter(fh, ["fold", "n_windows", *METRICS], lineterminator="\n")
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return path

    def to_text(self) -> str:
        lines = [self.header(), f"{'fold':>6} {'windows':>8} {'RMSE':>10} {'MAE':>10} {'SMAPE%':>8}"]
        for row in self.rows():
            lines.append(f"{row['fold']:>6} {row['n_windows']:>8} {row['rmse']:>10.3f} {row['mae']:>10.3f} "
                         f"{row['smape']:>8.3f}")
        return "\n".join(lines)


def write_prediction_dump(path, fold_predictions, comment: str | None = None):
    """CSV of every (window, step) forecast: fold,window,step,predicted,actual."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fold", "window", "step", "predicted", "actual"])
        for fold, (idx, pred, actual) in sorted(fold_predictions.items()):
            for row, w in enumerate(idx):
                for s in range(pred.shape[1]):
                    writer.writerow([fold, int(w), s + 1, repr(float(pred[row, s])), repr(float(actual[row, s]))])
    return path


def metrics_from_dump(path) -> dict:
    """Per-fold metrics recomputed from a prediction dump."""
    grouped: dict = {}
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        for r in rows:
            p, a = grouped.setdefault(int(r["fold"]), ([], []))
            p.append(float(r["predicted"]))
            a.append(float(r["actual"]))
    return {fold: all_metrics(p, a) for fold, (p, a) in sorted(grouped.items())}


def evaluate(models, dataset: WindowedDataset, split: FoldSplit, folds=None, variant: str = COMPLETE,
             seed: int = 0, dump_path=None, prepared: dict | None = None) -> EvalReport:
    """Score per-fold models on their test blocks.

    ``models`` maps fold -> model or checkpoint path.  Metrics pool every
    (window, horizon step) pair of a fold in target units.
    """
    start = time.perf_counter()
    folds = list(range(split.k)) if folds is None else list(folds)
    rows, dumps, chash = [], {}, ""
    for fold in folds:
        if fold not in models:
            raise StateError(f"no checkpoint for fold {fold}")
        model = models[fold]
        if not isinstance(model, WavecastModel):
            model = load_checkpoint(model)
        chash = chash or config_hash(model.config.to_dict())
        idx = split.test_indices(fold)
        data = (prepared or {}).get(fold)
        if data is not None:
            pred = model.norm.invert_target(model.predict_normalized(data.x_tr[idx], data.images(idx)))
        else:
            pred = model.predict_dataset(dataset, idx)
        actual = dataset.e[idx]
        rows.append({"fold": fold, "n_windows": len(idx), **all_metrics(pred, actual)})
        dumps[fold] = (idx, pred, actual)
    report = EvalReport(rows, variant, chash, seed, time.perf_counter() - start)
    if dump_path is not None:
        write_prediction_dump(dump_path, dumps, comment=report.header())
    report.predictions = dumps
    return report


def prepare_fold(dataset: WindowedDataset, split: FoldSplit, fold: int, config: ModelConfig) -> PreparedData:
    """Normalisation fitted on the fold's training windows plus precomputed features."""
    probe = WavecastModel(with_variant(config, COMPLETE))
    probe.norm = fit_normalization(dataset.X[split.train_indices(fold)])
    return PreparedData(probe, dataset)


def train_fold(dataset, split, fold, config: ModelConfig, train_config: TrainConfig,
               prepared: PreparedData | None = None, log=None):
    """Train one model on ``fold``'s training windows; returns (model, curve)."""
    train_idx = split.train_indices(fold)
    model = WavecastModel(config, seed=train_config.seed)
    if prepared is None:
        curve = train(model, dataset, train_idx, train_config, log=log)
    else:
        model.norm = fit_normalization(dataset.X[train_idx])
        curve = train(model, dataset, train_idx, train_config, data=prepared, log=log)
    return model, curve


@dataclass
class AblationResult:
    reports: dict  # variant -> list of EvalReport, one per seed
    seeds: list
    curves: dict = field(default_factory=dict)  # (variant, seed, fold) -> TrainingCurve
    models: dict = field(default_factory=dict)  # (variant, seed, fold) -> trained model

    def mean(self, variant) -> dict:
        reps = self.reports[variant]
        return {m: float(np.mean([r.mean[m] for r in reps])) for m in METRICS}

    def complete_wins(self) -> dict:
        """Per metric: does the complete model beat every ablation?"""
        full = self.mean(COMPLETE)
        others = [v for v in self.reports if v != COMPLETE]
        return {m: all(full[m] < self.mean(v)[m] for v in others) for m in METRICS}

    def rows(self):
        wins = self.complete_wins()
        out = []
        for v in self.reports:
            row = {"variant": v, **self.mean(v)}
            if v == COMPLETE:
                row.update({f"wins_{m}": wins[m] for m in METRICS})
            out.append(row)
        return out

    def to_csv(self, path, comment: str | None = None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            if comment:
                for line in comment.splitlines():
                    fh.write(f"# {line}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["variant", *METRICS])
            for row in self.rows():
                writer.writerow([row["variant"], *(repr(row[m]) for m in METRICS)])
        return path

    def to_text(self) -> str:
        wins = self.complete_wins()
        lines = [f"seeds={self.seeds}", f"{'variant':<18} {'RMSE':>10} {'MAE':>10} {'SMAPE%':>8}"]
        for row in self.rows():
            lines.append(f"{row['variant']:<18} {row['rmse']:>10.3f} {row['mae']:>10.3f} {row['smape']:>8.3f}")
        lines.append("complete beats both ablations: "
                     + ", ".join(f"{m.upper()} {'yes' if wins[m] else 'no'}" for m in METRICS))
        return "\n".join(lines)


def run_ablation(dataset: WindowedDataset, split: FoldSplit, config: ModelConfig, train_config: TrainConfig,
                 seeds=(0,), folds=None, variants=VARIANTS, log=None) -> AblationResult:
    """Train and score every variant with identical data, seeds and settings."""
    folds = list(range(split.k)) if folds is None else list(folds)
    prepared = {f: prepare_fold(dataset, split, f, config) for f in folds}
    reports = {v: [] for v in variants}
    curves, trained = {}, {}
    for variant in variants:
        cfg = with_variant(config, variant)
        for seed in seeds:
            tcfg = TrainConfig(**{**train_config.__dict__, "seed": seed})
            models = {}
            for f in folds:
                models[f], curves[(variant, seed, f)] = train_fold(dataset, split, f, cfg, tcfg, prepared[f])
                trained[(variant, seed, f)] = models[f]
                if log is not None:
                    log(variant, seed, f, curves[(variant, seed, f)])
            reports[variant].append(evaluate(models, dataset, split, folds, variant, seed, prepared=prepared))
    return AblationResult(reports, list(seeds), curves, trained)
