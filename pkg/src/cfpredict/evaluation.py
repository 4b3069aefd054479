"""Regression metrics, rating direction/percent change, rating titles and the
with/without-practice ablation runner.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import DatasetBundle, FeatureMode, SequenceSample, TimestampFeatures, build_bundle, stack_samples
from .errors import DegenerateVariance, EmptyInput, LengthMismatch, ZeroBase
from .models import TABLE_ORDER, Model, ModelConfig, ModelKind, build_model
from .train import TrainConfig, train

REPORT_COLUMNS = ("model", "feature_mode", "rmse", "mse", "mae", "r2", "direction_accuracy", "n_test", "seed")


def _pair(y, y_pred) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if y.size != y_pred.size:
        raise LengthMismatch(f"{y.size} observations vs {y_pred.size} predictions")
    if y.size == 0:
        raise EmptyInput("metrics need at least one sample")
    return y, y_pred


def mae(y, y_pred) -> float:
    y, y_pred = _pair(y, y_pred)
    return math.fsum(np.abs(y - y_pred).tolist()) / y.size


def mse(y, y_pred) -> float:
    y, y_pred = _pair(y, y_pred)
    d = y - y_pred
    return math.fsum((d * d).tolist()) / y.size


def rmse(y, y_pred) -> float:
    return math.sqrt(mse(y, y_pred))


def r2(y, y_pred) -> float:
    """Coefficient of determination around the mean of the observed values."""
    y, y_pred = _pair(y, y_pred)
    if y.size < 2:
        raise EmptyInput("r2 needs at least two samples")
    ybar = math.fsum(y.tolist()) / y.size
    ss_tot = math.fsum(((y - ybar) ** 2).tolist())
    if ss_tot == 0.0:
        raise DegenerateVariance("observed values are constant")
    ss_res = math.fsum(((y - y_pred) ** 2).tolist())
    return 1.0 - ss_res / ss_tot


def direction_accuracy(pred_ratings, prev_ratings, actual_ratings) -> float:
    """Share of samples whose predicted change has the same sign as the actual
    one; a zero change only matches a zero change."""
    pred = np.asarray(pred_ratings, dtype=np.float64).reshape(-1)
    prev = np.asarray(prev_ratings, dtype=np.float64).reshape(-1)
    actual = np.asarray(actual_ratings, dtype=np.float64).reshape(-1)
    if not pred.size == prev.size == actual.size:
        raise LengthMismatch("direction_accuracy inputs differ in length")
    if pred.size == 0:
        raise EmptyInput("direction_accuracy needs at least one sample")
    hits = np.sign(pred - prev) == np.sign(actual - prev)
    return float(hits.sum()) / pred.size


def percent_change(pred_rating: float, prev_rating: float) -> float:
    if prev_rating == 0:
        raise ZeroBase("percent change from a zero rating")
    return 100.0 * (pred_rating - prev_rating) / prev_rating


# (lower bound, title, division, color), highest band first
RATING_BANDS = (
    (3000, "Legendary Grandmaster", "Division 1", "Black & Red"),
    (2600, "International Grandmaster", "Division 1", "Red"),
    (2400, "Grandmaster", "Division 1", "Red"),
    (2300, "International Master", "Division 1", "Orange"),
    (2100, "Master", "Division 1", "Orange"),
    (1900, "Candidate Master", "Division 1/2", "Violet"),
    (1600, "Expert", "Division 2", "Blue"),
    (1400, "Specialist", "Division 2/3", "Cyan"),
    (1200, "Pupil", "Division 2/3", "Green"),
)


def rating_to_title(rating: float) -> tuple[str, str, str]:
    """(title, division, color) for a rating."""
    for lower, title, division, color in RATING_BANDS:
        if rating >= lower:
            return title, division, color
    return "Newbie", "Division 2/3", "Gray"


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class MetricsReport:
    model: ModelKind
    feature_mode: FeatureMode
    rmse: float
    mse: float
    mae: float
    r2: float
    direction_accuracy: float
    n_test: int
    seed: int | None = None

    def row(self) -> list[str]:
        seed = "" if self.seed is None else str(self.seed)
        return [
            self.model.value,
            self.feature_mode.value,
            repr(self.rmse),
            repr(self.mse),
            repr(self.mae),
            repr(self.r2),
            repr(self.direction_accuracy),
            str(self.n_test),
            seed,
        ]


def metrics_report(
    kind: ModelKind,
    mode: FeatureMode,
    pred_rating,
    actual_rating,
    prev_rating,
    seed: int | None = None,
) -> MetricsReport:
    m = mse(actual_rating, pred_rating)
    return MetricsReport(
        model=kind,
        feature_mode=mode,
        rmse=math.sqrt(m),
        mse=m,
        mae=mae(actual_rating, pred_rating),
        r2=r2(actual_rating, pred_rating),
        direction_accuracy=direction_accuracy(pred_rating, prev_rating, actual_rating),
        n_test=int(np.asarray(actual_rating).size),
        seed=seed,
    )


def rating_predictions(model: Model, samples: Sequence[SequenceSample], scaler) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(predicted, actual, previous) ratings in raw units."""
    if not samples:
        raise EmptyInput("no samples to evaluate")
    x, y = stack_samples(samples)
    pred = model.predict(x)
    pred_rating = scaler.inverse_column(pred[:, 0], 0)
    actual = scaler.inverse_column(y[:, 0], 0)
    prev = np.array([s.target_prev_rating for s in samples])
    return pred_rating, actual, prev


def evaluate_model(model: Model, bundle: DatasetBundle, seed: int | None = None, samples=None) -> MetricsReport:
    samples = bundle.test if samples is None else samples
    pred, actual, prev = rating_predictions(model, samples, bundle.scaler)
    return metrics_report(model.config.kind, bundle.feature_mode, pred, actual, prev, seed)


def reports_to_csv(reports: Iterable[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def format_table(cells: Mapping[ModelKind, MetricsReport], title: str = "") -> str:
    """Metric rows by model columns, in the LSTM / LSTM+Attention / GRU / Bi-LSTM order."""
    kinds = [k for k in TABLE_ORDER if k in cells]
    header = ["Metric"] + [k.label for k in kinds]
    rows = [
        ["RMSE"] + [f"{cells[k].rmse:.3f}" for k in kinds],
        ["MSE"] + [f"{cells[k].mse:.3f}" for k in kinds],
        ["MAE"] + [f"{cells[k].mae:.3f}" for k in kinds],
        ["R2"] + [f"{cells[k].r2:.4f}" for k in kinds],
        ["Direction acc."] + [f"{cells[k].direction_accuracy:.4f}" for k in kinds],
    ]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
    lines = [title] if title else []
    lines.append(fmt(header))
    lines.append("  ".join("-" * w for w in widths))
    lines += [fmt(r) for r in rows]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationResult:
    """Per-seed reports and pooled table cells for both feature modes."""

    runs: dict[FeatureMode, list[MetricsReport]]
    tables: dict[FeatureMode, dict[ModelKind, MetricsReport]]

    def median_mae(self, mode: FeatureMode, kind: ModelKind) -> float:
        return statistics.median(r.mae for r in self.runs[mode] if r.model is kind)


def run_ablation(
    timelines: Mapping[str, Sequence[TimestampFeatures]],
    kinds: Sequence[ModelKind | str] = TABLE_ORDER,
    seeds: Sequence[int] = (0,),
    train_cfg: TrainConfig | None = None,
    *,
    window: int = 16,
    ratio: float = 0.8,
    split_seed: int = 0,
    by_user: bool = False,
    n_layers: int = 4,
    hidden: int = 256,
    dropout: float = 0.5,
    dense_hidden: int = 100,
) -> AblationResult:
    """Train every kind in BASE and WITH_PRACTICE mode on the same split.

    Both modes build their sequences from the same timelines in the same
    order, so one split seed yields identical train/test partitions. Each
    seed sets the model init seed and the shuffle seed. Table cells pool the
    test predictions of all seeds, so ``rmse**2 == mse`` holds in every cell.
    """
    train_cfg = train_cfg or TrainConfig()
    kinds = [ModelKind.parse(k) for k in kinds]
    runs: dict[FeatureMode, list[MetricsReport]] = {}
    tables: dict[FeatureMode, dict[ModelKind, MetricsReport]] = {}
    for mode in (FeatureMode.BASE, FeatureMode.WITH_PRACTICE):
        bundle = build_bundle(timelines, mode, window=window, ratio=ratio, split_seed=split_seed, by_user=by_user)
        F = bundle.n_features
        runs[mode] = []
        tables[mode] = {}
        for kind in kinds:
            pooled = ([], [], [])
            for seed in seeds:
                cfg = ModelConfig(
                    kind=kind,
                    input_features=F,
                    output_features=F,
                    n_layers=n_layers,
                    hidden=hidden,
                    dropout=dropout,
                    dense_hidden=dense_hidden,
                    seq_len=window - 1,
                    init_seed=seed,
                )
                model = build_model(cfg)
                ckpt, _ = train(model, bundle, replace(train_cfg, shuffle_seed=seed, checkpoint_path=None, history_path=None))
                best = ckpt.to_model()
                pred, actual, prev = rating_predictions(best, bundle.test, bundle.scaler)
                runs[mode].append(metrics_report(kind, mode, pred, actual, prev, seed))
                for acc, arr in zip(pooled, (pred, actual, prev)):
                    acc.append(arr)
            p, a, v = (np.concatenate(x) for x in pooled)
            tables[mode][kind] = metrics_report(kind, mode, p, a, v)
    return AblationResult(runs=runs, tables=tables)
