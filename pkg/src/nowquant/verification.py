"""Regression and event-based evaluation on a held-out test split.

Regression metrics (MSE, MAE) are averaged over every (sample, lead, pixel)
in normalised units. Event metrics binarise predictions and observations at
physical rain-rate thresholds after denormalisation: confusion counts are
pooled per (threshold, lead time) across the whole test set, CSI/POD/FAR/MCC
are computed per lead time, and summary values average the per-lead metrics
with equal weight.

Degenerate denominators yield ``None`` (an empty CSV cell, skipped when
averaging over lead times); MCC alone falls back to 0.0 so it always has a
value. Threshold comparison is inclusive: a pixel exactly at the threshold
counts as an event.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import NormalizationStats
from .errors import ContractError, DimensionError
from .model import ModelConfig, Parameters, forward
from .tensor import Tensor

DEFAULT_THRESHOLDS = (0.5, 10.0, 20.0)
_METRICS = ("csi", "pod", "far", "mcc")


@dataclass
class Counts:
    """One confusion cell; counters only grow."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def binarize(field_mm: np.ndarray, threshold: float) -> np.ndarray:
    """Inclusive event mask over a rain-rate field in mm/h."""
    return field_mm >= threshold


def accumulate_confusion(pred_mask: np.ndarray, obs_mask: np.ndarray, counts: Counts) -> None:
    """Add one pair of binary masks into a confusion cell."""
    if pred_mask.shape != obs_mask.shape:
        raise DimensionError(
            f"mask shapes differ: {pred_mask.shape} vs {obs_mask.shape}")
    pm = pred_mask.astype(bool)
    om = obs_mask.astype(bool)
    counts.tp += int(np.count_nonzero(pm & om))
    counts.fp += int(np.count_nonzero(pm & ~om))
    counts.fn += int(np.count_nonzero(~pm & om))
    counts.tn += int(np.count_nonzero(~pm & ~om))


def csi(c: Counts):
    denom = c.tp + c.fp + c.fn
    return c.tp / denom if denom else None


def pod(c: Counts):
    denom = c.tp + c.fn
    return c.tp / denom if denom else None


def far(c: Counts):
    denom = c.tp + c.fp
    return c.fp / denom if denom else None


def mcc(c: Counts) -> float:
    """Matthews correlation; exact integer arithmetic under the root."""
    product = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if product == 0:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(product)


def eval_regression(predictions: np.ndarray, targets: np.ndarray):
    """Mean squared / absolute error over every (sample, lead, pixel)."""
    if predictions.shape != targets.shape:
        raise DimensionError(
            f"prediction shape {predictions.shape} != target shape {targets.shape}")
    if predictions.size == 0:
        raise ContractError("cannot evaluate an empty test set")
    err = predictions.astype(np.float64) - targets.astype(np.float64)
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


def empirical_coverage(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of pixels whose target does not exceed the prediction."""
    if predictions.shape != targets.shape:
        raise DimensionError(
            f"prediction shape {predictions.shape} != target shape {targets.shape}")
    if predictions.size == 0:
        raise ContractError("cannot evaluate an empty test set")
    return float(np.count_nonzero(targets <= predictions) / predictions.size)


# ---------------------------------------------------------------------------
# running a trained model over a split
# ---------------------------------------------------------------------------


def run_model(params: Parameters, config: ModelConfig, x: np.ndarray,
              batch_size: int = 32) -> np.ndarray:
    """Forward the whole array in batches, without recording gradients."""
    outs = []
    for lo in range(0, x.shape[0], batch_size):
        outs.append(forward(params, Tensor(x[lo:lo + batch_size]), config).values)
    return np.concatenate(outs, axis=0)


def split_heads(output: np.ndarray, config: ModelConfig) -> dict[str, np.ndarray]:
    """Name each output head and reshape it to (N, L, H, W).

    Deterministic models expose a single ``det`` head; quantile models one
    head per level, channels laid out lead-major.
    """
    n, c, h, w = output.shape
    if c != config.out_channels:
        raise ContractError(f"output has {c} channels, config expects {config.out_channels}")
    if config.quantiles is None:
        return {"det": output}
    nq = len(config.quantiles.levels)
    heads = {}
    for qi, level in enumerate(config.quantiles.levels):
        idx = [l * nq + qi for l in range(config.lead_times)]
        heads[f"q{level:g}"] = output[:, idx]
    return heads


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------


@dataclass
class HeadReport:
    output: str
    mse: float
    mae: float
    # (threshold, lead index 1..L) -> {metric: float | None}
    curves: dict = field(default_factory=dict)
    # threshold -> {metric: float | None}, averaged over leads
    summary: dict = field(default_factory=dict)
    # (threshold, lead index) -> Counts
    counts: dict = field(default_factory=dict)


@dataclass
class EvaluationReport:
    model: str
    lead_minutes: dict
    heads: list[HeadReport] = field(default_factory=list)


def _lead_average(curves: dict, threshold: float, leads: range) -> dict:
    out = {}
    for metric in _METRICS:
        values = [curves[(threshold, l)][metric] for l in leads]
        values = [v for v in values if v is not None]
        out[metric] = sum(values) / len(values) if values else None
    return out


def eval_events(model_name: str, heads: dict[str, np.ndarray], targets: np.ndarray,
                stats: NormalizationStats, steps_per_hour: int = 12,
                thresholds=DEFAULT_THRESHOLDS) -> EvaluationReport:
    """Full evaluation of named output heads against normalised targets.

    ``heads`` maps output name to normalised (N, L, H, W) predictions;
    ``targets`` is the matching normalised array. Regression metrics stay in
    normalised units; event metrics are computed after converting both sides
    to mm/h.
    """
    if not heads:
        raise ContractError("no output heads to evaluate")
    n, leads_n = targets.shape[0], targets.shape[1]
    if n == 0:
        raise ContractError("cannot evaluate an empty test set")
    leads = range(1, leads_n + 1)
    scale = stats.train_max * steps_per_hour
    obs_mm = targets.astype(np.float64) * scale
    minutes = {l: l * 60 // steps_per_hour for l in leads}

    report = EvaluationReport(model=model_name, lead_minutes=minutes)
    for name in heads:
        pred = heads[name]
        if pred.shape != targets.shape:
            raise DimensionError(
                f"head {name!r} shape {pred.shape} != target shape {targets.shape}")
        mse, mae = eval_regression(pred, targets)
        head = HeadReport(output=name, mse=mse, mae=mae)
        pred_mm = pred.astype(np.float64) * scale
        for thr in thresholds:
            for l in leads:
                c = Counts()
                accumulate_confusion(binarize(pred_mm[:, l - 1], thr),
                                     binarize(obs_mm[:, l - 1], thr), c)
                head.counts[(thr, l)] = c
                head.curves[(thr, l)] = {"csi": csi(c), "pod": pod(c),
                                         "far": far(c), "mcc": mcc(c)}
            head.summary[thr] = _lead_average(head.curves, thr, leads)
        report.heads.append(head)
    return report


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------


def _cell(value) -> str:
    return "" if value is None else f"{value:.8g}"


def write_summary_csv(reports: list[EvaluationReport], path) -> None:
    """One row per (model, output, threshold); lead-averaged event metrics."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "output", "threshold", "csi", "pod", "far",
                         "mcc", "mse", "mae"])
        for report in reports:
            for head in report.heads:
                for thr in sorted(head.summary):
                    row = head.summary[thr]
                    writer.writerow([report.model, head.output, _cell(thr)]
                                    + [_cell(row[m]) for m in _METRICS]
                                    + [_cell(head.mse), _cell(head.mae)])


def write_curves_csv(reports: list[EvaluationReport], path) -> None:
    """One row per (model, output, threshold, lead time in minutes)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "output", "threshold", "lead_time", "csi",
                         "pod", "far", "mcc"])
        for report in reports:
            for head in report.heads:
                thresholds = sorted({thr for thr, _ in head.curves})
                for thr in thresholds:
                    for l in sorted(report.lead_minutes):
                        row = head.curves[(thr, l)]
                        writer.writerow([report.model, head.output, _cell(thr),
                                         report.lead_minutes[l]]
                                        + [_cell(row[m]) for m in _METRICS])
