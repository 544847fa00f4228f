"""Evaluation statistics: confusion counts, class scores, intervals, IoU.

Undefined ratios (empty confusion row/column, empty IoU union, absent mask
class) are reported as NaN plus an explicit list of affected classes — never
silently coerced to 0. The binomial confidence interval follows the
score-interval form with Z taken from the standard normal quantile
(1.96 at 95%, 1.6449 at 90%).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .errors import ContractError, DegenerateInputError, ShapeError

# quantiles as conventionally rounded; other levels fall back to norm.ppf
_Z_TABLE = {0.95: 1.96, 0.90: 1.6449}


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (K, K), rows = ground truth, columns = predicted
    class_names: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def column_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def to_rows(self) -> list[list]:
        header = ["true\\pred", *self.class_names]
        return [header] + [
            [name, *self.counts[i].tolist()]
            for i, name in enumerate(self.class_names)
        ]

    def save_csv(self, path) -> None:
        write_csv(path, self.to_rows())

    def save_json(self, path) -> None:
        payload = {
            "class_names": list(self.class_names),
            "counts": self.counts.tolist(),
            "total": self.total,
        }
        write_json(path, payload)


@dataclass(frozen=True)
class ConfidenceInterval:
    estimate: float
    lower: float
    upper: float
    level: float
    n: int


@dataclass(frozen=True)
class ClassScores:
    precision: np.ndarray  # NaN where the predicted-column is empty
    recall: np.ndarray  # NaN where the ground-truth row is empty
    accuracy: float
    undefined_precision: tuple[int, ...]
    undefined_recall: tuple[int, ...]


@dataclass(frozen=True)
class IoUResult:
    per_class: np.ndarray  # NaN where the union is empty
    mean_foreground: float  # mean over classes 1..K-1 with non-empty union
    excluded: tuple[int, ...]  # classes skipped for empty union


@dataclass(frozen=True)
class PixelAccuracy:
    overall: float
    per_class: np.ndarray  # recall per ground-truth class, NaN if absent


def confusion(pred_labels, true_labels, k: int, class_names=None) -> ConfusionMatrix:
    """Count a K x K confusion matrix; entry (i, j) = (true i, predicted j)."""
    pred = np.asarray(pred_labels).reshape(-1)
    true = np.asarray(true_labels).reshape(-1)
    if pred.shape != true.shape:
        raise ShapeError(
            f"prediction/truth lengths differ: {pred.shape} vs {true.shape}"
        )
    for name, arr in (("predicted", pred), ("true", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ContractError(f"{name} labels outside [0, {k}): "
                                f"range {arr.min()}..{arr.max()}")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (true.astype(np.int64), pred.astype(np.int64)), 1)
    if class_names is None:
        class_names = tuple(f"class{i}" for i in range(k))
    return ConfusionMatrix(counts=counts, class_names=tuple(class_names))


def precision_recall_accuracy(cm: ConfusionMatrix) -> ClassScores:
    """Per-class precision/recall and overall accuracy from counts."""
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise DegenerateInputError("confusion matrix is empty")
    diag = np.diag(counts)
    rows, cols = counts.sum(axis=1), counts.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(rows > 0, diag / rows, np.nan)
        precision = np.where(cols > 0, diag / cols, np.nan)
    return ClassScores(
        precision=precision,
        recall=recall,
        accuracy=float(diag.sum() / total),
        undefined_precision=tuple(np.flatnonzero(cols == 0).tolist()),
        undefined_recall=tuple(np.flatnonzero(rows == 0).tolist()),
    )


def z_quantile(level: float) -> float:
    """Two-sided normal quantile for a confidence level in (0, 1)."""
    if not 0.0 < level < 1.0:
        raise ContractError(f"confidence level must be in (0, 1), got {level}")
    if level in _Z_TABLE:
        return _Z_TABLE[level]
    return float(norm.ppf(0.5 + level / 2.0))


def wilson_interval(p_hat: float, n: int, level: float = 0.95) -> ConfidenceInterval:
    """Score interval for a binomial proportion: both roots of the
    quadratic |p_hat - p| = Z * sqrt(p (1 - p) / N).

    The point estimate is the measured accuracy; at p_hat = 1 the upper
    endpoint collapses to exactly 1 and the lower to 1 / (1 + Z^2/N).
    """
    if n < 1:
        raise DegenerateInputError(f"interval needs N >= 1, got {n}")
    if not 0.0 <= p_hat <= 1.0:
        raise ContractError(f"estimate must be in [0, 1], got {p_hat}")
    z = z_quantile(level)
    z2n = z * z / n
    denom = 1.0 + z2n
    center = (p_hat + z2n / 2.0) / denom
    half = z * np.sqrt(p_hat * (1.0 - p_hat) / n + z2n / (4.0 * n)) / denom
    lower, upper = center - half, center + half
    # the exact roots always bracket p_hat inside [0, 1]; clamp out the
    # floating-point residue so the invariant holds at the extremes too
    lower = min(max(lower, 0.0), p_hat)
    upper = max(min(upper, 1.0), p_hat)
    # at the extremes the roots have exact closed forms; use them instead of
    # carrying the sqrt's rounding residue through
    if p_hat == 1.0:
        lower, upper = 1.0 / denom, 1.0
    if p_hat == 0.0:
        lower, upper = 0.0, z2n / denom
    return ConfidenceInterval(
        estimate=float(p_hat), lower=float(lower), upper=float(upper),
        level=float(level), n=int(n),
    )


def iou(pred_mask, true_mask, k: int) -> IoUResult:
    """Per-class intersection-over-union plus the foreground mean.

    Classes whose union is empty (absent from both masks) are excluded from
    the mean and listed in ``excluded``. The mean covers classes 1..K-1:
    background (class 0) is never averaged in.
    """
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.shape != true.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    per_class = np.full(k, np.nan)
    excluded = []
    for c in range(k):
        p, t = pred == c, true == c
        union = np.logical_or(p, t).sum()
        if union == 0:
            excluded.append(c)
            continue
        per_class[c] = np.logical_and(p, t).sum() / union
    foreground = per_class[1:]
    valid = ~np.isnan(foreground)
    mean = float(foreground[valid].mean()) if valid.any() else float("nan")
    return IoUResult(per_class=per_class, mean_foreground=mean,
                     excluded=tuple(excluded))


def pixel_accuracy(pred_mask, true_mask, k: int | None = None) -> PixelAccuracy:
    """Fraction of matching pixels, overall and per ground-truth class."""
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.shape != true.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    if k is None:
        k = int(max(pred.max(initial=0), true.max(initial=0))) + 1
    match = pred == true
    per_class = np.full(k, np.nan)
    for c in range(k):
        t = true == c
        if t.any():
            per_class[c] = match[t].mean()
    return PixelAccuracy(overall=float(match.mean()), per_class=per_class)


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def format_number(value) -> str:
    """Stable decimal formatting shared by every CSV report."""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.10g}"


def write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in rows:
            writer.writerow(
                [cell if isinstance(cell, str) else format_number(cell) for cell in row]
            )


def write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_summary_table(path, rows: list[tuple[str, ConfidenceInterval]]) -> None:
    """Accuracy-per-architecture table: architecture,accuracy,ci_lower,ci_upper."""
    out = [["architecture", "accuracy", "ci_lower", "ci_upper"]]
    out += [[name, ci.estimate, ci.lower, ci.upper] for name, ci in rows]
    write_csv(path, out)


def write_summary_json(path, rows: list[tuple[str, ConfidenceInterval]]) -> None:
    payload = [
        {
            "architecture": name,
            "accuracy": ci.estimate,
            "ci_lower": ci.lower,
            "ci_upper": ci.upper,
            "level": ci.level,
            "n": ci.n,
        }
        for name, ci in rows
    ]
    write_json(path, payload)
