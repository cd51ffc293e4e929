"""Alignment, cycle and downstream-task measures."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .numkit import ShapeError, as_matrix


@dataclass
class GapReport:
    energy_distance: float
    centroid_gap: float
    n_a: int
    n_b: int

    def to_dict(self) -> dict:
        return {"energy_distance": self.energy_distance, "centroid_gap": self.centroid_gap,
                "n_a": self.n_a, "n_b": self.n_b}


def _mean_pairwise(a: np.ndarray, b: np.ndarray) -> float:
    # fsum is exactly rounded, so the result does not depend on pair order
    return math.fsum(cdist(a, b).ravel()) / (a.shape[0] * b.shape[0])


def energy_distance(a, b) -> float:
    """``2 E|a-b| - E|a-a'| - E|b-b'|`` over all pairs (V-statistic)."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("energy distance needs at least two points per set")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    cross = _mean_pairwise(a, b)
    within = _mean_pairwise(a, a) + _mean_pairwise(b, b)
    return max(2.0 * cross - within, 0.0)


def centroid_gap(a, b) -> float:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("centroid gap of an empty set")
    return float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))


def gap_report(a, b) -> GapReport:
    a = as_matrix(a)
    b = as_matrix(b)
    return GapReport(energy_distance(a, b), centroid_gap(a, b), a.shape[0], b.shape[0])


def cycle_error(x_src, x_rec) -> float:
    """Mean over samples of ``|x_src - x_rec|^2 / d``."""
    x_src = as_matrix(x_src)
    x_rec = as_matrix(x_rec)
    if x_src.shape != x_rec.shape:
        raise ShapeError(f"shape mismatch: {x_src.shape} vs {x_rec.shape}")
    diff = x_src - x_rec
    return float(np.mean(np.sum(diff * diff, axis=1)) / x_src.shape[1])


def bin_labels(values, lo: float, hi: float, k: int) -> np.ndarray:
    """Equal-width bins over ``[lo, hi]``; values outside are clamped to the end bins."""
    v = np.asarray(values, dtype=np.float64)
    idx = np.floor((v - lo) / (hi - lo) * k).astype(np.int64)
    return np.clip(idx, 0, k - 1)


def weighted_f1(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    total = 0.0
    for c in np.unique(y_true):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        f1 = 0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn)
        total += f1 * np.sum(y_true == c)
    return float(total / len(y_true))


def pearson(a, b) -> tuple[float, bool]:
    """Correlation and a flag set when either side has zero variance."""
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0.0:
        return 0.0, True
    return float(a @ b) / denom, False


def task_metrics(predictions, labels, task: str, label_range: tuple[float, float] = (-3.0, 3.0),
                 k_bins: int = 7) -> dict:
    """Downstream metrics as a flat dict plus a ``flags`` list.

    Regression: ``Acc{k}`` from equal-width bins over ``label_range``, ``Acc2``
    and ``F1`` (weighted) from thresholding at the range midpoint, ``MAE`` and
    ``Corr``.  Classification: ``Acc`` / ``Acc{C}`` top-1 accuracy and weighted
    ``F1``.  Accuracies and F1 are percentages.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("no samples")
    flags: list[str] = []
    if task == "classification":
        p = np.asarray(predictions, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != len(labels):
            raise ShapeError("classification predictions must be [n x C] scores")
        pred = np.argmax(p, axis=1)
        acc = 100.0 * float(np.mean(pred == labels))
        return {"Acc": acc, f"Acc{p.shape[1]}": acc, "F1": 100.0 * weighted_f1(labels, pred), "flags": flags}
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = labels.astype(np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ShapeError("regression predictions and labels differ in length")
    lo, hi = label_range
    mid = 0.5 * (lo + hi)
    acck = 100.0 * float(np.mean(bin_labels(p, lo, hi, k_bins) == bin_labels(y, lo, hi, k_bins)))
    pos_p, pos_y = p >= mid, y >= mid
    corr, degenerate = pearson(p, y)
    if degenerate:
        flags.append("corr_zero_variance")
    return {
        f"Acc{k_bins}": acck,
        "Acc2": 100.0 * float(np.mean(pos_p == pos_y)),
        "F1": 100.0 * weighted_f1(pos_y, pos_p),
        "MAE": float(np.mean(np.abs(p - y))),
        "Corr": corr,
        "flags": flags,
    }
