"""Classification metrics and aggregation of repeated runs."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .exceptions import BadLabel, EmptyRuns, LengthMismatch, NoSupportedClasses


def confusion_matrix(truth, preds, n_classes: int) -> np.ndarray:
    """``cm[t, p]`` counts samples of true class ``t`` predicted as ``p``."""
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    if len(truth) == 0 or len(truth) != len(preds):
        raise LengthMismatch(f"got {len(truth)} labels and {len(preds)} predictions")
    for name, arr in (("truth", truth), ("preds", preds)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise BadLabel(f"{name} contains a label outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, preds), 1)
    return cm


def balanced_accuracy(cm) -> float:
    """Mean per-class recall over the classes that have support."""
    cm = np.asarray(cm)
    support = cm.sum(axis=1)
    has = support > 0
    if not has.any():
        raise NoSupportedClasses("confusion matrix is empty")
    recall = np.diag(cm)[has] / support[has]
    return float(recall.mean())


def weighted_f1(cm) -> float:
    """Support-weighted mean of per-class F1; a class with P + R = 0 scores 0."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise NoSupportedClasses("confusion matrix is empty")
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    # F1 = 2TP / (support + predicted), which is 0 exactly when P + R = 0
    denom = support + predicted
    f1 = np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float((f1 * support).sum() / total)


def aggregate_runs(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation of per-run metric values."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise EmptyRuns("no runs to aggregate")
    return float(arr.mean()), float(arr.std(ddof=0))


def format_mean_std(mean: float, std: float) -> str:
    """Percent with two decimals, e.g. ``56.31±1.66``."""
    return f"{100 * mean:.2f}±{100 * std:.2f}"


def metric_document(metric: str, split: str, values: Sequence[float], seeds: Sequence[int]) -> dict:
    mean, std = aggregate_runs(values)
    return {
        "metric": metric,
        "split": split,
        "mean_percent": round(100 * mean, 2),
        "std_percent": round(100 * std, 2),
        "per_run": [float(v) for v in values],
        "seeds": [int(s) for s in seeds],
    }
