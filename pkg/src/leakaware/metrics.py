"""Classification metrics and fold aggregation."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def roc_auc(truth, scores) -> float:
    """Probability a random positive outscores a random negative, ties worth 1/2.

    Computed exactly from mid-ranks (Mann-Whitney U).
    """
    truth = np.asarray(truth).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC is undefined when truth contains a single class")
    ranks = rankdata(scores)
    u = ranks[truth].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def confusion_matrix(truth, pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, int), np.asarray(pred, int)), 1)
    return cm


def macro_f1(cm: np.ndarray) -> float:
    tp = np.diag(cm).astype(float)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    denom = pred_pos + true_pos
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def compute_metrics(truth, scores) -> dict:
    """Accuracy (percent), ROC-AUC (binary only), macro-F1 and confusion matrix.

    ``scores`` is an (n, n_classes) array of class probabilities whose rows sum
    to one. Predictions are the argmax with ties going to the lower index.
    """
    truth = np.asarray(truth, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != truth.shape[0]:
        raise ValueError(f"scores shape {scores.shape} does not match {truth.shape[0]} labels")
    if not np.allclose(scores.sum(axis=1), 1.0, atol=1e-6, rtol=0):
        raise ValueError("score rows must sum to 1 within 1e-6")
    n_classes = scores.shape[1]
    if truth.size and (truth.min() < 0 or truth.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    pred = scores.argmax(axis=1)
    cm = confusion_matrix(truth, pred, n_classes)
    out = {
        "accuracy": 100.0 * float((pred == truth).mean()) if truth.size else 0.0,
        "roc_auc": roc_auc(truth == 1, scores[:, 1]) if n_classes == 2 else None,
        "macro_f1": macro_f1(cm),
        "confusion": cm.tolist(),
    }
    return out


def aggregate_folds(values) -> tuple[float, float]:
    """Mean and population (divide-by-K) standard deviation."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("need at least one fold")
    return float(arr.mean()), float(arr.std(ddof=0))
