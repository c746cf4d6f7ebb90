"""Scalar evaluation metrics: MCC, Pearson correlation, R^2, top-k retrieval.

Degenerate inputs follow fixed conventions (documented per function) so that
bootstrap replicates with pathological resamples stay defined wherever a
sensible value exists; R^2 with constant truth is the one genuinely undefined
case and raises.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ArgumentError, UndefinedError


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """C x C integer counts; rows are true class, columns predicted."""
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ArgumentError(f"shape mismatch {t.shape} vs {p.shape}")
    if t.size < 1:
        raise ArgumentError("empty prediction set")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def mcc(cm: np.ndarray) -> float:
    """Matthews correlation coefficient of a confusion matrix.

    Binary matrices use (TP*TN - FP*FN)/sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN));
    larger matrices use the multiclass generalization. Any zero factor in the
    denominator yields 0.0 by convention.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ArgumentError(f"confusion matrix must be square, got {cm.shape}")
    if cm.sum() < 1:
        raise ArgumentError("confusion matrix has zero total count")
    if cm.shape[0] == 2:
        tn, fp, fn, tp = int(cm[0, 0]), int(cm[0, 1]), int(cm[1, 0]), int(cm[1, 1])
        denom2 = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        if denom2 == 0:
            return 0.0
        return (tp * tn - fp * fn) / math.sqrt(denom2)
    s = int(cm.sum())
    c = int(np.trace(cm))
    t_k = cm.sum(axis=1)  # true counts per class
    p_k = cm.sum(axis=0)  # predicted counts per class
    cov = c * s - int(p_k @ t_k)
    var_p = s * s - int(p_k @ p_k)
    var_t = s * s - int(t_k @ t_k)
    if var_p == 0 or var_t == 0:
        return 0.0
    return cov / math.sqrt(var_p) / math.sqrt(var_t)


def pearson(pred, truth) -> float:
    """Sample Pearson correlation; zero variance in either vector -> 0.0."""
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ArgumentError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ArgumentError("pearson needs at least 2 observations")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(xc @ xc)
    sy = float(yc @ yc)
    if sx == 0.0 or sy == 0.0:
        return 0.0
    return float(xc @ yc) / math.sqrt(sx) / math.sqrt(sy)


def pearson_multi(pred, truth, mode: str = "per_target") -> float:
    """Pearson correlation for multi-target regression.

    ``per_target`` (default) averages per-column correlations with equal
    weights; ``flattened`` correlates the flattened matrices instead.
    """
    p = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    t = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if p.shape != t.shape:
        raise ArgumentError(f"shape mismatch {p.shape} vs {t.shape}")
    if mode == "flattened":
        return pearson(p.ravel(), t.ravel())
    if mode != "per_target":
        raise ArgumentError(f"unknown pearson mode {mode!r}")
    return float(np.mean([pearson(p[:, j], t[:, j]) for j in range(p.shape[1])]))


def r2(pred, truth) -> float:
    """Coefficient of determination, 1 - SS_res/SS_tot; may be negative."""
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ArgumentError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ArgumentError("r2 needs at least 2 observations")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedError("r2 undefined: truth vector is constant")
    ss_res = float(np.sum((y - x) ** 2))
    return 1.0 - ss_res / ss_tot


def topk_accuracy(sim: np.ndarray, true_match, k: int) -> float:
    """Fraction of queries whose true gallery index is among the k largest
    similarities. Similarity ties are broken toward the lower gallery index."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2:
        raise ArgumentError(f"similarity matrix must be 2-D, got {sim.shape}")
    true_match = np.asarray(true_match, dtype=np.int64)
    n_query, n_gallery = sim.shape
    if true_match.shape != (n_query,):
        raise ArgumentError("true_match length must equal the query count")
    if not 1 <= k <= n_gallery:
        raise ArgumentError(f"k={k} outside [1, {n_gallery}]")
    hits = 0
    gallery_idx = np.arange(n_gallery)
    for q in range(n_query):
        # lexsort: primary key last -> descending similarity, then low index
        order = np.lexsort((gallery_idx, -sim[q]))
        if true_match[q] in order[:k]:
            hits += 1
    return hits / n_query
