"""Top-1 / top-2 F1 scoring and the majority-class chance baseline.

Predictions are argmax over probability rows (ties to the lowest index); the
top-2 variant credits the true label whenever it is among the two largest
probabilities. Micro-F1 pools counts (and therefore equals accuracy for
single-label multiclass); macro-F1 averages per-class F1, excluding classes
absent from both truths and predictions, and scoring 0 for classes with
support but no true positives.
"""

from __future__ import annotations

import numpy as np

N_CLASSES = 4
_ROW_SUM_TOL = 1e-6


def top1_predictions(probs: np.ndarray) -> np.ndarray:
    return np.asarray(probs).argmax(axis=1)


def top2_effective_predictions(probs: np.ndarray, truths: np.ndarray) -> np.ndarray:
    """True label if among the two largest probabilities, else the argmax."""
    probs = np.asarray(probs, dtype=float)
    truths = np.asarray(truths)
    order = np.argsort(-probs, axis=1, kind="stable")  # ties -> lower index first
    top2 = order[:, :2]
    in_top2 = (top2 == truths[:, None]).any(axis=1)
    return np.where(in_top2, truths, top2[:, 0])


def confusion_matrix(truths, preds, n_classes: int = N_CLASSES) -> np.ndarray:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(truths), np.asarray(preds)), 1)
    return m


def f1_from_confusion(m: np.ndarray) -> dict[str, float]:
    """{micro, macro} F1 from a truths x predictions count matrix."""
    total = m.sum()
    tp = np.diag(m).astype(float)
    support = m.sum(axis=1).astype(float)  # truths per class
    predicted = m.sum(axis=0).astype(float)
    micro = float(tp.sum() / total) if total else 0.0

    per_class = []
    for c in range(m.shape[0]):
        if support[c] == 0 and predicted[c] == 0:
            continue  # class absent everywhere: excluded from the macro mean
        if tp[c] == 0:
            per_class.append(0.0)
            continue
        precision = tp[c] / predicted[c]
        recall = tp[c] / support[c]
        per_class.append(2.0 * precision * recall / (precision + recall))
    macro = float(np.mean(per_class)) if per_class else 0.0
    return {"micro": micro, "macro": macro}


def _check_rows(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2:
        raise ValueError(f"expected (n, k) probabilities, got shape {probs.shape}")
    sums = probs.sum(axis=1)
    bad = np.abs(sums - 1.0) > _ROW_SUM_TOL
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"row {i} sums to {sums[i]:.8f}, not 1 within {_ROW_SUM_TOL}")
    return probs


def normalize_rows(values: np.ndarray) -> np.ndarray:
    """Scale nonnegative score rows to sum to 1 (rank-preserving)."""
    values = np.asarray(values, dtype=float)
    sums = values.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("cannot normalize a row with nonpositive sum")
    return values / sums


def f1_scores(probs: np.ndarray, truths) -> dict[str, dict[str, float]]:
    """{"top1": {micro, macro}, "top2": {micro, macro}} for probability rows."""
    probs = _check_rows(probs)
    truths = np.asarray(truths)
    top1 = f1_from_confusion(confusion_matrix(truths, top1_predictions(probs)))
    top2 = f1_from_confusion(confusion_matrix(truths, top2_effective_predictions(probs, truths)))
    return {"top1": top1, "top2": top2}


def prevalence(truths, n_classes: int = N_CLASSES) -> np.ndarray:
    truths = np.asarray(truths)
    if truths.size == 0:
        raise ValueError("empty label set")
    counts = np.bincount(truths, minlength=n_classes).astype(float)
    return counts / counts.sum()


def chance_baseline(test_truths) -> dict:
    """Constant modal-class predictor scored by f1_scores.

    Every probability row is the empirical test prevalence vector, whose
    argmax is the modal class and whose two largest entries are the two most
    frequent classes; its top-1 micro F1 equals the modal prevalence.
    """
    truths = np.asarray(test_truths)
    prev = prevalence(truths)
    probs = np.tile(prev, (truths.shape[0], 1))
    scores = f1_scores(probs, truths)
    scores["prevalence"] = [float(v) for v in prev]
    return scores
