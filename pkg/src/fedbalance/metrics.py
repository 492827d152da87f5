"""Evaluation metrics: per-class-set accuracy and macro one-vs-rest AUC."""

from __future__ import annotations

import logging

import numpy as np

from . import nn
from .data import Dataset

log = logging.getLogger(__name__)


def predict(model: nn.MlpModel, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = np.empty(features.shape[0], dtype=np.int64)
    for start in range(0, features.shape[0], batch_size):
        chunk = features[start : start + batch_size]
        out[start : start + chunk.shape[0]] = nn.forward(model, chunk).probs.argmax(axis=1)
    return out


def scores(model: nn.MlpModel, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = np.empty((features.shape[0], model.class_count))
    for start in range(0, features.shape[0], batch_size):
        chunk = features[start : start + batch_size]
        out[start : start + chunk.shape[0]] = nn.forward(model, chunk).probs
    return out


def class_mean_accuracy(
    model: nn.MlpModel,
    test_set: Dataset,
    classes: tuple[int, ...] | list[int],
) -> float:
    """Mean per-class accuracy (percent) over the given classes."""
    if not classes:
        raise ValueError("need at least one class")
    pred = predict(model, test_set.features)
    per_class = []
    for c in classes:
        mask = test_set.labels == c
        if not mask.any():
            raise ValueError(f"test set has no samples of class {c}")
        per_class.append(float((pred[mask] == c).mean()))
    return 100.0 * float(np.mean(per_class))


def ac_minority(
    model: nn.MlpModel, test_set: Dataset, minority_classes: tuple[int, ...]
) -> float:
    return class_mean_accuracy(model, test_set, minority_classes)


def ac_majority(
    model: nn.MlpModel, test_set: Dataset, minority_classes: tuple[int, ...]
) -> float:
    majority = tuple(c for c in range(test_set.class_count) if c not in minority_classes)
    return class_mean_accuracy(model, test_set, majority)


def _midranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based), ties sharing their midrank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_binary(scores_1d: np.ndarray, positives: np.ndarray) -> float:
    """Rank-statistic AUC: P(random positive scores above random negative).

    Ties count one half, via midranks.
    """
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative")
    ranks = _midranks(np.asarray(scores_1d, dtype=np.float64))
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_macro_ovr(score_matrix: np.ndarray, labels: np.ndarray) -> float:
    """Macro-averaged one-vs-rest AUC over all classes present both ways.

    Classes lacking a positive or a negative sample are skipped and
    logged, not treated as zero.
    """
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(labels)
    per_class = []
    for c in range(score_matrix.shape[1]):
        positives = labels == c
        if not positives.any() or positives.all():
            log.warning("auc_macro_ovr: class %d skipped (one-sided labels)", c)
            continue
        per_class.append(auc_binary(score_matrix[:, c], positives))
    if not per_class:
        raise ValueError("no class had both positives and negatives")
    return float(np.mean(per_class))
