"""Accuracy, class-wise accuracy, class false-positive scores and worst-class summaries."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class PredLog:
    preds: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        preds = np.asarray(self.preds, dtype=np.int64).ravel()
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        object.__setattr__(self, "preds", preds)
        object.__setattr__(self, "labels", labels)
        if preds.shape != labels.shape:
            raise MetricError(f"{preds.size} predictions for {labels.size} labels")
        k = self.num_classes
        for name, v in (("preds", preds), ("labels", labels)):
            if v.size and (v.min() < 0 or v.max() >= k):
                raise MetricError(f"{name} must lie in [0, {k})")

    def __len__(self) -> int:
        return int(self.labels.size)

    def concat(self, other: "PredLog") -> "PredLog":
        return PredLog(np.concatenate([self.preds, other.preds]), np.concatenate([self.labels, other.labels]), self.num_classes)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "pred", "label"])
        for i, (p, y) in enumerate(zip(self.preds, self.labels)):
            w.writerow([i, int(p), int(y)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, num_classes: int) -> "PredLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(np.array([int(r["pred"]) for r in rows], dtype=np.int64),
                   np.array([int(r["label"]) for r in rows], dtype=np.int64), num_classes)

    @classmethod
    def empty(cls, num_classes: int) -> "PredLog":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), num_classes)


def _nonempty(log: PredLog) -> None:
    if len(log) == 0:
        raise MetricError("metric requires a non-empty prediction log")


def confusion_matrix(log: PredLog) -> np.ndarray:
    """Rows are true labels, columns predictions."""
    k = log.num_classes
    return np.bincount(log.labels * k + log.preds, minlength=k * k).reshape(k, k)


def clean_accuracy(log: PredLog) -> float:
    _nonempty(log)
    return float(np.count_nonzero(log.preds == log.labels)) / len(log)


def class_accuracy(log: PredLog, c: int) -> float:
    """(TP_c + TN_c) / N, the printed class-wise accuracy."""
    _nonempty(log)
    tp = np.count_nonzero((log.preds == c) & (log.labels == c))
    tn = np.count_nonzero((log.preds != c) & (log.labels != c))
    return (tp + tn) / len(log)


def class_recall(log: PredLog, c: int) -> float:
    """Fraction of class-c samples predicted as c; NaN when class c is absent."""
    _nonempty(log)
    n_c = np.count_nonzero(log.labels == c)
    if n_c == 0:
        return math.nan
    return np.count_nonzero((log.preds == c) & (log.labels == c)) / n_c


def cfps(log: PredLog, c: int) -> float:
    """Share of all misclassifications that were predicted as class c (1/K if none)."""
    _nonempty(log)
    wrong = log.preds != log.labels
    n_wrong = np.count_nonzero(wrong)
    if n_wrong == 0:
        return 1.0 / log.num_classes
    return np.count_nonzero(wrong & (log.preds == c)) / n_wrong


def cfps_vector(log: PredLog) -> np.ndarray:
    _nonempty(log)
    wrong = log.preds != log.labels
    n_wrong = np.count_nonzero(wrong)
    if n_wrong == 0:
        return np.full(log.num_classes, 1.0 / log.num_classes)
    return np.bincount(log.preds[wrong], minlength=log.num_classes) / n_wrong


def class_accuracy_vector(log: PredLog) -> np.ndarray:
    return np.array([class_accuracy(log, c) for c in range(log.num_classes)])


def class_recall_vector(log: PredLog) -> np.ndarray:
    return np.array([class_recall(log, c) for c in range(log.num_classes)])


@dataclass(frozen=True)
class WorstClass:
    value: float
    cls: int
    decile_mean: float

    def as_dict(self) -> dict:
        return {"min": self.value, "argmin": self.cls, "worst_decile_mean": self.decile_mean}


def worst_class_summary(per_class) -> WorstClass:
    """Minimum, its class, and mean over the worst ceil(K/10) classes.

    NaN entries (absent classes) are ignored.
    """
    values = np.asarray(per_class, dtype=np.float64)
    if values.size == 0:
        raise MetricError("worst-class summary of an empty list")
    valid = np.flatnonzero(~np.isnan(values))
    if valid.size == 0:
        raise MetricError("worst-class summary: every class is NaN")
    order = valid[np.argsort(values[valid], kind="stable")]
    n_worst = math.ceil(values.size / 10)
    return WorstClass(float(values[order[0]]), int(order[0]), float(values[order[:n_worst]].mean()))


def robust_accuracy(params, attack: Callable, x: np.ndarray, y: np.ndarray, num_classes: int,
                    batch_size: int = 512) -> tuple[float, PredLog]:
    """Accuracy on attacked inputs.

    ``attack(params, x_batch, y_batch, batch_index)`` returns perturbed inputs.
    The figure is specific to that attack; it lower-bounds nothing universally.
    """
    from .model import predict

    if len(y) == 0:
        raise MetricError("robust accuracy of an empty dataset")
    preds = []
    for b, start in enumerate(range(0, len(y), batch_size)):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        preds.append(predict(params, attack(params, xb, yb, b)))
    log = PredLog(np.concatenate(preds), y, num_classes)
    return clean_accuracy(log), log
