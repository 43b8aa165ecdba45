"""Confusion-matrix metrics with support-weighted averaging."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsReport:
    confusion: np.ndarray          # rows = truth, columns = prediction
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: list[dict]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": self.confusion.tolist(),
            "per_class": self.per_class,
        }


def confusion_matrix(truth, pred, k: int) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape:
        raise ValueError(f"metrics: {truth.size} labels vs {pred.size} predictions")
    for name, v in (("truth", truth), ("pred", pred)):
        if v.size and (v.min() < 0 or v.max() >= k):
            raise ValueError(f"metrics: {name} labels must lie in [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def report_from_confusion(cm: np.ndarray) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("metrics: empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    precision = _ratio(tp, predicted)
    recall = _ratio(tp, support)
    f1 = _ratio(2 * precision * recall, precision + recall)
    w = support / total
    per_class = [
        {"class": i, "support": int(support[i]), "precision": float(precision[i]),
         "recall": float(recall[i]), "f1": float(f1[i])}
        for i in range(len(cm))
    ]
    return MetricsReport(
        confusion=cm,
        accuracy=float(tp.sum() / total),
        precision=float(w @ precision),
        recall=float(w @ recall),
        f1=float(w @ f1),
        per_class=per_class,
    )


def classification_report(truth, pred, k: int) -> MetricsReport:
    return report_from_confusion(confusion_matrix(truth, pred, k))
