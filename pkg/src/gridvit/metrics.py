"""Accuracy and macro-averaged precision/recall for the three risk grades."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError

NUM_CLASSES = 3


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    precision: float
    recall: float
    confusion: np.ndarray  # rows = true class, cols = predicted class

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricSet":
        return cls(d["accuracy"], d["precision"], d["recall"], np.asarray(d["confusion"], dtype=np.int64))


def confusion_matrix(predictions: Sequence[int], labels: Sequence[int], num_classes: int = NUM_CLASSES):
    preds = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def compute_metrics(predictions: Sequence[int], labels: Sequence[int],
                    num_classes: int = NUM_CLASSES) -> MetricSet:
    """Exact-match accuracy plus macro precision/recall.

    A class whose precision or recall denominator is empty contributes 0.
    """
    preds = np.asarray(predictions)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValidationError(f"predictions {preds.shape} and labels {labels.shape} differ in length")
    if preds.size == 0:
        raise ValidationError("cannot compute metrics on zero cases")
    for name, arr in (("predictions", preds), ("labels", labels)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValidationError(f"{name} outside [0, {num_classes})")
    cm = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    prec = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    rec = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    return MetricSet(
        accuracy=float(tp.sum() / cm.sum()),
        precision=float(prec.mean()),
        recall=float(rec.mean()),
        confusion=cm,
    )
