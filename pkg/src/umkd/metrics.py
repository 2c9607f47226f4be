"""Evaluation metrics for ordinal grading: overall accuracy, macro
per-class recall, support-weighted F1, and mean absolute grade error,
all derived from one confusion matrix.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError


@dataclass
class MetricsReport:
    oa: float
    macc: float
    weighted_f1: float
    mae: float
    per_class_recall: tuple[float, ...]
    n: int
    zero_support_classes: tuple[int, ...] = ()
    confusion: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "oa": self.oa,
            "macc": self.macc,
            "weighted_f1": self.weighted_f1,
            "mae": self.mae,
            "per_class_recall": list(self.per_class_recall),
            "n": self.n,
            "zero_support_classes": list(self.zero_support_classes),
        }

    def to_text(self) -> str:
        """Fixed-name rendering: accuracies in percent (2 dp), MAE raw (4 dp)."""
        lines = [
            f"oa: {100 * self.oa:.2f}",
            f"macc: {100 * self.macc:.2f}",
            f"weighted_f1: {100 * self.weighted_f1:.2f}",
            f"mae: {self.mae:.4f}",
            f"n: {self.n}",
        ]
        if self.zero_support_classes:
            lines.append(
                "excluded_from_macc: "
                + ",".join(str(c) for c in self.zero_support_classes)
            )
        return "\n".join(lines) + "\n"


def confusion_matrix(preds: Sequence[int], labels: Sequence[int],
                     num_classes: int) -> np.ndarray:
    """C x C count matrix with rows = true class, columns = predicted."""
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for pred, label in zip(preds, labels):
        counts[label, pred] += 1
    return counts


def compute_metrics(preds: Sequence[int], labels: Sequence[int],
                    num_classes: int) -> MetricsReport:
    """All four metrics from one pass over the predictions.

    Classes with zero support are excluded from the macro recall and
    noted in the report; a class with neither true nor predicted samples
    gets F1 = 0 (with a warning) so the weighted F1 stays defined.
    """
    preds = np.asarray(list(preds), dtype=np.int64)
    labels = np.asarray(list(labels), dtype=np.int64)
    if preds.size == 0:
        raise InputError("cannot compute metrics on empty input")
    if preds.shape != labels.shape:
        raise InputError("preds and labels must have equal length")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise InputError("labels out of range")
    if preds.min() < 0 or preds.max() >= num_classes:
        raise InputError("predictions out of range")

    cm = confusion_matrix(preds, labels, num_classes)
    total = int(cm.sum())
    support = cm.sum(axis=1)         # true counts per class
    predicted = cm.sum(axis=0)       # predicted counts per class
    correct = np.diag(cm)

    oa = float(correct.sum() / total)

    recalls = np.divide(correct, support, out=np.zeros(num_classes), where=support > 0)
    present = support > 0
    zero_support = tuple(int(c) for c in np.flatnonzero(~present))
    macc = float(recalls[present].mean())

    f1 = np.zeros(num_classes)
    for c in range(num_classes):
        denom = support[c] + predicted[c]
        if denom == 0:
            warnings.warn(f"class {c} has no true or predicted samples; F1 set to 0")
            continue
        f1[c] = 2 * correct[c] / denom  # == 2PR/(P+R) on counts
    weighted_f1 = float((support * f1).sum() / total)

    mae = float(np.abs(preds - labels).mean())

    return MetricsReport(
        oa=oa, macc=macc, weighted_f1=weighted_f1, mae=mae,
        per_class_recall=tuple(float(r) for r in recalls),
        n=total, zero_support_classes=zero_support, confusion=cm,
    )
