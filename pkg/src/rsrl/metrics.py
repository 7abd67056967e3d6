"""Confusion-matrix metrics: per-class precision/recall/F, accuracy, and
the total F-measure used to pick the best training round.

Class labels are zero-based here; callers working with 1-based scores
subtract one. A class that never gets predicted has precision 0, one with
zero support is excluded from the total F-measure.
"""

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, EmptyMatrix, LengthMismatch, NoSupportedClass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise LengthMismatch("confusion matrix must be square")
        if (counts < 0).any():
            raise EmptyInput("confusion counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())


def confusion(true_labels, pred_labels, n_classes) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(pred_labels, dtype=np.int64)
    if t.ndim != 1 or p.ndim != 1:
        raise LengthMismatch("label sequences must be one-dimensional")
    if t.shape[0] != p.shape[0]:
        raise LengthMismatch(f"{t.shape[0]} true labels vs {p.shape[0]} predictions")
    if t.shape[0] == 0:
        raise EmptyInput("no labels to tally")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise EmptyInput(f"{name} labels must lie in [0, {n_classes})")
    counts = np.bincount(t * n_classes + p, minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes))


def f_measure(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if not 0.0 <= precision <= 1.0 or not 0.0 <= recall <= 1.0:
        raise ValueError("precision and recall must lie in [0, 1]")
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f_measure: float
    support: int

    def to_json_dict(self):
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f_measure": self.f_measure,
            "support": self.support,
        }


def per_class_metrics(cm: ConfusionMatrix) -> tuple:
    metrics = []
    for i in range(cm.n_classes):
        tp = int(cm.counts[i, i])
        predicted = int(cm.counts[:, i].sum())
        support = int(cm.counts[i, :].sum())
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        metrics.append(
            ClassMetrics(
                precision=precision,
                recall=recall,
                f_measure=f_measure(precision, recall),
                support=support,
            )
        )
    return tuple(metrics)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix has no samples")
    return float(np.trace(cm.counts)) / cm.total


def total_f(per_class) -> float:
    """Unweighted mean F-measure over classes with nonzero support."""
    supported = [m.f_measure for m in per_class if m.support > 0]
    if not supported:
        raise NoSupportedClass("every class has zero support")
    return sum(supported) / len(supported)


@dataclass(frozen=True)
class EvalSummary:
    per_class: tuple
    accuracy: float
    total_f_measure: float
    included_classes: tuple  # zero-based indices of classes with support

    def to_json_dict(self):
        return {
            "accuracy": self.accuracy,
            "total_f_measure": self.total_f_measure,
            "included_classes": list(self.included_classes),
            "per_class": [m.to_json_dict() for m in self.per_class],
        }


def summarize(cm: ConfusionMatrix) -> EvalSummary:
    per_class = per_class_metrics(cm)
    return EvalSummary(
        per_class=per_class,
        accuracy=accuracy(cm),
        total_f_measure=total_f(per_class),
        included_classes=tuple(i for i, m in enumerate(per_class) if m.support > 0),
    )


def evaluate_labels(true_labels, pred_labels, n_classes) -> EvalSummary:
    return summarize(confusion(true_labels, pred_labels, n_classes))
