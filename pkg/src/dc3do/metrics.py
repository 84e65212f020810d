"""Accuracy bookkeeping: per-class accuracy, its mean, confusion matrices, reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def per_class_accuracy(preds, labels, classes=None) -> dict[int, float]:
    """Fraction of the objects labeled ``c`` that were predicted ``c``, for each class.

    ``classes`` defaults to the labels present. A requested class with no
    labeled objects is an error, not a zero.
    """
    preds, labels = list(preds), list(labels)
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions for {len(labels)} labels")
    classes = sorted(set(labels)) if classes is None else list(classes)
    acc = {}
    for c in classes:
        idx = [i for i, y in enumerate(labels) if y == c]
        if not idx:
            raise ValueError(f"class {c} has no labeled objects")
        acc[c] = sum(preds[i] == c for i in idx) / len(idx)
    return acc


def mean_per_class_accuracy(accuracies) -> float:
    values = list(accuracies.values()) if isinstance(accuracies, dict) else list(accuracies)
    if not values:
        raise ValueError("no class accuracies to average")
    return sum(values) / len(values)


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, y in zip(preds, labels):
        cm[y, p] += 1
    return cm


def overall_accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    return float(np.mean(preds == labels))


@dataclass
class EvalReport:
    class_names: dict[int, str]
    accuracy: dict[int, float]  # one-vs-rest A_c
    mean_accuracy: float
    multiclass_accuracy: dict[int, float] = field(default_factory=dict)
    multiclass_mean: float | None = None
    confusion: np.ndarray | None = None
    seconds_per_object: list[float] = field(default_factory=list)

    @classmethod
    def build(cls, labels, binary_preds, multiclass_preds=None, n_classes=None, class_names=None, times=None):
        classes = sorted(set(labels)) if n_classes is None else list(range(n_classes))
        names = class_names or {c: str(c) for c in classes}
        acc = per_class_accuracy(binary_preds, labels, classes)
        report = cls(names, acc, mean_per_class_accuracy(acc), seconds_per_object=list(times or []))
        if multiclass_preds is not None:
            report.multiclass_accuracy = per_class_accuracy(multiclass_preds, labels, classes)
            report.multiclass_mean = mean_per_class_accuracy(report.multiclass_accuracy)
            report.confusion = confusion_matrix(multiclass_preds, labels, len(classes))
        return report

    def rows(self) -> list[dict]:
        rows = []
        for c, a in self.accuracy.items():
            row = {"class": self.class_names.get(c, str(c)), "A_c": a}
            if self.multiclass_accuracy:
                row["multiclass_acc"] = self.multiclass_accuracy[c]
            rows.append(row)
        mean = {"class": "mean", "A_c": self.mean_accuracy}
        if self.multiclass_accuracy:
            mean["multiclass_acc"] = self.multiclass_mean
        rows.append(mean)
        return rows

    def write_csv(self, path) -> None:
        rows = self.rows()
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)

    def to_dict(self) -> dict:
        out = {
            "rows": self.rows(),
            "mean_accuracy": self.mean_accuracy,
            "multiclass_mean": self.multiclass_mean,
            "confusion": None if self.confusion is None else self.confusion.tolist(),
        }
        if self.seconds_per_object:
            out["mean_seconds_per_object"] = float(np.mean(self.seconds_per_object))
        return out

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
