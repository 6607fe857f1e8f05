"""Confusion matrices, grain statistics, 28->14 collapse and LAWRFD."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset_io import class_grains, class_tags, n_classes

GRAINS = ("fine", "coarse", "both")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted class
    class_mode: str

    @property
    def labels(self) -> list[str]:
        return class_tags(self.class_mode)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())

    def rates(self) -> np.ndarray:
        """Row-normalised percentages; empty rows are NaN."""
        rows = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, 100.0 * self.counts / rows, np.nan)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_mode != self.class_mode:
            raise ValueError("cannot add confusion matrices of different class modes")
        return ConfusionMatrix(self.counts + other.counts, self.class_mode)

    def to_csv(self, percent: bool = False) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["true\\predicted"] + self.labels)
        values = self.rates() if percent else self.counts
        for tag, row in zip(self.labels, values):
            if percent:
                writer.writerow([tag] + ["" if np.isnan(v) else f"{v:.2f}" for v in row])
            else:
                writer.writerow([tag] + [str(int(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        labels = rows[0][1:]
        mode = "c14" if len(labels) == 14 else "c28"
        if labels != class_tags(mode) or [r[0] for r in rows[1:]] != labels:
            raise ValueError("confusion matrix table has unexpected labels")
        return cls(np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64), mode)


def confusion_matrix(true, predicted, class_mode: str) -> ConfusionMatrix:
    """Tally 1-based (true, predicted) class pairs."""
    true, predicted = np.asarray(true), np.asarray(predicted)
    c = n_classes(class_mode)
    if true.size == 0:
        raise ValueError("no predictions")
    if true.shape != predicted.shape:
        raise ValueError("true and predicted differ in length")
    for name, arr in (("true", true), ("predicted", predicted)):
        bad = arr[(arr < 1) | (arr > c)]
        if bad.size:
            raise ValueError(f"{name} label {int(bad[0])} out of range 1..{c}")
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (true - 1, predicted - 1), 1)
    return ConfusionMatrix(counts, class_mode)


def per_class_accuracy(cm: ConfusionMatrix) -> np.ndarray:
    """Diagonal over row sum per class; NaN marks classes with no test samples."""
    rows = cm.counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(cm.counts) / rows, np.nan)


@dataclass(frozen=True)
class GrainStats:
    best: float
    worst: float
    mean: float
    std: float
    n_units: int


@dataclass(frozen=True)
class GrainReport:
    fine: GrainStats
    coarse: GrainStats
    both: GrainStats

    def __getitem__(self, grain: str) -> GrainStats:
        return getattr(self, grain)

    def to_dict(self) -> dict:
        return {g: vars(self[g]) for g in GRAINS}


def _stats(values: Sequence[float]) -> GrainStats:
    v = np.asarray([x for x in values if not np.isnan(x)], dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty grain group")
    return GrainStats(float(v.max()), float(v.min()), float(v.mean()), float(v.std()), int(v.size))


def grain_summary(units: Mapping[str, Sequence[float]]) -> GrainReport:
    """Best/worst/mean/population-std of unit accuracies for each of fine, coarse, both."""
    return GrainReport(*(_stats(units[g]) for g in GRAINS))


def grain_mask(labels, class_mode: str, grain: str) -> np.ndarray:
    labels = np.asarray(labels)
    if grain == "both":
        return np.ones(labels.shape, dtype=bool)
    grains = np.array(class_grains(class_mode))
    return grains[labels - 1] == grain


def grain_rates(true, predicted, class_mode: str) -> dict[str, float]:
    """Accuracy (%) of one unit restricted to each grain; NaN if the unit has none of that grain."""
    true, predicted = np.asarray(true), np.asarray(predicted)
    out = {}
    for g in GRAINS:
        m = grain_mask(true, class_mode, g)
        out[g] = float(100.0 * np.mean(true[m] == predicted[m])) if m.any() else float("nan")
    return out


def gesture_units(cm: ConfusionMatrix) -> dict[str, list[float]]:
    """Per-class accuracies (%) grouped by grain, for the per-gesture reading of the table."""
    acc = 100.0 * per_class_accuracy(cm)
    grains = class_grains(cm.class_mode)
    units = {g: [a for a, gr in zip(acc, grains) if gr == g] for g in ("fine", "coarse")}
    units["both"] = list(acc)
    return units


def collapse_labels(labels) -> np.ndarray:
    """Map 28-class indices (g, f) to the 14-class gesture index g."""
    labels = np.asarray(labels)
    return (labels - 1) // 2 + 1


def collapse_28_to_14(true_or_cm, predicted=None):
    """Merge the two finger configurations of each gesture.

    Accepts either a 28-class :class:`ConfusionMatrix` or ``(true, predicted)``
    label arrays, and returns the same kind of object at 14 classes.
    """
    if isinstance(true_or_cm, ConfusionMatrix):
        if true_or_cm.class_mode != "c28":
            raise ValueError("collapse needs a 28-class confusion matrix")
        c = true_or_cm.counts
        return ConfusionMatrix(c.reshape(14, 2, 14, 2).sum(axis=(1, 3)), "c14")
    return collapse_labels(true_or_cm), collapse_labels(predicted)


def lawrfd(true28, predicted28) -> float:
    """Accuracy gained by ignoring finger configuration: acc(collapsed) - acc(28-class)."""
    true28, predicted28 = np.asarray(true28), np.asarray(predicted28)
    if true28.size == 0:
        raise ValueError("no predictions")
    t14, p14 = collapse_28_to_14(true28, predicted28)
    return float(np.mean(t14 == p14) - np.mean(true28 == predicted28))


def intra_pair_errors(true28, predicted28) -> int:
    true28, predicted28 = np.asarray(true28), np.asarray(predicted28)
    return int(np.sum((true28 != predicted28) & (collapse_labels(true28) == collapse_labels(predicted28))))


def decompose_drop(accuracy14: float, accuracy28: float, lawrfd28: float) -> dict[str, float]:
    """Split the 14->28 accuracy drop into intra-gesture confusion and the rest."""
    drop = accuracy14 - accuracy28
    return {"total_drop": drop, "intra_gesture": lawrfd28, "residual": drop - lawrfd28}


@dataclass
class AggregateReport:
    network: str
    class_mode: str
    folds: list[int]
    fold_accuracy: list[float]
    fold_grain_rates: dict[str, list[float]]
    confusion: ConfusionMatrix
    grain_report: GrainReport
    gesture_report: GrainReport
    collapsed: ConfusionMatrix | None = None
    lawrfd: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.confusion.accuracy

    def to_dict(self) -> dict:
        out = {
            "network": self.network,
            "class_mode": self.class_mode,
            "folds": self.folds,
            "fold_accuracy": self.fold_accuracy,
            "pooled_accuracy": self.accuracy,
            "grain_report": self.grain_report.to_dict(),
            "gesture_report": self.gesture_report.to_dict(),
            "per_class_accuracy": [None if np.isnan(a) else float(a) for a in per_class_accuracy(self.confusion)],
            "confusion_counts": self.confusion.counts.tolist(),
        }
        if self.collapsed is not None:
            out["collapsed_accuracy"] = self.collapsed.accuracy
            out["lawrfd"] = self.lawrfd
        out.update(self.extra)
        return out


def aggregate_folds(results, expected_folds: Sequence[int] | None = None) -> AggregateReport:
    """Pool one network's per-fold results into the reported statistics.

    ``results`` are objects with ``network``, ``fold``, ``class_mode``,
    ``true`` and ``predicted`` (see :class:`gesturefusion.training.FoldResult`).
    """
    results = sorted(results, key=lambda r: r.fold)
    if not results:
        raise ValueError("no fold results")
    names = {r.network for r in results}
    modes = {r.class_mode for r in results}
    if len(names) != 1 or len(modes) != 1:
        raise ValueError(f"mixed networks {sorted(names)} or class modes {sorted(modes)}")
    folds = [r.fold for r in results]
    if len(set(folds)) != len(folds):
        raise ValueError(f"duplicate folds in {folds}")
    if expected_folds is not None:
        missing = sorted(set(expected_folds) - set(folds))
        if missing:
            raise ValueError(f"missing fold results for subjects {missing}")
    mode = modes.pop()
    cms = [confusion_matrix(r.true, r.predicted, mode) for r in results]
    pooled = cms[0]
    for cm in cms[1:]:
        pooled = pooled + cm
    unit_rates = [grain_rates(r.true, r.predicted, mode) for r in results]
    fold_grain = {g: [u[g] for u in unit_rates] for g in GRAINS}
    report = AggregateReport(
        network=names.pop(),
        class_mode=mode,
        folds=folds,
        fold_accuracy=[cm.accuracy for cm in cms],
        fold_grain_rates=fold_grain,
        confusion=pooled,
        grain_report=grain_summary(fold_grain),
        gesture_report=grain_summary(gesture_units(pooled)),
    )
    if mode == "c28":
        true = np.concatenate([r.true for r in results])
        pred = np.concatenate([r.predicted for r in results])
        report.collapsed = collapse_28_to_14(pooled)
        report.lawrfd = lawrfd(true, pred)
    return report
