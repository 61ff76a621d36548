"""Classification, correlation, and ranking metrics.

All internal values are kept at full precision; rounding happens only when
a caller formats a report for display.  Undefined precision/recall (empty
predicted or true class) follows the common evaluation-library convention:
report 0 and set a flag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # counts[true][pred]
    labels: list[int]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]


@dataclass
class MetricsReport:
    accuracy: float
    per_class_precision: list[float]
    per_class_recall: list[float]
    per_class_f1: list[float]
    support: list[int]
    macro: dict[str, float]
    weighted: dict[str, float]
    zero_division_flag: bool = False
    mcc: float | None = None
    pearson: float | None = None
    spearman: float | None = None
    auroc: float | None = None
    roc_points: list[tuple[float, float]] | None = None
    confusion: list[list[int]] | None = None

    def to_json_dict(self) -> dict:
        """Serializable report; regression runs omit classification keys."""
        if self.confusion is None and self.pearson is not None:
            out: dict = {"pearson": self.pearson, "spearman": self.spearman}
            return out
        out = {
            "accuracy": self.accuracy,
            "precision": self.weighted["precision"],
            "recall": self.weighted["recall"],
            "f1": self.weighted["f1"],
            "macro": self.macro,
            "weighted": self.weighted,
            "per_class": {
                "precision": self.per_class_precision,
                "recall": self.per_class_recall,
                "f1": self.per_class_f1,
                "support": self.support,
            },
            "zero_division": self.zero_division_flag,
            "confusion": self.confusion,
        }
        if self.mcc is not None:
            out["mcc"] = self.mcc
        if self.pearson is not None:
            out["pearson"] = self.pearson
            out["spearman"] = self.spearman
        if self.auroc is not None:
            out["auroc"] = self.auroc
            out["roc_points"] = self.roc_points
        return out


def write_report(path, report: MetricsReport) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def confusion(true_labels, predicted_labels, num_classes: int) -> ConfusionMatrix:
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64)
    if true_labels.shape != predicted_labels.shape:
        raise InputError(
            f"label vectors have different lengths: {true_labels.shape[0]} "
            f"vs {predicted_labels.shape[0]}"
        )
    for name, arr in (("true", true_labels), ("predicted", predicted_labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InputError(f"{name} labels outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true_labels, predicted_labels), 1)
    return ConfusionMatrix(counts, list(range(num_classes)))


def summarize(cm: ConfusionMatrix) -> MetricsReport:
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise InputError("cannot summarize an empty confusion matrix")
    k = cm.num_classes
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    diag = np.diag(counts).astype(np.float64)

    zero_division = False
    precision = np.zeros(k)
    recall = np.zeros(k)
    f1 = np.zeros(k)
    for c in range(k):
        if predicted[c] > 0:
            precision[c] = diag[c] / predicted[c]
        else:
            zero_division = True
        if support[c] > 0:
            recall[c] = diag[c] / support[c]
        else:
            zero_division = True
        if precision[c] + recall[c] > 0:
            f1[c] = 2 * precision[c] * recall[c] / (precision[c] + recall[c])

    weights = support / total
    macro = {
        "precision": float(precision.mean()),
        "recall": float(recall.mean()),
        "f1": float(f1.mean()),
    }
    weighted = {
        "precision": float((precision * weights).sum()),
        "recall": float((recall * weights).sum()),
        "f1": float((f1 * weights).sum()),
    }
    return MetricsReport(
        accuracy=float(diag.sum() / total),
        per_class_precision=[float(p) for p in precision],
        per_class_recall=[float(r) for r in recall],
        per_class_f1=[float(v) for v in f1],
        support=[int(s) for s in support],
        macro=macro,
        weighted=weighted,
        zero_division_flag=zero_division,
        confusion=[[int(v) for v in row] for row in counts],
    )


def matthews(cm: ConfusionMatrix) -> float:
    if cm.num_classes != 2:
        raise InputError(
            f"Matthews correlation needs a 2x2 matrix, got {cm.num_classes} classes"
        )
    tn, fp = float(cm.counts[0, 0]), float(cm.counts[0, 1])
    fn, tp = float(cm.counts[1, 0]), float(cm.counts[1, 1])
    denom = np.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    if denom == 0:
        return 0.0
    return float((tp * tn - fp * fn) / denom)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise InputError("pearson needs two equal-length vectors of length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc**2).sum())
    sy = np.sqrt((yc**2).sum())
    if sx == 0 or sy == 0:
        raise InputError("pearson is undefined for zero-variance input")
    return float((xc * yc).sum() / (sx * sy))


def _average_ranks(v: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank block."""
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise InputError("spearman needs two equal-length vectors of length >= 2")
    return pearson(_average_ranks(x), _average_ranks(y))


def roc_auc(scores, labels) -> tuple[list[tuple[float, float]], float]:
    """ROC points and area from a descending threshold sweep.

    Tied scores collapse into a single threshold, which makes the
    trapezoidal area identical to the pair-counting estimator with ties
    counted one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise InputError("scores and labels have different lengths")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise InputError("ROC needs both classes present")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]

    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        block = sorted_labels[i : j + 1]
        tp += int((block == 1).sum())
        fp += int((block == 0).sum())
        points.append((fp / n_neg, tp / n_pos))
        i = j + 1

    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return points, float(area)


@dataclass
class SparsePrf:
    """Macro precision/recall/F1 over sparse (label, prediction) pairs.

    Classes are the union of observed labels and predictions, matching the
    dense ``summarize`` conventions without materializing a vocab-sized
    confusion matrix.
    """

    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    accuracy: float = 0.0
    zero_division_flag: bool = field(default=False)


def prf_macro_sparse(labels, predictions) -> SparsePrf:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise InputError("labels and predictions have different lengths")
    if labels.size == 0:
        raise InputError("cannot score an empty prediction set")
    classes = np.union1d(labels, predictions)
    tp: dict[int, int] = {}
    fp: dict[int, int] = {}
    fn: dict[int, int] = {}
    for t, p in zip(labels, predictions):
        if t == p:
            tp[t] = tp.get(t, 0) + 1
        else:
            fp[p] = fp.get(p, 0) + 1
            fn[t] = fn.get(t, 0) + 1
    precisions, recalls, f1s = [], [], []
    flag = False
    for c in classes:
        c = int(c)
        tpe, fpe, fne = tp.get(c, 0), fp.get(c, 0), fn.get(c, 0)
        if tpe + fpe > 0:
            prec = tpe / (tpe + fpe)
        else:
            prec, flag = 0.0, True
        if tpe + fne > 0:
            rec = tpe / (tpe + fne)
        else:
            rec, flag = 0.0, True
        f1v = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(f1v)
    return SparsePrf(
        precision=float(np.mean(precisions)),
        recall=float(np.mean(recalls)),
        f1=float(np.mean(f1s)),
        accuracy=float((labels == predictions).mean()),
        zero_division_flag=flag,
    )
