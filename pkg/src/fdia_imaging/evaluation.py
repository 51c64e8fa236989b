"""Confusion matrices, precision/recall/F1, the kNN baseline and comparison tables."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "ConfusionMatrix",
    "MetricsReport",
    "confusion",
    "metrics",
    "knn_classify",
    "compare_report",
    "confusion_image",
    "write_confusion_csv",
]


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MetricsReport:
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    support: tuple[int, ...]

    @property
    def per_class(self) -> list[tuple[float, float, float]]:
        return list(zip(self.precision, self.recall, self.f1))

    @property
    def macro(self) -> tuple[float, float, float]:
        return (float(np.mean(self.precision)), float(np.mean(self.recall)), float(np.mean(self.f1)))

    @property
    def macro_f1(self) -> float:
        return self.macro[2]


def confusion(true_labels, predicted_labels, k: int) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(predicted_labels, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"{t.size} true labels but {p.size} predictions")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} label out of range 0..{k - 1}")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros(len(num)), where=den > 0)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """One-vs-rest precision, recall and F1 per class; a zero denominator gives 0."""
    if cm.k < 2:
        raise ValueError("metrics need at least 2 classes")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    predicted = c.sum(axis=0)
    actual = c.sum(axis=1)
    precision = _ratio(tp, predicted)
    recall = _ratio(tp, actual)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return MetricsReport(tuple(map(float, precision)), tuple(map(float, recall)), tuple(map(float, f1)),
                         tuple(int(s) for s in actual))


def knn_classify(train_features, train_labels, query_features, k_neighbors: int = 5,
                 chunk: int = 512) -> np.ndarray:
    """Euclidean k-nearest-neighbour majority vote.

    A tied vote goes to the tied class whose member is nearest the query;
    equal distances are ordered by training index.
    """
    xt = np.asarray(train_features, dtype=np.float64)
    yt = np.asarray(train_labels, dtype=np.int64)
    xq = np.asarray(query_features, dtype=np.float64)
    if len(xt) == 0:
        raise ValueError("empty training set")
    if not 1 <= k_neighbors <= len(xt):
        raise ValueError(f"k_neighbors must lie in 1..{len(xt)}")
    n_classes = int(yt.max()) + 1
    sq_t = np.einsum("ij,ij->i", xt, xt)
    out = np.empty(len(xq), dtype=np.int64)
    for start in range(0, len(xq), chunk):
        q = xq[start:start + chunk]
        d2 = np.einsum("ij,ij->i", q, q)[:, None] + sq_t[None, :] - 2.0 * q @ xt.T
        np.maximum(d2, 0.0, out=d2)
        if k_neighbors < len(xt):
            cand = np.argpartition(d2, k_neighbors - 1, axis=1)[:, :k_neighbors]
            # argpartition may split ties arbitrarily; rebuild the boundary by (distance, index)
            kth = np.take_along_axis(d2, cand, axis=1).max(axis=1)
        for row in range(len(q)):
            if k_neighbors < len(xt):
                pool = np.flatnonzero(d2[row] <= kth[row])
            else:
                pool = np.arange(len(xt))
            order = pool[np.lexsort((pool, d2[row, pool]))][:k_neighbors]
            votes = np.bincount(yt[order], minlength=n_classes)
            tied = np.flatnonzero(votes == votes.max())
            if len(tied) == 1:
                out[start + row] = tied[0]
            else:
                out[start + row] = next(int(yt[i]) for i in order if yt[i] in tied)
    return out


def compare_report(reports: Sequence[tuple[str, MetricsReport]], path, class_names: Sequence[str] | None = None) -> Path:
    """Summary CSV (macro precision/recall/F1 per approach) plus a per-class appendix."""
    if not reports:
        raise ValueError("need at least one report")
    path = Path(path)
    k = len(reports[0][1].f1)
    names = list(class_names) if class_names is not None else [f"class_{i}" for i in range(k)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["approach", "precision", "recall", "f1"])
        for name, rep in reports:
            w.writerow([name] + [f"{v:.6f}" for v in rep.macro])
        w.writerow([])
        w.writerow(["approach", "class", "precision", "recall", "f1", "support"])
        for name, rep in reports:
            for c in range(len(rep.f1)):
                w.writerow([name, names[c], f"{rep.precision[c]:.6f}", f"{rep.recall[c]:.6f}",
                            f"{rep.f1[c]:.6f}", rep.support[c]])
        w.writerow([])
        w.writerow(["# summary rows are unweighted (macro) means over classes; "
                    "the per-class f1 column is the attack-location score, recall listed alongside"])
    return path


def write_confusion_csv(cm: ConfusionMatrix, path, class_names: Sequence[str] | None = None) -> Path:
    path = Path(path)
    names = list(class_names) if class_names is not None else [str(i) for i in range(cm.k)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + names)
        for i in range(cm.k):
            w.writerow([names[i]] + [int(v) for v in cm.counts[i]])
    return path


def confusion_image(cm: ConfusionMatrix, cell: int = 16) -> np.ndarray:
    """Row-normalized heat map, each class pair drawn as a ``cell`` x ``cell`` block."""
    c = cm.counts.astype(np.float64)
    rows = c.sum(axis=1, keepdims=True)
    frac = np.divide(c, rows, out=np.zeros_like(c), where=rows > 0)
    return np.kron(frac, np.ones((cell, cell)))
