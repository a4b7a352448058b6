"""Binary classification metrics with bad prognosis (label 1) as the positive class."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


_trapezoid = getattr(np, "trapezoid", None) or np.trapz


class MetricError(ValueError):
    pass


def roc_auc(scores, labels):
    """Return (auc, curve) where curve is an ``[m, 3]`` array of (fpr, tpr, threshold).

    Equal scores form a single sweep step, so ties contribute half credit.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    P = int((y == 1).sum())
    N = int((y == 0).sum())
    if P == 0 or N == 0:
        raise MetricError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    distinct = np.nonzero(np.diff(s))[0]
    ends = np.r_[distinct, len(s) - 1]
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0.0, tps / P]
    fpr = np.r_[0.0, fps / N]
    thr = np.r_[np.inf, s[ends]]
    auc = float(_trapezoid(tpr, fpr))
    return auc, np.column_stack([fpr, tpr, thr])


def pair_counting_auc(scores, labels):
    """Mann-Whitney estimate: (concordant + 0.5 * ties) / (pos * neg)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("need both classes")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg)))


@dataclass
class FoldMetrics:
    accuracy: float
    recall: float
    precision: float
    f1: float
    auc: float  # nan when undefined
    confusion: dict
    roc: np.ndarray | None = None


def confusion(pred, labels):
    pred = np.asarray(pred).astype(int)
    y = np.asarray(labels).astype(int)
    return {
        "tp": int(((pred == 1) & (y == 1)).sum()),
        "fp": int(((pred == 1) & (y == 0)).sum()),
        "tn": int(((pred == 0) & (y == 0)).sum()),
        "fn": int(((pred == 0) & (y == 1)).sum()),
    }


def rates(cm):
    tp, fp, tn, fn = cm["tp"], cm["fp"], cm["tn"], cm["fn"]
    n = tp + fp + tn + fn
    acc = (tp + tn) / n if n else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0  # undefined precision reported as 0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return acc, rec, prec, f1


def evaluate_scores(scores, labels, threshold=0.5) -> FoldMetrics:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise MetricError("empty split")
    labels = np.asarray(labels).astype(int)
    cm = confusion(scores >= threshold, labels)
    acc, rec, prec, f1 = rates(cm)
    try:
        auc, curve = roc_auc(scores, labels)
    except MetricError:
        auc, curve = float("nan"), None
    return FoldMetrics(acc, rec, prec, f1, auc, cm, curve)


@dataclass
class MetricsReport:
    folds: list = field(default_factory=list)  # FoldMetrics
    pooled_scores: list = field(default_factory=list)
    pooled_labels: list = field(default_factory=list)

    def add(self, fm: FoldMetrics, scores, labels):
        self.folds.append(fm)
        self.pooled_scores.extend(float(s) for s in scores)
        self.pooled_labels.extend(int(l) for l in labels)

    def mean(self):
        keys = ("accuracy", "recall", "precision", "f1", "auc")
        return {k: float(np.nanmean([getattr(f, k) for f in self.folds])) for k in keys}

    def std(self):
        keys = ("accuracy", "recall", "precision", "f1", "auc")
        return {k: float(np.nanstd([getattr(f, k) for f in self.folds])) for k in keys}

    def pooled(self):
        return evaluate_scores(self.pooled_scores, self.pooled_labels)


def write_roc_csv(curve, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thr in curve:
            wr.writerow([f"{fpr:.10g}", f"{tpr:.10g}", f"{thr:.10g}"])
