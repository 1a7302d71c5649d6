"""Accuracy and one-vs-rest ROC AUC.

AUC uses the rank-sum (Mann-Whitney) statistic with midranks, so tied
scores count half a concordant pair; classes without both a positive and a
negative example are skipped and recorded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeError


@dataclass
class MetricReport:
    acc: float
    auc: float
    per_class_auc: list
    n_samples: int
    skipped_classes: list = field(default_factory=list)


def binary_auc(scores: np.ndarray, positives: np.ndarray) -> Optional[float]:
    """AUC for one class; None when the class has no positives or no negatives."""
    pos = positives.astype(bool)
    n_pos = int(pos.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    new_group = np.r_[True, s[1:] != s[:-1]]
    group_of = np.cumsum(new_group) - 1
    starts = np.flatnonzero(new_group)
    counts = np.diff(np.r_[starts, len(s)])
    midrank = (starts + 1) + (counts - 1) / 2.0
    ranks = np.empty(len(s))
    ranks[order] = midrank[group_of]
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_metrics(scores: np.ndarray, labels: np.ndarray, task: str = "multiclass") -> MetricReport:
    """ACC and macro AUC for per-class scores (N, K).

    multiclass: labels are class indices; ACC is the argmax match rate.
    multilabel: labels are (N, K) 0/1; ACC thresholds scores at 0.5 and
    averages over all (sample, label) cells.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ShapeError(f"scores must be non-empty (N, K), got {scores.shape}")
    n, k = scores.shape
    labels = np.asarray(labels)
    per_class: list = []
    skipped: list = []
    if task == "multiclass":
        if labels.shape != (n,):
            raise ShapeError(f"labels shape {labels.shape} does not match scores {scores.shape}")
        acc = float((scores.argmax(axis=1) == labels).mean())
        for c in range(k):
            per_class.append(binary_auc(scores[:, c], labels == c))
    elif task == "multilabel":
        if labels.shape != (n, k):
            raise ShapeError(f"labels shape {labels.shape} does not match scores {scores.shape}")
        acc = float(((scores > 0.5) == labels.astype(bool)).mean())
        for c in range(k):
            per_class.append(binary_auc(scores[:, c], labels[:, c]))
    else:
        raise ValueError(f"unknown task {task!r}")
    evaluable = [a for a in per_class if a is not None]
    skipped = [c for c, a in enumerate(per_class) if a is None]
    auc = float(np.mean(evaluable)) if evaluable else float("nan")
    return MetricReport(acc=acc, auc=auc, per_class_auc=per_class,
                        n_samples=n, skipped_classes=skipped)
