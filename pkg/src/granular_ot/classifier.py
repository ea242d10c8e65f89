"""Class probabilities from transport distances, the training loss, and metrics."""

from dataclasses import dataclass, field
import csv
import io
import math

import numpy as np

from .autodiff import as_tensor, clip, log, softmax_rows
from .errors import InputError

PROB_FLOOR = 1e-12


def class_logits(distances, weights=None):
    """``2 - sum_k w_k d[c][k]`` per class.

    ``distances`` is a (C, n_mag) tensor or array; ``weights`` optionally
    rescales each magnification column (all ones by default).
    """
    d = as_tensor(distances)
    if d.ndim != 2 or d.shape[0] < 2:
        raise InputError(f"need a (classes >= 2, magnifications) table, got {d.shape}")
    if weights is not None:
        d = d * np.asarray(weights, dtype=np.float64).reshape(1, -1)
    return 2.0 - d.sum(axis=1, keepdims=True).T


def class_probabilities(distances, weights=None):
    """Softmax over classes of the negated summed distances; returns (1, C)."""
    d = as_tensor(distances)
    if not np.all(np.isfinite(d.data)):
        raise InputError("class distances must be finite")
    return softmax_rows(class_logits(d, weights))


def cross_entropy_loss(P, gt):
    P = as_tensor(P)
    flat = P.reshape(-1) if P.ndim != 1 else P
    n = flat.shape[0]
    if not 0 <= gt < n:
        raise InputError(f"label {gt} outside [0, {n})")
    return -log(clip(flat[gt], PROB_FLOOR, 1.0))


def _auc_binary(pos, neg):
    """Mann-Whitney statistic with half credit for ties."""
    pos = np.asarray(pos)[:, None]
    neg = np.asarray(neg)[None, :]
    wins = (pos > neg).sum() + 0.5 * (pos == neg).sum()
    return float(wins) / (pos.size * neg.size)


def macro_auc(scores, labels):
    """One-vs-rest AUC averaged over classes; NaN when fewer than two classes occur."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    present = np.unique(labels)
    if present.size < 2:
        return math.nan
    aucs = []
    for c in range(scores.shape[1]):
        mask = labels == c
        if mask.any() and (~mask).any():
            aucs.append(_auc_binary(scores[mask, c], scores[~mask, c]))
    return float(np.mean(aucs))


def macro_f1(pred, labels):
    """Unweighted mean F1 over classes that occur in labels or predictions."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    f1s = []
    for c in np.union1d(pred, labels):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


@dataclass
class MetricsReport:
    auc: float
    f1: float
    acc: float

    def row(self):
        return (self.auc, self.f1, self.acc)


def compute_metrics(scores, labels):
    """AUC / F1 / accuracy for per-sample probability vectors.

    Argmax ties resolve to the lowest class index (numpy's argmax rule).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or len(scores) != len(labels) or len(labels) == 0:
        raise InputError(f"scores {scores.shape} do not match {len(labels)} labels")
    pred = scores.argmax(axis=1)
    return MetricsReport(
        auc=macro_auc(scores, labels),
        f1=macro_f1(pred, labels),
        acc=float(np.mean(pred == labels)),
    )


@dataclass
class FoldMetrics:
    """Per-fold reports with mean/std summary (population std)."""

    folds: list = field(default_factory=list)

    def add(self, report):
        self.folds.append(report)

    def mean(self):
        return MetricsReport(*np.mean([r.row() for r in self.folds], axis=0).tolist())

    def std(self):
        return MetricsReport(*np.std([r.row() for r in self.folds], axis=0).tolist())

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "auc", "f1", "acc"])
        for i, r in enumerate(self.folds):
            w.writerow([i, *(repr(float(x)) for x in r.row())])
        w.writerow(["mean", *(repr(float(x)) for x in self.mean().row())])
        w.writerow(["std", *(repr(float(x)) for x in self.std().row())])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["fold", "auc", "f1", "acc"]:
            raise InputError("metrics CSV must start with header fold,auc,f1,acc")
        out = cls()
        for row in rows[1:]:
            if row[0] in ("mean", "std"):
                continue
            out.add(MetricsReport(*(float(x) for x in row[1:])))
        return out
