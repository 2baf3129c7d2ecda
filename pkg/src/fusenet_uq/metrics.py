"""Classification metrics and one-vs-rest ROC/AUC.

Averages are weighted by true-class support, so weighted recall is
identical to accuracy. The reported F-measure is the harmonic mean of the
weighted precision and weighted recall; the support-weighted mean of the
per-class F1 scores is kept alongside as ``weighted_f1``.

Rates are computed with exact rational arithmetic and only converted to
floats at the end.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

CSV_COLUMNS = ("model", "condition", "precision", "recall", "f_measure", "accuracy")


class MetricsError(ValueError):
    pass


def confusion_matrix(y_true, y_pred, k: int) -> np.ndarray:
    """``counts[t, p]``: number of samples of true class ``t`` predicted as ``p``."""
    t = np.asarray(y_true, dtype=np.int64).ravel()
    p = np.asarray(y_pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise MetricsError(f"length mismatch: {t.size} true vs {p.size} predicted")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= k):
        raise MetricsError(f"label outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return counts


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def _pct(x: Fraction) -> float:
    return float(x * 100)


@dataclass
class MetricsReport:
    confusion: list
    precision: float
    recall: float
    f_measure: float
    accuracy: float
    weighted_f1: float
    per_class: dict
    flags: list = field(default_factory=list)
    roc: dict = field(default_factory=dict)
    auc: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(np.sum(self.confusion))

    def row(self, model: str = "", condition: str = "") -> dict:
        return {
            "model": model,
            "condition": condition,
            **{k: f"{getattr(self, k):.3f}" for k in CSV_COLUMNS[2:]},
        }

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def weighted_prf_accuracy(confusion) -> tuple:
    """(precision, recall, f_measure, accuracy) as percentages."""
    r = report_from_confusion(confusion)
    return r.precision, r.recall, r.f_measure, r.accuracy


def report_from_confusion(confusion) -> MetricsReport:
    c = np.asarray(confusion, dtype=np.int64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise MetricsError("confusion matrix must be square")
    total = int(c.sum())
    if total == 0:
        raise MetricsError("empty confusion matrix: no samples to score")
    k = c.shape[0]
    tp = np.diag(c)
    support = c.sum(axis=1)
    predicted = c.sum(axis=0)
    flags = []
    prec, rec, f1 = [], [], []
    for i in range(k):
        p = _ratio(int(tp[i]), int(predicted[i]))
        r = _ratio(int(tp[i]), int(support[i]))
        f = _ratio(2, 1) * p * r / (p + r) if p + r else Fraction(0)
        if predicted[i] == 0:
            flags.append(f"class {i}: no predictions, precision set to 0")
        if support[i] == 0:
            flags.append(f"class {i}: no true samples, recall set to 0")
        prec.append(p)
        rec.append(r)
        f1.append(f)
    w = [Fraction(int(s), total) for s in support]
    wp = sum(wi * p for wi, p in zip(w, prec))
    wr = sum(wi * r for wi, r in zip(w, rec))
    wf1 = sum(wi * f for wi, f in zip(w, f1))
    fm = 2 * wp * wr / (wp + wr) if wp + wr else Fraction(0)
    acc = Fraction(int(tp.sum()), total)
    per_class = {
        "precision": [_pct(p) for p in prec],
        "recall": [_pct(r) for r in rec],
        "f1": [_pct(f) for f in f1],
        "support": support.tolist(),
    }
    return MetricsReport(c.tolist(), _pct(wp), _pct(wr), _pct(fm), _pct(acc), _pct(wf1), per_class, flags)


def roc_auc(scores, y_true) -> dict:
    """One-vs-rest ROC per class.

    Returns ``{class: (points, auc)}`` where ``points`` is a list of
    ``(fpr, tpr)`` pairs sorted by threshold (hence by FPR) and ``auc`` is
    the trapezoid area, or ``None`` when the class (or its complement) is
    absent from ``y_true``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.int64)
    if s.ndim != 2 or len(s) != len(y):
        raise MetricsError("scores must be [N, K] with one row per label")
    out = {}
    for k in range(s.shape[1]):
        pos = y == k
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            out[k] = ([], None)
            continue
        order = np.argsort(-s[:, k], kind="stable")
        sk, pk = s[order, k], pos[order]
        # last index of each group of tied scores
        cut = np.flatnonzero(np.diff(sk) != 0)
        ends = np.concatenate([cut, [len(sk) - 1]])
        tps = np.cumsum(pk)[ends]
        fps = (ends + 1) - tps
        tpr = np.concatenate([[0.0], tps / n_pos])
        fpr = np.concatenate([[0.0], fps / n_neg])
        auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
        out[k] = (list(zip(fpr.tolist(), tpr.tolist())), auc)
    return out


def evaluate_predictions(y_true, probs, k: Optional[int] = None) -> MetricsReport:
    """Full report (confusion, weighted metrics, ROC/AUC) from class probabilities."""
    probs = np.asarray(probs)
    k = k or probs.shape[1]
    pred = probs.argmax(axis=1)
    report = report_from_confusion(confusion_matrix(y_true, pred, k))
    for cls, (points, auc) in roc_auc(probs, y_true).items():
        report.roc[str(cls)] = points
        report.auc[str(cls)] = auc
        if auc is None:
            report.flags.append(f"class {cls}: AUC undefined (class absent)")
    return report


def reports_to_csv(rows: Sequence[dict], columns: Sequence[str] = CSV_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()
