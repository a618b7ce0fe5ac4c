"""Label-based mA and example-based accuracy / precision / recall / F1."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class MetricsReport:
    mA: float
    accu: float
    prec: float
    recall: float
    f1: float
    per_attribute_mA: list[float] = field(default_factory=list)
    degenerate_attributes: list[int] = field(default_factory=list)

    def row(self) -> list[float]:
        return [self.mA, self.accu, self.prec, self.recall, self.f1]


def _binary(a) -> np.ndarray:
    arr = np.asarray(a)
    if hasattr(a, "detach"):
        arr = a.detach().cpu().numpy()
    return arr.astype(bool)


def label_based_mA(decisions, y) -> tuple[float, list[float], list[int]]:
    """Per attribute ``(TP/P + TN/N) / 2``, then the mean over attributes.

    An attribute with no positives (or no negatives) gets 0 for that half and
    is listed in the returned degenerate ids.
    """
    d, t = _binary(decisions), _binary(y)
    pos = t.sum(axis=0)
    neg = (~t).sum(axis=0)
    tp = (d & t).sum(axis=0)
    tn = (~d & ~t).sum(axis=0)
    tpr = np.divide(tp, pos, out=np.zeros(pos.shape, dtype=float), where=pos > 0)
    tnr = np.divide(tn, neg, out=np.zeros(neg.shape, dtype=float), where=neg > 0)
    per_attr = (tpr + tnr) / 2.0
    degenerate = [int(j) for j in np.flatnonzero((pos == 0) | (neg == 0))]
    return float(per_attr.mean()), per_attr.tolist(), degenerate


def _safe_ratio(num: np.ndarray, den: np.ndarray, both_empty: np.ndarray) -> np.ndarray:
    out = np.divide(num, den, out=np.zeros(num.shape, dtype=float), where=den > 0)
    out[both_empty] = 1.0
    return out


def instance_metrics(decisions, y) -> tuple[float, float, float, float]:
    d, t = _binary(decisions), _binary(y)
    inter = (d & t).sum(axis=1)
    union = (d | t).sum(axis=1)
    n_pred = d.sum(axis=1)
    n_true = t.sum(axis=1)
    both_empty = (n_pred == 0) & (n_true == 0)
    accu = _safe_ratio(inter, union, both_empty).mean()
    prec = _safe_ratio(inter, n_pred, both_empty).mean()
    rec = _safe_ratio(inter, n_true, both_empty).mean()
    f1 = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
    return float(accu), float(prec), float(rec), float(f1)


def evaluate_decisions(decisions, y) -> MetricsReport:
    mA, per_attr, degenerate = label_based_mA(decisions, y)
    accu, prec, rec, f1 = instance_metrics(decisions, y)
    return MetricsReport(mA, accu, prec, rec, f1, per_attr, degenerate)


def write_report_csv(report: MetricsReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mA", "accu", "prec", "recall", "f1"])
        w.writerow([repr(v) for v in report.row()])


def write_per_attribute_csv(report: MetricsReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attribute_id", "mA"])
        for j, v in enumerate(report.per_attribute_mA):
            w.writerow([j, repr(v)])


def read_report_csv(path: str | Path) -> MetricsReport:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return MetricsReport(*(float(v) for v in rows[1]))
