"""Ranking and confusion metrics, fold splitting and the per-degree breakdown."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, UndefinedMetricError
from .seeding import rng_for


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricReport:
    auc: float | None
    aupr: float | None
    recall: float
    precision: float
    f1: float
    mcc: float
    specificity: float
    npv: float
    threshold: float
    n_pos: int
    n_neg: int
    degenerate: list = field(default_factory=list)  # names of rates whose denominator was zero

    def to_dict(self) -> dict:
        return asdict(self)


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    order = np.argsort(s, kind="mergesort")
    s_sorted = s[order]
    ranks = np.empty(s.size)
    # average 1-based ranks over tie groups
    starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    ends = np.r_[starts[1:], s.size]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Step-wise area under precision-recall, one step per distinct score."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPR needs at least one positive label")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = np.cumsum(y_sorted)[last]
    predicted = last + 1
    precision = tp / predicted
    recall = tp / n_pos
    delta = np.diff(np.r_[0.0, recall])
    return float(np.sum(delta * precision))


def _rate(num: float, den: float, name: str, flags: list) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def confusion_counts(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    s, y = _check(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return ConfusionCounts(tp, fp, tn, fn)


def rates_from_counts(c: ConfusionCounts) -> dict:
    """Recall, precision, F1, MCC, specificity and NPV; zero denominators give 0 and a flag."""
    flags: list = []
    recall = _rate(c.tp, c.tp + c.fn, "recall", flags)
    precision = _rate(c.tp, c.tp + c.fp, "precision", flags)
    f1 = _rate(2 * precision * recall, precision + recall, "f1", flags)
    den = float(c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    mcc = _rate(float(c.tp) * c.tn - float(c.fp) * c.fn, math.sqrt(den), "mcc", flags)
    spec = _rate(c.tn, c.tn + c.fp, "specificity", flags)
    npv = _rate(c.tn, c.tn + c.fn, "npv", flags)
    return dict(recall=recall, precision=precision, f1=f1, mcc=mcc, specificity=spec, npv=npv, degenerate=flags)


def confusion_and_rates(scores, labels, threshold: float = 0.5) -> tuple[ConfusionCounts, dict]:
    c = confusion_counts(scores, labels, threshold)
    return c, rates_from_counts(c)


def metric_report(scores, labels, threshold: float = 0.5) -> MetricReport:
    """All eight metrics; ``scores`` are compared to ``threshold`` as given.

    AUC/AUPR are ``None`` when a class is missing.
    """
    s, y = _check(scores, labels)
    try:
        auc = roc_auc(s, y)
    except UndefinedMetricError:
        auc = None
    try:
        ap = aupr(s, y)
    except UndefinedMetricError:
        ap = None
    _, rates = confusion_and_rates(s, y, threshold)
    return MetricReport(auc=auc, aupr=ap, threshold=threshold, n_pos=int(y.sum()), n_neg=int((y == 0).sum()), **rates)


def to_probability(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    ex = np.exp(s[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def kfold_split(items, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Seeded shuffle cut into ``k`` folds whose sizes differ by at most one."""
    items = np.asarray(items)
    if k < 2:
        raise ConfigError("k-fold splitting needs k >= 2")
    if len(items) < k:
        raise ConfigError(f"cannot split {len(items)} items into {k} folds")
    perm = rng_for(seed, "kfold").permutation(len(items))
    return [items[np.sort(part)] for part in np.array_split(perm, k)]


def holdout_split(items, test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``(train, test)`` with ``round(n * test_fraction)`` items held out."""
    items = np.asarray(items)
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test fraction must lie in (0, 1)")
    perm = rng_for(seed, "holdout").permutation(len(items))
    n_test = int(round(len(items) * test_fraction))
    return items[np.sort(perm[n_test:])], items[np.sort(perm[:n_test])]


# ---------------------------------------------------------------------------
# Degree breakdown
# ---------------------------------------------------------------------------


def degree_bins(drug_degree, bins: int = 5) -> list[np.ndarray]:
    """Drug indices split into equal-population bins, most-connected first.

    Ties in degree are broken by drug index.
    """
    if bins < 1:
        raise ConfigError("need at least one bin")
    deg = np.asarray(drug_degree)
    order = np.lexsort((np.arange(deg.size), -deg))
    return [np.sort(part) for part in np.array_split(order, bins)]


def degree_percentile_report(scores, labels, pair_drugs, drug_degree, bins: int = 5, threshold: float = 0.5) -> list:
    """One entry per bin: ``{"bin", "lo_pct", "hi_pct", "drugs", "report"}``.

    ``report`` is ``None`` for a bin with no test pairs.
    """
    s, y = _check(scores, labels)
    pair_drugs = np.asarray(pair_drugs).reshape(-1)
    out = []
    for i, members in enumerate(degree_bins(drug_degree, bins)):
        mask = np.isin(pair_drugs, members)
        rep = metric_report(s[mask], y[mask], threshold) if mask.any() else None
        out.append(
            {
                "bin": i,
                "lo_pct": 100.0 * i / bins,
                "hi_pct": 100.0 * (i + 1) / bins,
                "drugs": int(members.size),
                "report": rep,
            }
        )
    return out
