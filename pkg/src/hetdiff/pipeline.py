"""Train/test protocols and model evaluation shared by the CLI and tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UndefinedMetricError
from .evaluation import degree_percentile_report, holdout_split, kfold_split, metric_report, to_probability
from .graph import HeteroGraph
from .training import TrainConfig, TrainedModel, TrainResult, sample_real_negatives, train

SPLIT_MODES = ("holdout8020", "cv5")
RATE_KEYS = ("auc", "aupr", "recall", "precision", "f1", "mcc", "specificity", "npv")


@dataclass(frozen=True, eq=False)
class Split:
    train_graph: HeteroGraph
    train_negatives: np.ndarray
    test_pairs: np.ndarray
    test_labels: np.ndarray


def _split(graph, pos_train, pos_test, neg_train, neg_test) -> Split:
    pairs = np.concatenate([pos_test, neg_test]).astype(np.int64).reshape(-1, 2)
    labels = np.r_[np.ones(len(pos_test), dtype=np.int64), np.zeros(len(neg_test), dtype=np.int64)]
    return Split(graph.with_edges(pos_train), neg_train.reshape(-1, 2), pairs, labels)


def make_splits(graph: HeteroGraph, mode: str = "holdout8020", seed: int = 0, negatives_per_drug: int = 2) -> list[Split]:
    """Real negatives are drawn once from the full graph, then split the same way as the edges.

    ``holdout8020`` yields one split; ``cv5`` yields five, fold ``k`` held out in split ``k``.
    """
    negatives = sample_real_negatives(graph, negatives_per_drug, seed)
    if mode == "holdout8020":
        tr, te = holdout_split(graph.edges, 0.2, seed)
        ntr, nte = holdout_split(negatives, 0.2, seed)
        return [_split(graph, tr, te, ntr, nte)]
    if mode == "cv5":
        pos_folds = kfold_split(graph.edges, 5, seed)
        neg_folds = kfold_split(negatives, 5, seed)
        out = []
        for k in range(5):
            tr = np.concatenate([f for i, f in enumerate(pos_folds) if i != k])
            ntr = np.concatenate([f for i, f in enumerate(neg_folds) if i != k])
            out.append(_split(graph, tr, pos_folds[k], ntr, neg_folds[k]))
        return out
    raise ConfigError(f"unknown split mode {mode!r}; expected one of {SPLIT_MODES}")


def fit_split(config: TrainConfig, split: Split, bridges=None, callback=None) -> TrainResult:
    return train(config, split.train_graph, split.train_negatives, bridges, callback)


def _report_dict(scores, labels, threshold) -> dict:
    rep = metric_report(to_probability(scores), labels, threshold)
    if rep.auc is None or rep.aupr is None:
        raise UndefinedMetricError(f"test set has {rep.n_pos} positive and {rep.n_neg} negative pairs; ranking metrics need both classes")
    return rep.to_dict()


def evaluate_model(model: TrainedModel, pairs, labels, threshold: float = 0.5, seed: int | None = None, percentiles: int | None = None) -> dict:
    """Metric dictionary for one model.  ``threshold`` applies to sigmoid-mapped scores.

    With ``percentiles`` the report gains ``per_bin``: drugs ranked by their
    training-graph degree, most connected first.
    """
    seed = model.config.seed if seed is None else seed
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    labels = np.asarray(labels, dtype=np.int64)
    scores = model.score_pairs(pairs, seed)
    out = _report_dict(scores, labels, threshold)
    if percentiles is not None:
        out["per_bin"] = degree_report(model, pairs, labels, percentiles, threshold, seed, scores)
    return out


def degree_report(model: TrainedModel, pairs, labels, bins: int = 5, threshold: float = 0.5, seed: int | None = None, scores=None) -> list:
    """Per-degree-bin metrics of ``model`` over the given test pairs."""
    seed = model.config.seed if seed is None else seed
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if scores is None:
        scores = model.score_pairs(pairs, seed)
    rows = degree_percentile_report(to_probability(scores), labels, pairs[:, 0], model.drug_degree, bins, threshold)
    for row in rows:
        if row["report"] is not None:
            row["report"] = row["report"].to_dict()
    return rows


def average_reports(reports: list) -> dict:
    """Fold-mean of the rate metrics; class counts are summed."""
    out = {k: float(np.mean([r[k] for r in reports])) for k in RATE_KEYS}
    out["threshold"] = reports[0]["threshold"]
    out["n_pos"] = int(sum(r["n_pos"] for r in reports))
    out["n_neg"] = int(sum(r["n_neg"] for r in reports))
    out["degenerate"] = sorted({d for r in reports for d in r["degenerate"]})
    return out
