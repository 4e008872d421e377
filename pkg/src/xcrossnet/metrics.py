"""Evaluation metrics: rank-based AUC with tie handling, held-out logloss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingleClassError


@dataclass
class EvalReport:
    auc: float | None  # None when only one class is present
    logloss: float
    n_pos: int
    n_neg: int

    def lines(self) -> list[str]:
        auc_text = "unavailable" if self.auc is None else repr(self.auc)
        return [
            f"auc={auc_text}",
            f"logloss={self.logloss!r}",
            f"n_pos={self.n_pos}",
            f"n_neg={self.n_neg}",
        ]


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values all receive the mean of their rank span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    n = len(values)
    # group boundaries of runs of equal values in the sorted order
    edges = np.flatnonzero(np.concatenate(
        ([True], sorted_vals[1:] != sorted_vals[:-1], [True])))
    starts, ends = edges[:-1], edges[1:]
    group_rank = (starts + ends + 1) / 2.0  # mean of ranks start+1 .. end
    ranks = np.empty(n)
    ranks[order] = np.repeat(group_rank, ends - starts)
    return ranks


def auc(preds, labels) -> float:
    """Probability a random positive outranks a random negative (Mann-Whitney).

    Computed from average ranks, so ties contribute half credit, matching
    the pairwise definition exactly.
    """
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} must be "
                         "equal-length vectors")
    pos = labels == 1.0
    n_pos = int(np.count_nonzero(pos))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(
            f"AUC needs both classes; got {n_pos} positives, {n_neg} negatives")
    ranks = average_ranks(preds)
    pos_rank_sum = float(np.sum(ranks[pos]))
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def predict_dataset(model, dataset) -> np.ndarray:
    """Forward the whole dataset (read-only), preserving instance order."""
    preds = np.empty(len(dataset))
    for i in range(len(dataset)):
        preds[i], _ = model.forward(dataset.instance(i))
    return preds


def evaluate(model, dataset) -> EvalReport:
    from .optim import logloss  # late import; optim also calls evaluate

    preds = predict_dataset(model, dataset)
    n_pos = int(np.count_nonzero(dataset.labels == 1.0))
    n_neg = len(dataset) - n_pos
    try:
        auc_value = auc(preds, dataset.labels)
    except SingleClassError:
        auc_value = None
    return EvalReport(auc_value, logloss(preds, dataset.labels), n_pos, n_neg)
