"""Clustering accuracy via optimal assignment and the joint test protocol.

Known-population samples are scored by plain accuracy; novel-population
samples by the best injective matching of predicted clusters onto true
novel classes. Test-time predictions argmax over all classes at once, so
the model is never told which population a sample belongs to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import model as model_mod
from .data import Dataset, SplitFlag


@dataclass
class Assignment:
    """Injective map from predicted cluster ids to truth ids, and its payoff."""

    mapping: dict[int, int]
    cost: float


@dataclass
class EvalReport:
    known_acc: float
    novel_cluster_acc: float
    all_acc: float
    confusion: np.ndarray
    n_known: int
    n_novel: int

    def to_json_dict(self, seed: int, beta: float, weight_mode: str) -> dict:
        return {
            "known_acc": self.known_acc,
            "novel_cluster_acc": self.novel_cluster_acc,
            "all_acc": self.all_acc,
            "n_known": self.n_known,
            "n_novel": self.n_novel,
            "seed": seed,
            "beta": beta,
            "weight_mode": weight_mode,
            "confusion": self.confusion.tolist(),
        }


def hungarian(profit: np.ndarray) -> Assignment:
    """Profit-maximizing assignment on a square matrix; exact, not greedy."""
    profit = np.asarray(profit)
    if profit.ndim != 2 or profit.shape[0] != profit.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {profit.shape}")
    rows, cols = linear_sum_assignment(profit, maximize=True)
    return Assignment(dict(zip(rows.tolist(), cols.tolist())),
                      float(profit[rows, cols].sum()))


def _contingency(pred: np.ndarray, truth: np.ndarray,
                 pred_ids: np.ndarray, truth_ids: np.ndarray) -> np.ndarray:
    """Count matrix over the given id pools, zero-padded to square.

    Samples whose prediction falls outside ``pred_ids`` contribute to no
    cell, so no matching can ever claim them.
    """
    k = max(len(pred_ids), len(truth_ids))
    table = np.zeros((k, k), dtype=np.int64)
    pred_pos = {c: i for i, c in enumerate(pred_ids.tolist())}
    truth_pos = {c: i for i, c in enumerate(truth_ids.tolist())}
    for p, t in zip(pred.tolist(), truth.tolist()):
        if p in pred_pos and t in truth_pos:
            table[pred_pos[p], truth_pos[t]] += 1
    return table


def cluster_acc(pred, truth) -> float:
    """Best matched fraction over injections of predicted onto true ids."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.size == 0:
        raise ValueError("cluster_acc needs at least one sample")
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    table = _contingency(pred, truth, np.unique(pred), np.unique(truth))
    return hungarian(table).cost / pred.size


def predict_full(params: model_mod.ModelParams, features: np.ndarray,
                 tau: float) -> np.ndarray:
    """Argmax class id over the concatenated known + novel output."""
    probs = model_mod.forward(params, features, tau).full_probs.values
    return np.argmax(probs, axis=1)


def predict_novel(params: model_mod.ModelParams, features: np.ndarray,
                  tau: float) -> np.ndarray:
    """Cluster id from the novel head alone, offset into the joint id space."""
    logits = model_mod.forward(params, features, tau).novel_logits.values
    return params.n_known + np.argmax(logits, axis=1)


def train_novel_cluster_acc(params: model_mod.ModelParams, dataset: Dataset,
                            tau: float) -> float:
    """Clustering accuracy on the unlabeled training split (transductive)."""
    idx = np.flatnonzero(dataset.split == SplitFlag.UNLABELED_NOVEL)
    pred = predict_novel(params, dataset.features[idx], tau)
    return cluster_acc(pred, dataset.ground_truth_labels(idx))


def task_agnostic_eval(params: model_mod.ModelParams, dataset: Dataset,
                       tau: float) -> EvalReport:
    """Score the joint test split without revealing population membership.

    Novel-population predictions landing in the known block are errors:
    only novel-head cluster ids can be matched to true novel classes.
    """
    known_idx = np.flatnonzero(dataset.split == SplitFlag.TEST_KNOWN)
    novel_idx = np.flatnonzero(dataset.split == SplitFlag.TEST_NOVEL)
    if known_idx.size == 0 or novel_idx.size == 0:
        raise ValueError("test split needs both known and novel samples")

    test_idx = np.concatenate([known_idx, novel_idx])
    pred = predict_full(params, dataset.features[test_idx], tau)
    truth = dataset.ground_truth_labels(test_idx)
    pred_known, pred_novel = pred[:known_idx.size], pred[known_idx.size:]
    truth_known, truth_novel = truth[:known_idx.size], truth[known_idx.size:]

    known_acc = float(np.mean(pred_known == truth_known))
    novel_block = np.arange(params.n_known, params.n_known + params.n_novel)
    table = _contingency(pred_novel, truth_novel, novel_block,
                         np.unique(truth_novel))
    matched = hungarian(table).cost
    novel_acc = matched / novel_idx.size
    all_acc = ((known_acc * known_idx.size + matched)
               / (known_idx.size + novel_idx.size))

    n_truth = int(truth.max()) + 1
    n_pred = params.n_known + params.n_novel
    confusion = np.zeros((n_truth, n_pred), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    return EvalReport(known_acc, float(novel_acc), float(all_acc), confusion,
                      int(known_idx.size), int(novel_idx.size))
