"""Log-domain Sinkhorn scaling for equipartition pseudo-labels.

Solves min <Q, -log P> over nonnegative Q with uniform marginals: every
row (novel class) gets mass 1/C, every column (sample) mass 1/B. The
entropic regularizer epsilon trades sharpness for convergence speed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-30


@dataclass
class SinkhornConfig:
    # inputs arrive already sharpened by the joint softmax temperature,
    # so the effective regularizer on raw logits is epsilon * tau
    epsilon: float = 0.5
    max_iters: int = 300
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tolerance <= 0.0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")


@dataclass
class PseudoLabelPlan:
    """Transport plan over (novel class, sample) cells; constant to the tape."""

    Q: np.ndarray
    iterations_used: int
    converged: bool
    max_violation: float
    objective_history: list[float] = field(default_factory=list)


def _logsumexp(m: np.ndarray, axis: int) -> np.ndarray:
    mx = m.max(axis=axis, keepdims=True)
    return mx + np.log(np.exp(m - mx).sum(axis=axis, keepdims=True))


def solve(P: np.ndarray, cfg: SinkhornConfig, track_objective: bool = False,
          warn: bool = True) -> PseudoLabelPlan:
    """Alternating row/column scaling in the log domain.

    P holds positive prediction scores, one column per sample; columns need
    not be normalized (per-column scaling shifts the cost by a constant the
    column marginals absorb). Non-convergence keeps the last iterate and
    logs a warning unless the caller aggregates its own; equipartition is a
    modeling assumption, not a safety property.
    """
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2:
        raise ValueError(f"expected a 2-D prediction matrix, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise ValueError("prediction matrix contains non-finite entries")
    n_classes, n_samples = P.shape
    cost = -np.log(np.maximum(P, PROB_FLOOR))

    log_kernel = -cost / cfg.epsilon
    log_row_target = -np.log(n_classes)
    log_col_target = -np.log(n_samples)
    f = np.zeros((n_classes, 1))
    g = np.zeros((1, n_samples))

    def objective(q: np.ndarray) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(q > 0.0, q * (np.log(q) - 1.0), 0.0)
        return float((q * cost).sum() + cfg.epsilon * ent.sum())

    history: list[float] = []
    iterations = 0
    converged = False
    row_target = 1.0 / n_classes
    # row log-sums under the current g; reused as the next row update
    row_lse = _logsumexp(log_kernel + g, axis=1)
    for iterations in range(1, cfg.max_iters + 1):
        f = log_row_target - row_lse
        g = log_col_target - _logsumexp(log_kernel + f, axis=0)
        row_lse = _logsumexp(log_kernel + g, axis=1)
        # the column step just ran, so only row sums can still be off
        row_violation = np.abs(np.exp(f + row_lse) - row_target).max()
        if track_objective:
            history.append(objective(np.exp(log_kernel + f + g)))
        if row_violation <= cfg.tolerance:
            converged = True
            break
    q = np.exp(log_kernel + f + g)
    violation = float(max(np.abs(q.sum(axis=1) - row_target).max(),
                          np.abs(q.sum(axis=0) - 1.0 / n_samples).max()))
    if not converged and warn:
        logger.warning(
            "sinkhorn did not converge in %d iterations (violation %.3g); "
            "using last iterate", cfg.max_iters, violation)
    return PseudoLabelPlan(q, iterations, converged, violation, history)


def loss_u(plan: PseudoLabelPlan, log_probs_novel: Tensor) -> Tensor:
    """Self-labeling cross-entropy: mean over samples of -q* . log p.

    Columns of B*Q are the per-sample pseudo-label distributions, so the
    mean collapses to the plain Frobenius product <Q, -log p>.
    """
    if plan.Q.shape != log_probs_novel.shape:
        raise ValueError(
            f"plan shape {plan.Q.shape} != log-probs shape {log_probs_novel.shape}")
    return -ad.reduce_sum(Tensor(plan.Q) * log_probs_novel)
