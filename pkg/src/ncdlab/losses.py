"""Loss terms for joint discovery training and the relation-weight family.

The composite objective is supervised cross-entropy on labeled rows plus
alpha * self-labeling loss plus beta * relation distillation, the last
weighted per sample by a function g(eta) of known-class probability mass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from . import transport
from .autodiff import Tensor

if TYPE_CHECKING:
    from .config import RunConfig
    from .data import Batch

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-30


class WeightMode(Enum):
    """How the per-sample distillation weight is derived from eta."""

    ONE = "one"
    ETA = "eta"
    SG_ETA = "sg_eta"
    SG_NORM_ETA = "sg_norm_eta"
    NORM_ETA = "norm_eta"


_WEIGHT_MODE_ALIASES = {
    "1": WeightMode.ONE,
    "one": WeightMode.ONE,
    "eta": WeightMode.ETA,
    "η": WeightMode.ETA,
    "sg_eta": WeightMode.SG_ETA,
    "sg(eta)": WeightMode.SG_ETA,
    "sg(η)": WeightMode.SG_ETA,
    "sg_norm_eta": WeightMode.SG_NORM_ETA,
    "sg(norm(eta))": WeightMode.SG_NORM_ETA,
    "sg(norm(η))": WeightMode.SG_NORM_ETA,
    "norm_eta": WeightMode.NORM_ETA,
    "norm(eta)": WeightMode.NORM_ETA,
    "norm(η)": WeightMode.NORM_ETA,
}


def parse_weight_mode(text: str) -> WeightMode:
    """Accept canonical names plus the compact forms like 'SG(Norm(eta))'."""
    key = text.strip().lower()
    if key in _WEIGHT_MODE_ALIASES:
        return _WEIGHT_MODE_ALIASES[key]
    raise ValueError(
        f"unknown weight mode {text!r}; expected one of "
        f"{sorted(m.value for m in WeightMode)}")


class NovelProbSource(Enum):
    """Which novel-class probabilities feed the self-labeling loss.

    JOINT_RAW (default) scores pseudo-labels against the unrescaled novel
    block of the joint softmax, so the loss also drives known-class mass
    of unlabeled samples toward zero; without that force the joint argmax
    never leaves the known block. RENORMALIZED rescales the block to sum
    to 1 per sample, which is identical in value and gradient to a softmax
    over the novel logits alone (and computed that way for stability).
    """

    JOINT_RAW = "joint_raw"
    RENORMALIZED = "renormalized"


@dataclass
class LossBreakdown:
    """Scalar summary of one step plus the tape node to differentiate."""

    l_sup: float
    l_u: float
    l_rkd: float
    total: float
    eta_mean: float
    kl_per_sample: np.ndarray
    eta: np.ndarray
    loss: Tensor
    plan: transport.PseudoLabelPlan | None


def supervised_ce(full_probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class under the joint softmax."""
    labels = np.asarray(labels)
    n, width = full_probs.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= width):
        raise ValueError(
            f"labels must lie in [0, {width}), got range "
            f"[{labels.min()}, {labels.max()}]")
    one_hot = np.zeros((n, width))
    one_hot[np.arange(n), labels] = 1.0
    log_probs = ad.ln(ad.clamp_min(full_probs, PROB_FLOOR))
    return -ad.reduce_sum(Tensor(one_hot) * log_probs) / n


def relation_strength(full_probs: Tensor, n_known: int) -> Tensor:
    """Per-sample probability mass on the known-class block (eta)."""
    return ad.reduce_sum(ad.slice_cols(full_probs, 0, n_known), axis=1)


def weight(eta: Tensor, mode: WeightMode) -> Tensor:
    """The per-sample distillation weight g(eta) for each ablation variant."""
    if mode is WeightMode.ONE:
        return Tensor(np.ones(eta.shape))
    if mode is WeightMode.ETA:
        return eta
    if mode is WeightMode.SG_ETA:
        return ad.stop_gradient(eta)
    total = float(eta.values.sum())
    if total == 0.0:
        raise ValueError("sum of eta is zero; cannot normalize weights")
    batch = eta.shape[0]
    normalized = eta * float(batch) / ad.reduce_sum(eta)
    if mode is WeightMode.SG_NORM_ETA:
        return ad.stop_gradient(normalized)
    if mode is WeightMode.NORM_ETA:
        return normalized
    raise ValueError(f"unhandled weight mode {mode}")


def _kl_rows(p_teacher: np.ndarray, p_student: Tensor) -> Tensor:
    """Row-wise KL(teacher || student); clamps student tails with a warning."""
    if p_teacher.shape != p_student.shape:
        raise ValueError(
            f"teacher shape {p_teacher.shape} != student shape {p_student.shape}")
    if np.any(p_student.values < PROB_FLOOR):
        logger.warning("student relation probabilities below %.0e clamped",
                       PROB_FLOOR)
        p_student = ad.clamp_min(p_student, PROB_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        teacher_entropy_term = np.where(
            p_teacher > 0.0, p_teacher * np.log(p_teacher), 0.0).sum(axis=1)
    cross = ad.reduce_sum(Tensor(p_teacher) * ad.ln(p_student), axis=1)
    return Tensor(teacher_entropy_term) - cross


def relation_kd(p_teacher: np.ndarray, p_student: Tensor, g: Tensor) -> Tensor:
    """Weighted mean of per-sample KL(teacher || student)."""
    return ad.reduce_mean(g * _kl_rows(p_teacher, p_student))


def _zero() -> Tensor:
    return Tensor(np.zeros(()))


def total_loss(batch: "Batch", student: model_mod.ModelParams,
               teacher: model_mod.ModelParams | None,
               q_star: transport.PseudoLabelPlan | None,
               cfg: "RunConfig", *,
               teacher_rel: np.ndarray | None = None,
               weight_override: np.ndarray | None = None,
               solver_warnings: bool = True) -> LossBreakdown:
    """Composite objective over one mixed batch.

    Labeled rows must precede unlabeled rows. ``q_star`` may be passed in
    (tests pin it) or left None to solve on the current predictions.
    ``teacher_rel`` short-circuits the frozen teacher forward when the
    caller caches it; ``weight_override`` replaces g(eta) with a constant,
    which gradient checks use to freeze stop-gradient factors.
    """
    n = batch.features.shape[0]
    n_lab = int(batch.labeled_mask.sum())
    if not np.all(batch.labeled_mask[:n_lab]) or np.any(batch.labeled_mask[n_lab:]):
        raise ValueError("batch rows must be ordered labeled-first")
    n_known = student.n_known
    n_total_classes = n_known + student.n_novel

    out = model_mod.forward(student, batch.features, cfg.tau)

    if n_lab:
        labels = batch.labels[:n_lab]
        if labels.min() < 0 or labels.max() >= n_known:
            raise ValueError(
                f"labeled rows must carry known-class ids in [0, {n_known})")
        l_sup = supervised_ce(ad.slice_rows(out.full_probs, 0, n_lab), labels)
    else:
        l_sup = _zero()

    plan = q_star
    if n_lab < n:
        full_probs_u = ad.slice_rows(out.full_probs, n_lab, n)
        if cfg.novel_prob_source is NovelProbSource.RENORMALIZED:
            log_probs = ad.log_softmax(
                ad.slice_rows(out.novel_logits, n_lab, n), cfg.tau)
            solver_input = np.exp(log_probs.values).T
        else:
            block = ad.slice_cols(full_probs_u, n_known, n_total_classes)
            log_probs = ad.ln(ad.clamp_min(block, PROB_FLOOR))
            solver_input = block.values.T
        if plan is None:
            plan = transport.solve(solver_input, cfg.sinkhorn,
                                   warn=solver_warnings)
        l_u = transport.loss_u(plan, ad.transpose(log_probs))

        eta = relation_strength(full_probs_u, n_known)
        if cfg.beta != 0.0:
            if teacher_rel is None:
                if teacher is None:
                    raise ValueError("relation distillation needs a teacher")
                teacher_rel = model_mod.teacher_relation(
                    teacher, batch.features[n_lab:], cfg.t)
            p_student = ad.softmax(
                ad.slice_rows(out.known_logits, n_lab, n), cfg.t)
            kl = _kl_rows(teacher_rel, p_student)
            if weight_override is not None:
                g = Tensor(weight_override)
            else:
                g = weight(eta, cfg.weight_mode)
            l_rkd = ad.reduce_mean(g * kl)
            kl_values = kl.values.copy()
        else:
            l_rkd = _zero()
            kl_values = np.zeros(n - n_lab)
        eta_values = eta.values.copy()
    else:
        l_u = _zero()
        l_rkd = _zero()
        eta_values = np.zeros(0)
        kl_values = np.zeros(0)

    loss = l_sup + cfg.alpha * l_u + cfg.beta * l_rkd
    return LossBreakdown(
        l_sup=l_sup.item(), l_u=l_u.item(), l_rkd=l_rkd.item(),
        total=loss.item(),
        eta_mean=float(eta_values.mean()) if eta_values.size else 0.0,
        kl_per_sample=kl_values, eta=eta_values, loss=loss, plan=plan)
