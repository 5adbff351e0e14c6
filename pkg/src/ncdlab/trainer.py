"""Two-stage training loop: supervised warm-up, then joint discovery.

The teacher is a frozen snapshot of the pretrained model; the student
starts from the same weights and trains on the composite loss. All
randomness flows from named substreams of the run seed, so identical
configs give bit-identical trajectories.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import losses as losses_mod
from . import metrics as metrics_mod
from . import model as model_mod
from .autodiff import NonFiniteError, Tensor
from .config import OptimizerConfig, RunConfig
from .data import Dataset, SplitFlag


logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Non-finite loss or gradient; carries the config hash and position."""


# substream tags for the run seed
_STREAM_INIT = 0
_STREAM_PRETRAIN_BATCHES = 1
_STREAM_DISCOVER_BATCHES = 2
_STREAM_NOVEL_RESHAPE = 3


@dataclass
class TrainLog:
    """Per-epoch records, serialized as one JSON object per line."""

    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records and record["epoch"] < self.records[-1]["epoch"]:
            raise ValueError("epoch indices must be monotone")
        self.records.append(record)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for record in self.records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> TrainLog:
        log = cls()
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    log.records.append(json.loads(line))
        return log


def learning_rate_at(opt: OptimizerConfig, epoch: int, total_epochs: int) -> float:
    """Linear warmup from lr/100, then cosine decay back down to lr/100."""
    floor = opt.learning_rate / 100.0
    if total_epochs <= 0:
        return opt.learning_rate
    warmup = min(opt.warmup_epochs, total_epochs)
    if epoch < warmup:
        return floor + (opt.learning_rate - floor) * (epoch + 1) / warmup
    if not opt.cosine_decay:
        return opt.learning_rate
    span = max(total_epochs - warmup, 1)
    progress = (epoch - warmup) / span
    return floor + 0.5 * (opt.learning_rate - floor) * (
        1.0 + math.cos(math.pi * progress))


class MomentumState:
    """One velocity buffer per parameter, keyed by tensor identity."""

    def __init__(self, params: list[Tensor]):
        self.velocity = [np.zeros_like(p.values) for p in params]


def step_optimizer(params: list[Tensor], state: MomentumState,
                   learning_rate: float, momentum: float) -> None:
    """SGD with momentum; parameters without gradients are left alone."""
    for p, v in zip(params, state.velocity):
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError("gradient contains NaN or Inf")
        v *= momentum
        v += p.grad
        p.values -= learning_rate * v


def _diverged(stage: str, epoch: int, cfg: RunConfig,
              cause: Exception) -> TrainingDivergedError:
    return TrainingDivergedError(
        f"{stage} diverged at epoch {epoch} (config {cfg.config_hash()}, "
        f"seed {cfg.seed}): {cause}")


def pretrain(dataset: Dataset, cfg: RunConfig,
             log: TrainLog | None = None) -> model_mod.ModelParams:
    """Supervised stage over labeled known data; returns the trained model."""
    if not np.any(dataset.split == SplitFlag.LABELED_KNOWN):
        raise ValueError("dataset has no labeled known samples")
    init_rng = np.random.default_rng([cfg.seed, _STREAM_INIT])
    params = model_mod.init_params(
        init_rng, dataset.dim, dataset.n_known, dataset.n_novel,
        hidden=cfg.encoder_hidden, embed_dim=cfg.embed_dim,
        use_projection=cfg.novel_projection,
        projection_hidden=cfg.projection_hidden)
    trainable = params.parameters()
    state = MomentumState(trainable)
    config_hash = cfg.config_hash()

    for epoch in range(cfg.epochs_pretrain):
        rng = np.random.default_rng([cfg.seed, _STREAM_PRETRAIN_BATCHES, epoch])
        lr = learning_rate_at(cfg.optimizer, epoch, cfg.epochs_pretrain)
        batch_losses = []
        try:
            for batch in data_mod.make_known_batches(
                    dataset, cfg.batch_size, rng):
                out = model_mod.forward(params, batch.features, cfg.tau)
                loss = losses_mod.supervised_ce(out.full_probs, batch.labels)
                ad.zero_grads(trainable)
                ad.backward(loss)
                step_optimizer(trainable, state, lr, cfg.optimizer.momentum)
                batch_losses.append(loss.item())
        except NonFiniteError as exc:
            raise _diverged("pretrain", epoch, cfg, exc) from exc
        if log is not None:
            log.append({"stage": "pretrain", "epoch": epoch,
                        "l_sup": float(np.mean(batch_losses)), "lr": lr,
                        "config_hash": config_hash})
    return params


def _reshape_novel_head(params: model_mod.ModelParams, n_novel: int,
                        seed: int) -> None:
    """Replace only the novel head with fresh unit-norm prototypes."""
    rng = np.random.default_rng([seed, _STREAM_NOVEL_RESHAPE])
    rows = rng.normal(size=(n_novel, params.embed_dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    params.novel_head = Tensor(rows, requires_grad=True)


def discover(dataset: Dataset, pretrained: model_mod.ModelParams,
             cfg: RunConfig,
             checkpoint_dir=None) -> tuple[model_mod.ModelParams, TrainLog]:
    """Joint discovery stage; returns the trained student and its log."""
    teacher = model_mod.snapshot(pretrained)
    student = model_mod.clone_trainable(pretrained)
    if (cfg.novel_count_override is not None
            and cfg.novel_count_override != student.n_novel):
        _reshape_novel_head(student, cfg.novel_count_override, cfg.seed)
    trainable = student.parameters()
    state = MomentumState(trainable)
    config_hash = cfg.config_hash()
    log = TrainLog()
    total_plans = 0
    stalled_plans = 0
    worst_violation = 0.0

    # the teacher never moves, so its relation rows are computed once
    teacher_rel_by_index = None
    if cfg.beta != 0.0:
        unlabeled = np.flatnonzero(dataset.split == SplitFlag.UNLABELED_NOVEL)
        teacher_rel_by_index = np.zeros((len(dataset), dataset.n_known))
        teacher_rel_by_index[unlabeled] = model_mod.teacher_relation(
            teacher, dataset.features[unlabeled], cfg.t)

    for epoch in range(cfg.epochs_discover):
        rng = np.random.default_rng([cfg.seed, _STREAM_DISCOVER_BATCHES, epoch])
        lr = learning_rate_at(cfg.optimizer, epoch, cfg.epochs_discover)
        sums = {"l_sup": 0.0, "l_u": 0.0, "l_rkd": 0.0, "total": 0.0}
        eta_parts = []
        plans = []
        n_batches = 0
        try:
            for batch in data_mod.make_batches(
                    dataset, cfg.batch_size, cfg.labeled_fraction, rng):
                teacher_rel = None
                if teacher_rel_by_index is not None:
                    n_lab = int(batch.labeled_mask.sum())
                    teacher_rel = teacher_rel_by_index[batch.indices[n_lab:]]
                breakdown = losses_mod.total_loss(
                    batch, student, teacher, None, cfg,
                    teacher_rel=teacher_rel, solver_warnings=False)
                ad.zero_grads(trainable)
                ad.backward(breakdown.loss)
                step_optimizer(trainable, state, lr, cfg.optimizer.momentum)
                for key in sums:
                    sums[key] += getattr(breakdown, key)
                if breakdown.eta.size:
                    eta_parts.append(breakdown.eta)
                if breakdown.plan is not None:
                    plans.append(breakdown.plan)
                    total_plans += 1
                    if not breakdown.plan.converged:
                        stalled_plans += 1
                        worst_violation = max(worst_violation,
                                              breakdown.plan.max_violation)
                n_batches += 1
        except NonFiniteError as exc:
            raise _diverged("discover", epoch, cfg, exc) from exc

        eta_all = np.concatenate(eta_parts) if eta_parts else np.zeros(1)
        report = metrics_mod.task_agnostic_eval(student, dataset, cfg.tau)
        record = {
            "epoch": epoch,
            "lr": lr,
            "l_sup": sums["l_sup"] / n_batches,
            "l_u": sums["l_u"] / n_batches,
            "l_rkd": sums["l_rkd"] / n_batches,
            "total": sums["total"] / n_batches,
            "eta_mean": float(eta_all.mean()),
            "eta_min": float(eta_all.min()),
            "eta_max": float(eta_all.max()),
            "sinkhorn_converged_frac":
                float(np.mean([p.converged for p in plans])) if plans else 1.0,
            "sinkhorn_max_violation":
                float(max(p.max_violation for p in plans)) if plans else 0.0,
            "train_novel_acc":
                metrics_mod.train_novel_cluster_acc(student, dataset, cfg.tau),
            "known_acc": report.known_acc,
            "novel_cluster_acc": report.novel_cluster_acc,
            "all_acc": report.all_acc,
            "config_hash": config_hash,
        }
        log.append(record)
        if (checkpoint_dir is not None and cfg.checkpoint_every > 0
                and (epoch + 1) % cfg.checkpoint_every == 0):
            model_mod.save_checkpoint(
                student, f"{checkpoint_dir}/student_epoch{epoch + 1:04d}.ckpt")
    if stalled_plans:
        logger.warning(
            "sinkhorn hit max_iters on %d/%d batches (worst violation %.2g); "
            "last iterates were used", stalled_plans, total_plans,
            worst_violation)
    return student, log
