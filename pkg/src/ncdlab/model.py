"""Shared MLP encoder with cosine-similarity heads for known and novel classes.

The forward pass concatenates both heads' logits and applies one softmax at
temperature tau, so every prediction is a single distribution over all
known + novel classes. Relation representations are the known-class softmax
at a separate (softer) temperature t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class ModelParams:
    """All trainable arrays. Heads hold one prototype row per class."""

    encoder_layers: list[tuple[Tensor, Tensor]]
    known_head: Tensor
    novel_head: Tensor
    novel_projection: list[tuple[Tensor, Tensor]] | None = None

    @property
    def in_dim(self) -> int:
        return self.encoder_layers[0][0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.encoder_layers[-1][0].shape[1]

    @property
    def n_known(self) -> int:
        return self.known_head.shape[0]

    @property
    def n_novel(self) -> int:
        return self.novel_head.shape[0]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.encoder_layers):
            out.append((f"encoder.{i}.weight", w))
            out.append((f"encoder.{i}.bias", b))
        out.append(("known_head", self.known_head))
        out.append(("novel_head", self.novel_head))
        if self.novel_projection is not None:
            for i, (w, b) in enumerate(self.novel_projection):
                out.append((f"projection.{i}.weight", w))
                out.append((f"projection.{i}.bias", b))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


@dataclass
class ForwardOutput:
    """One batch worth of embeddings, per-head logits, and joint probabilities."""

    embedding: Tensor
    known_logits: Tensor
    novel_logits: Tensor
    full_probs: Tensor


def init_params(rng: np.random.Generator, in_dim: int, n_known: int,
                n_novel: int, hidden: tuple[int, ...] = (64,),
                embed_dim: int = 32, use_projection: bool = True,
                projection_hidden: int = 32) -> ModelParams:
    """Seeded random initialization; prototype rows start unit-norm."""

    def linear(fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        return (Tensor(w, requires_grad=True),
                Tensor(np.zeros(fan_out), requires_grad=True))

    widths = (in_dim, *hidden, embed_dim)
    encoder = [linear(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]

    def head(n_rows: int) -> Tensor:
        rows = rng.normal(size=(n_rows, embed_dim))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        return Tensor(rows, requires_grad=True)

    projection = None
    if use_projection:
        projection = [linear(embed_dim, projection_hidden),
                      linear(projection_hidden, embed_dim)]
    return ModelParams(encoder, head(n_known), head(n_novel), projection)


def _mlp(x: Tensor, layers: list[tuple[Tensor, Tensor]]) -> Tensor:
    """Tanh on every layer but the last, which stays linear."""
    h = x
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = ad.tanh(h)
    return h


def forward(params: ModelParams, x, tau: float) -> ForwardOutput:
    """Joint prediction over known + novel classes at temperature tau."""
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if x.values.ndim != 2 or x.values.shape[1] != params.in_dim:
        raise ValueError(
            f"expected features of shape (n, {params.in_dim}), got {x.shape}")
    embedding = ad.l2_normalize_rows(_mlp(x, params.encoder_layers))
    known_logits = embedding @ ad.l2_normalize_rows(params.known_head).T
    novel_input = embedding
    if params.novel_projection is not None:
        novel_input = ad.l2_normalize_rows(_mlp(embedding, params.novel_projection))
    novel_logits = novel_input @ ad.l2_normalize_rows(params.novel_head).T
    full_probs = ad.softmax(ad.concat_cols(known_logits, novel_logits), tau)
    return ForwardOutput(embedding, known_logits, novel_logits, full_probs)


def teacher_relation(teacher: ModelParams, x, t: float) -> np.ndarray:
    """Frozen known-class distribution at temperature t; plain array, no tape."""
    if t <= 0.0:
        raise ValueError(f"relation temperature must be positive, got {t}")
    logits = forward(teacher, x, tau=1.0).known_logits.values / t
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def student_relation(student: ModelParams, x, t: float) -> Tensor:
    """Same distribution on the live model; stays on the gradient tape."""
    if t <= 0.0:
        raise ValueError(f"relation temperature must be positive, got {t}")
    return ad.softmax(forward(student, x, tau=1.0).known_logits, t)


def _copy_layers(layers, requires_grad: bool):
    return [(Tensor(w.values.copy(), requires_grad),
             Tensor(b.values.copy(), requires_grad)) for w, b in layers]


def snapshot(params: ModelParams) -> ModelParams:
    """Frozen deep copy; the optimizer can never reach these arrays."""
    proj = None
    if params.novel_projection is not None:
        proj = _copy_layers(params.novel_projection, False)
    return ModelParams(_copy_layers(params.encoder_layers, False),
                       Tensor(params.known_head.values.copy(), False),
                       Tensor(params.novel_head.values.copy(), False),
                       proj)


def clone_trainable(params: ModelParams) -> ModelParams:
    """Deep copy with gradients enabled; used to spawn the student."""
    proj = None
    if params.novel_projection is not None:
        proj = _copy_layers(params.novel_projection, True)
    return ModelParams(_copy_layers(params.encoder_layers, True),
                       Tensor(params.known_head.values.copy(), True),
                       Tensor(params.novel_head.values.copy(), True),
                       proj)


CHECKPOINT_MAGIC = "ncdlab-checkpoint v1"


def save_checkpoint(params: ModelParams, path) -> None:
    """Text serialization with shape headers; float hex keeps it bit-exact."""
    lines = [CHECKPOINT_MAGIC]
    for name, tensor in params.named_parameters():
        shape = " ".join(str(s) for s in tensor.values.shape)
        lines.append(f"tensor {name} {shape}")
        lines.append(" ".join(v.hex() for v in tensor.values.reshape(-1)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> ModelParams:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC!r} file")
    named: dict[str, Tensor] = {}
    i = 1
    while i < len(lines):
        header = lines[i].split()
        if header[0] != "tensor" or len(header) < 2:
            raise ValueError(f"{path}: malformed header at line {i + 1}")
        name = header[1]
        shape = tuple(int(s) for s in header[2:])
        values = np.array([float.fromhex(v) for v in lines[i + 1].split()])
        named[name] = Tensor(values.reshape(shape), requires_grad=True)
        i += 2

    def layer_group(prefix: str) -> list[tuple[Tensor, Tensor]]:
        layers = []
        j = 0
        while f"{prefix}.{j}.weight" in named:
            layers.append((named[f"{prefix}.{j}.weight"],
                           named[f"{prefix}.{j}.bias"]))
            j += 1
        return layers

    encoder = layer_group("encoder")
    projection = layer_group("projection") or None
    if not encoder or "known_head" not in named or "novel_head" not in named:
        raise ValueError(f"{path}: incomplete checkpoint")
    return ModelParams(encoder, named["known_head"], named["novel_head"],
                       projection)
