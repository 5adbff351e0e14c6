"""Run configuration: defaults, flat key=value serialization, and hashing.

The text form is the provenance record: every run directory gets one, and
its SHA-256 prefix names the run and is stamped into every log record.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

from .losses import NovelProbSource, WeightMode, parse_weight_mode
from .transport import SinkhornConfig


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    warmup_epochs: int = 5
    cosine_decay: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, "
                             f"got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.warmup_epochs < 0:
            raise ValueError(f"warmup_epochs must be >= 0, "
                             f"got {self.warmup_epochs}")


@dataclass
class RunConfig:
    alpha: float = 1.0
    beta: float = 0.1
    tau: float = 0.1
    t: float = 0.4
    weight_mode: WeightMode = WeightMode.NORM_ETA
    novel_prob_source: NovelProbSource = NovelProbSource.JOINT_RAW
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs_pretrain: int = 50
    epochs_discover: int = 150
    batch_size: int = 64
    labeled_fraction: float = 0.5
    seed: int = 0
    novel_count_override: int | None = None
    encoder_hidden: tuple[int, ...] = (64,)
    embed_dim: int = 32
    novel_projection: bool = True
    projection_hidden: int = 32
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("tau", "t"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("alpha", "beta"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("epochs_pretrain", "epochs_discover", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0.0 < self.labeled_fraction < 1.0:
            raise ValueError(f"labeled_fraction must lie in (0, 1), "
                             f"got {self.labeled_fraction}")
        if self.novel_count_override is not None and self.novel_count_override < 1:
            raise ValueError("novel_count_override must be >= 1 when set")
        if self.embed_dim < 1 or self.projection_hidden < 1:
            raise ValueError("embedding widths must be positive")
        if not self.encoder_hidden:
            raise ValueError("encoder_hidden needs at least one width")

    def to_text(self) -> str:
        pairs = [
            ("alpha", repr(self.alpha)),
            ("beta", repr(self.beta)),
            ("tau", repr(self.tau)),
            ("t", repr(self.t)),
            ("weight_mode", self.weight_mode.value),
            ("novel_prob_source", self.novel_prob_source.value),
            ("sinkhorn.epsilon", repr(self.sinkhorn.epsilon)),
            ("sinkhorn.max_iters", str(self.sinkhorn.max_iters)),
            ("sinkhorn.tolerance", repr(self.sinkhorn.tolerance)),
            ("optimizer.learning_rate", repr(self.optimizer.learning_rate)),
            ("optimizer.momentum", repr(self.optimizer.momentum)),
            ("optimizer.warmup_epochs", str(self.optimizer.warmup_epochs)),
            ("optimizer.cosine_decay",
             "true" if self.optimizer.cosine_decay else "false"),
            ("epochs_pretrain", str(self.epochs_pretrain)),
            ("epochs_discover", str(self.epochs_discover)),
            ("batch_size", str(self.batch_size)),
            ("labeled_fraction", repr(self.labeled_fraction)),
            ("seed", str(self.seed)),
            ("novel_count_override",
             "none" if self.novel_count_override is None
             else str(self.novel_count_override)),
            ("encoder_hidden", ",".join(str(w) for w in self.encoder_hidden)),
            ("embed_dim", str(self.embed_dim)),
            ("novel_projection", "true" if self.novel_projection else "false"),
            ("projection_hidden", str(self.projection_hidden)),
            ("checkpoint_every", str(self.checkpoint_every)),
        ]
        return "\n".join(f"{k}={v}" for k, v in pairs) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())


def _parse_bool(value: str) -> bool:
    low = value.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


def _parse_optional_int(value: str) -> int | None:
    return None if value.strip().lower() == "none" else int(value)


def _parse_widths(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.split(",") if v.strip())


_PARSERS = {
    "alpha": float,
    "beta": float,
    "tau": float,
    "t": float,
    "weight_mode": parse_weight_mode,
    "novel_prob_source": NovelProbSource,
    "sinkhorn.epsilon": float,
    "sinkhorn.max_iters": int,
    "sinkhorn.tolerance": float,
    "optimizer.learning_rate": float,
    "optimizer.momentum": float,
    "optimizer.warmup_epochs": int,
    "optimizer.cosine_decay": _parse_bool,
    "epochs_pretrain": int,
    "epochs_discover": int,
    "batch_size": int,
    "labeled_fraction": float,
    "seed": int,
    "novel_count_override": _parse_optional_int,
    "encoder_hidden": _parse_widths,
    "embed_dim": int,
    "novel_projection": _parse_bool,
    "projection_hidden": int,
    "checkpoint_every": int,
}


def parse_assignments(lines) -> dict[str, object]:
    """Parse key=value lines, rejecting unknown keys by name."""
    parsed: dict[str, object] = {}
    unknown = []
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"expected key=value, got {raw!r}")
        if key not in _PARSERS:
            unknown.append(key)
            continue
        parsed[key] = _PARSERS[key](value.strip())
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return parsed


def _build(parsed: dict[str, object], base: RunConfig) -> RunConfig:
    def group(prefix: str) -> dict[str, object]:
        return {k.split(".", 1)[1]: v for k, v in parsed.items()
                if k.startswith(prefix + ".")}

    sinkhorn = replace(base.sinkhorn, **group("sinkhorn"))
    optimizer = replace(base.optimizer, **group("optimizer"))
    top = {k: v for k, v in parsed.items() if "." not in k}
    return replace(base, sinkhorn=sinkhorn, optimizer=optimizer, **top)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path) as fh:
        lines = fh.read().splitlines()
    return _build(parse_assignments(lines), base or RunConfig())


def apply_overrides(cfg: RunConfig, assignments) -> RunConfig:
    """Apply command-line key=value overrides on top of a config."""
    return _build(parse_assignments(assignments), cfg)
