"""Synthetic Gaussian-mixture benchmark with controllable class affinity.

Known classes sit on a scaled sphere; each novel class is either an affine
blend of two known centers (so its true relation to known classes is a
designed quantity) or an isolated center far from all of them. Labels of
unlabeled novel samples are readable only through an evaluation-side
escape hatch, never by training code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class SplitFlag(IntEnum):
    LABELED_KNOWN = 0
    UNLABELED_NOVEL = 1
    TEST_KNOWN = 2
    TEST_NOVEL = 3


_FLAG_NAMES = {f.name.lower(): f for f in SplitFlag}


class InfeasibleSpecError(ValueError):
    """Requested class layout cannot satisfy the separation constraints."""


AffinityEntry = tuple[int, int, float] | str

# Two affine classes share a segment so they are close in feature space but
# carry opposite relation profiles; the pairs keep both parents as the two
# nearest known centers along the whole segment.
DEFAULT_AFFINITY_PLAN: tuple[AffinityEntry, ...] = (
    (0, 6, 0.3), (0, 6, 0.7), (2, 5, 0.5), "isolated", "isolated")


@dataclass
class SyntheticSpec:
    dim: int = 16
    n_known: int = 10
    n_novel: int = 5
    samples_per_class: int = 200
    test_per_class: int = 100
    noise_sigma: float = 0.3
    center_scale: float = 3.0
    jitter_sigma: float = 0.05
    affinity_plan: tuple[AffinityEntry, ...] = DEFAULT_AFFINITY_PLAN
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if self.n_known < 2:
            raise ValueError(f"n_known must be >= 2, got {self.n_known}")
        if len(self.affinity_plan) != self.n_novel:
            raise ValueError(
                f"affinity_plan has {len(self.affinity_plan)} entries for "
                f"{self.n_novel} novel classes")
        for entry in self.affinity_plan:
            if entry == "isolated":
                continue
            a, b, lam = entry
            if not (0 <= a < self.n_known and 0 <= b < self.n_known and a != b):
                raise ValueError(f"bad known-class pair in plan entry {entry}")
            if not 0.0 <= lam <= 1.0:
                raise ValueError(f"mix weight must lie in [0,1], got {lam}")


def format_affinity_plan(plan: tuple[AffinityEntry, ...]) -> str:
    parts = []
    for entry in plan:
        if entry == "isolated":
            parts.append("iso")
        else:
            a, b, lam = entry
            parts.append(f"{a}-{b}:{lam!r}")
    return ";".join(parts)


def parse_affinity_plan(text: str) -> tuple[AffinityEntry, ...]:
    plan: list[AffinityEntry] = []
    for part in text.split(";"):
        part = part.strip()
        if part in ("iso", "isolated"):
            plan.append("isolated")
            continue
        try:
            pair, lam = part.split(":")
            a, b = pair.split("-")
            plan.append((int(a), int(b), float(lam)))
        except ValueError as exc:
            raise ValueError(f"bad affinity plan entry {part!r}") from exc
    return tuple(plan)


_SPEC_PARSERS = {
    "dim": int,
    "n_known": int,
    "n_novel": int,
    "samples_per_class": int,
    "test_per_class": int,
    "noise_sigma": float,
    "center_scale": float,
    "jitter_sigma": float,
    "affinity_plan": parse_affinity_plan,
    "seed": int,
}


def spec_to_text(spec: SyntheticSpec) -> str:
    pairs = [
        ("dim", str(spec.dim)),
        ("n_known", str(spec.n_known)),
        ("n_novel", str(spec.n_novel)),
        ("samples_per_class", str(spec.samples_per_class)),
        ("test_per_class", str(spec.test_per_class)),
        ("noise_sigma", repr(spec.noise_sigma)),
        ("center_scale", repr(spec.center_scale)),
        ("jitter_sigma", repr(spec.jitter_sigma)),
        ("affinity_plan", format_affinity_plan(spec.affinity_plan)),
        ("seed", str(spec.seed)),
    ]
    return "\n".join(f"{k}={v}" for k, v in pairs) + "\n"


def spec_from_text(lines) -> SyntheticSpec:
    """Parse key=value lines into a spec; unknown keys are listed by name."""
    parsed = {}
    unknown = []
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"expected key=value, got {raw!r}")
        if key not in _SPEC_PARSERS:
            unknown.append(key)
            continue
        parsed[key] = _SPEC_PARSERS[key](value.strip())
    if unknown:
        raise ValueError(f"unknown spec keys: {', '.join(sorted(unknown))}")
    return SyntheticSpec(**parsed)


@dataclass
class RelationOracle:
    """Designed ground-truth affinity of each novel class to each known class."""

    ground_truth_affinity: np.ndarray

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"ground_truth_affinity":
                       self.ground_truth_affinity.tolist()}, fh, indent=2)

    @classmethod
    def load(cls, path) -> RelationOracle:
        with open(path) as fh:
            payload = json.load(fh)
        return cls(np.asarray(payload["ground_truth_affinity"], dtype=np.float64))


class Dataset:
    """Immutable features/split arrays with guarded label access.

    ``training_labels`` refuses unlabeled-novel rows and counts any attempt;
    a clean run ends with ``unlabeled_label_reads == 0``. Evaluation code
    uses ``ground_truth_labels``, the explicit escape hatch.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray,
                 split: np.ndarray, n_known: int, n_novel: int, seed: int):
        self.features = np.asarray(features, dtype=np.float64)
        self._labels = np.asarray(labels, dtype=np.int64)
        self.split = np.asarray(split, dtype=np.int64)
        if not (len(self.features) == len(self._labels) == len(self.split)):
            raise ValueError("features, labels, and split lengths differ")
        self.n_known = n_known
        self.n_novel = n_novel
        self.seed = seed
        self.unlabeled_label_reads = 0
        for arr in (self.features, self._labels, self.split):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def training_labels(self, indices) -> np.ndarray:
        """Labels for training; raises on any unlabeled-novel index."""
        indices = np.asarray(indices)
        hidden = self.split[indices] == SplitFlag.UNLABELED_NOVEL
        if np.any(hidden):
            self.unlabeled_label_reads += int(hidden.sum())
            raise PermissionError(
                "training code may not read labels of unlabeled novel samples")
        return self._labels[indices].copy()

    def ground_truth_labels(self, indices=None) -> np.ndarray:
        """All labels, including hidden ones; for evaluation and scoring only."""
        if indices is None:
            return self._labels.copy()
        return self._labels[np.asarray(indices)].copy()


@dataclass
class Batch:
    """Labeled rows first; labels hold -1 where the sample is unlabeled."""

    features: np.ndarray
    labels: np.ndarray
    labeled_mask: np.ndarray
    indices: np.ndarray


def _draw_separated_centers(rng: np.random.Generator, n: int, dim: int,
                            radius: float, min_sep: float,
                            attempts: int = 1000) -> np.ndarray:
    for _ in range(attempts):
        directions = rng.normal(size=(n, dim))
        centers = radius * directions / np.linalg.norm(
            directions, axis=1, keepdims=True)
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= min_sep:
            return centers
    raise InfeasibleSpecError(
        f"could not place {n} centers at separation {min_sep:.3g} on a "
        f"radius-{radius:.3g} sphere in {dim} dimensions")


def generate(spec: SyntheticSpec) -> tuple[Dataset, RelationOracle]:
    """Deterministic dataset + relation oracle for the given spec."""
    rng = np.random.default_rng(spec.seed)
    min_sep = 4.0 * spec.noise_sigma
    known_centers = _draw_separated_centers(
        rng, spec.n_known, spec.dim, spec.center_scale, min_sep)

    novel_centers = np.zeros((spec.n_novel, spec.dim))
    for i, entry in enumerate(spec.affinity_plan):
        if entry == "isolated":
            direction = rng.normal(size=spec.dim)
            center = 2.0 * spec.center_scale * direction / np.linalg.norm(direction)
            novel_centers[i] = center
        else:
            a, b, lam = entry
            jitter = spec.jitter_sigma * rng.normal(size=spec.dim)
            novel_centers[i] = (lam * known_centers[a]
                                + (1.0 - lam) * known_centers[b] + jitter)

    all_centers = np.vstack([known_centers, novel_centers])
    rows_features, rows_labels, rows_split = [], [], []

    def emit(class_id: int, count: int, flag: SplitFlag):
        samples = all_centers[class_id] + spec.noise_sigma * rng.normal(
            size=(count, spec.dim))
        rows_features.append(samples)
        rows_labels.append(np.full(count, class_id))
        rows_split.append(np.full(count, int(flag)))

    for c in range(spec.n_known):
        emit(c, spec.samples_per_class, SplitFlag.LABELED_KNOWN)
    for c in range(spec.n_novel):
        emit(spec.n_known + c, spec.samples_per_class, SplitFlag.UNLABELED_NOVEL)
    for c in range(spec.n_known):
        emit(c, spec.test_per_class, SplitFlag.TEST_KNOWN)
    for c in range(spec.n_novel):
        emit(spec.n_known + c, spec.test_per_class, SplitFlag.TEST_NOVEL)

    dataset = Dataset(np.vstack(rows_features), np.concatenate(rows_labels),
                      np.concatenate(rows_split), spec.n_known, spec.n_novel,
                      spec.seed)

    dist = np.linalg.norm(
        novel_centers[:, None, :] - known_centers[None, :, :], axis=-1)
    shifted = -dist - (-dist).max(axis=1, keepdims=True)
    e = np.exp(shifted)
    oracle = RelationOracle(e / e.sum(axis=1, keepdims=True))
    return dataset, oracle


HEADER_PREFIX = "# dim="


def save(dataset: Dataset, path) -> None:
    """One sample per line: split_flag,label,f0,...,f{d-1}. Floats round-trip."""
    lines = [f"# dim={dataset.dim} known={dataset.n_known} "
             f"novel={dataset.n_novel} seed={dataset.seed}"]
    labels = dataset.ground_truth_labels()
    for i in range(len(dataset)):
        flag = SplitFlag(dataset.split[i]).name.lower()
        feats = ",".join(repr(float(v)) for v in dataset.features[i])
        lines.append(f"{flag},{labels[i]},{feats}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load(path) -> Dataset:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = lines[0]
    if not header.startswith(HEADER_PREFIX):
        raise ValueError(f"{path}: line 1: expected header '{HEADER_PREFIX}...'")
    meta = {}
    for token in header.lstrip("# ").split():
        key, _, value = token.partition("=")
        meta[key] = int(value)
    for key in ("dim", "known", "novel", "seed"):
        if key not in meta:
            raise ValueError(f"{path}: header missing {key}=")

    features, labels, split = [], [], []
    for line_no, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 2 + meta["dim"]:
            raise ValueError(
                f"{path}: line {line_no}: expected {2 + meta['dim']} fields, "
                f"got {len(parts)}")
        flag_name, label = parts[0], parts[1]
        if flag_name not in _FLAG_NAMES:
            raise ValueError(f"{path}: line {line_no}: unknown split flag "
                             f"{flag_name!r}")
        try:
            labels.append(int(label))
            features.append([float(v) for v in parts[2:]])
        except ValueError as exc:
            raise ValueError(f"{path}: line {line_no}: {exc}") from exc
        split.append(int(_FLAG_NAMES[flag_name]))
    return Dataset(np.array(features), np.array(labels), np.array(split),
                   meta["known"], meta["novel"], meta["seed"])


def make_batches(dataset: Dataset, batch_size: int, labeled_fraction: float,
                 rng: np.random.Generator) -> list[Batch]:
    """One epoch of mixed batches; every sample appears exactly once.

    Each batch aims for round(B * labeled_fraction) labeled rows; when one
    pool runs dry the other tops the batch up. The final short batch is
    kept.
    """
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    if not 0.0 < labeled_fraction < 1.0:
        raise ValueError(
            f"labeled_fraction must lie in (0, 1), got {labeled_fraction}")
    labeled = np.flatnonzero(dataset.split == SplitFlag.LABELED_KNOWN)
    unlabeled = np.flatnonzero(dataset.split == SplitFlag.UNLABELED_NOVEL)
    if batch_size > labeled.size + unlabeled.size:
        raise ValueError("batch_size exceeds the training split")
    labeled = rng.permutation(labeled)
    unlabeled = rng.permutation(unlabeled)
    quota = round(batch_size * labeled_fraction)

    batches = []
    li = ui = 0
    while li < labeled.size or ui < unlabeled.size:
        n_lab = min(quota, labeled.size - li)
        n_unlab = min(batch_size - n_lab, unlabeled.size - ui)
        n_lab = min(batch_size - n_unlab, labeled.size - li)
        lab_idx = labeled[li:li + n_lab]
        unlab_idx = unlabeled[ui:ui + n_unlab]
        li += n_lab
        ui += n_unlab
        indices = np.concatenate([lab_idx, unlab_idx])
        labels = np.concatenate([
            dataset.training_labels(lab_idx),
            np.full(len(unlab_idx), -1, dtype=np.int64)])
        mask = np.zeros(len(indices), dtype=bool)
        mask[:len(lab_idx)] = True
        batches.append(Batch(dataset.features[indices], labels, mask, indices))
    return batches


def make_known_batches(dataset: Dataset, batch_size: int,
                       rng: np.random.Generator) -> list[Batch]:
    """One epoch over the labeled-known split only (supervised stage)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    labeled = rng.permutation(
        np.flatnonzero(dataset.split == SplitFlag.LABELED_KNOWN))
    batches = []
    for start in range(0, labeled.size, batch_size):
        idx = labeled[start:start + batch_size]
        batches.append(Batch(dataset.features[idx],
                             dataset.training_labels(idx),
                             np.ones(len(idx), dtype=bool), idx))
    return batches
