"""Synthetic multi-task benchmark family.

The base task is a Gaussian-mixture classification problem whose class
means span an informative subspace of the input; the remaining dimensions
carry pure noise. Each derived task draws fresh points from the same
mixture, rotates its own block of the informative dimensions by an angle
scaled with the strength knob, and swaps a fixed number of class labels.
Strength zero disables both transformations, making every task
statistically identical to the base.

This construction keeps the union of tasks learnable by one network while
guaranteeing interference: per-task fine-tuning overfits the nuisance
dimensions with sign-conflicting deltas, and the label swaps collide in
the shared output layer.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..errors import ContractError
from ..nn import Dataset


@dataclass(frozen=True)
class TaskFamilyConfig:
    n_tasks: int = 4
    input_dim: int = 16
    informative_dims: int = 12
    class_count: int = 8
    train_size: int = 256
    test_size: int = 256
    unlabeled_size: int = 256
    transform_strength: float = 1.0
    label_swaps: int = 1
    class_separation: float = 5.5
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ContractError("need at least one task")
        if min(self.input_dim, self.class_count, self.train_size,
               self.test_size, self.unlabeled_size) < 1:
            raise ContractError("dimensions and split sizes must be positive")
        if not 1 <= self.informative_dims <= self.input_dim:
            raise ContractError("informative_dims must be in [1, input_dim]")
        if self.transform_strength < 0:
            raise ContractError("transform strength must be >= 0")
        if self.label_swaps < 0:
            raise ContractError("label_swaps must be >= 0")


class TaskData(NamedTuple):
    task_id: str
    train: Dataset
    test: Dataset
    unlabeled: Dataset


class TaskFamily(NamedTuple):
    base: TaskData
    tasks: tuple[TaskData, ...]


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent, recomposable stream for one named pipeline stage."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]))


def _block_rotation(rng: np.random.Generator, dim: int, lo: int, hi: int,
                    strength: float) -> np.ndarray:
    """Orthogonal map rotating dims [lo, hi) by a strength-scaled angle.

    Cayley transform of a scaled random skew matrix; identity at strength 0
    and identity outside the block either way.
    """
    rotation = np.eye(dim)
    width = hi - lo
    if strength == 0.0 or width < 2:
        return rotation
    raw = rng.normal(size=(width, width))
    skew = (raw - raw.T) / 2.0
    skew = skew / max(np.linalg.norm(skew, 2), 1e-12)
    scaled = strength * skew
    eye = np.eye(width)
    rotation[lo:hi, lo:hi] = np.linalg.solve(eye - scaled, eye + scaled)
    return rotation


def _label_permutation(rng: np.random.Generator, classes: int, swaps: int) -> np.ndarray:
    perm = np.arange(classes)
    for _ in range(swaps):
        a, b = rng.choice(classes, size=2, replace=False)
        perm[a], perm[b] = perm[b], perm[a]
    return perm


def _sample_mixture(rng: np.random.Generator, means: np.ndarray, noise_scale: float,
                    size: int) -> tuple[np.ndarray, np.ndarray]:
    labels = rng.integers(0, means.shape[0], size=size)
    features = means[labels] + noise_scale * rng.normal(size=(size, means.shape[1]))
    return features, labels


def _make_splits(rng: np.random.Generator, means: np.ndarray, cfg: TaskFamilyConfig,
                 rotation: np.ndarray, permutation: np.ndarray, task_id: str) -> TaskData:
    splits = {}
    for split, size in (("train", cfg.train_size), ("test", cfg.test_size),
                        ("unlabeled", cfg.unlabeled_size)):
        features, labels = _sample_mixture(rng, means, cfg.noise_scale, size)
        splits[split] = Dataset(features @ rotation.T, permutation[labels], split)
    return TaskData(task_id, splits["train"], splits["test"], splits["unlabeled"])


def generate_task_family(cfg: TaskFamilyConfig, seed: int) -> TaskFamily:
    """Deterministic base task plus ``cfg.n_tasks`` transformed tasks."""
    rng = stage_rng(seed, "datagen")
    q = cfg.informative_dims
    means = np.zeros((cfg.class_count, cfg.input_dim))
    means[:, :q] = cfg.class_separation * rng.normal(size=(cfg.class_count, q)) / np.sqrt(q)
    base = _make_splits(rng, means, cfg, np.eye(cfg.input_dim),
                        np.arange(cfg.class_count), "base")
    # each task rotates its own slice of the informative subspace so that
    # task deltas are distinct without being mutually destructive
    block = max(q // cfg.n_tasks, 1)
    tasks = []
    for i in range(cfg.n_tasks):
        lo = (i * block) % q
        hi = min(lo + block, q)
        rotation = _block_rotation(rng, cfg.input_dim, lo, hi, cfg.transform_strength)
        swaps = cfg.label_swaps if cfg.transform_strength > 0 else 0
        permutation = _label_permutation(rng, cfg.class_count, swaps)
        tasks.append(_make_splits(rng, means, cfg, rotation, permutation, f"task{i}"))
    return TaskFamily(base, tuple(tasks))
