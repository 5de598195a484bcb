"""Synthetic multimodal classification task.

Each sample pairs a small noisy image of a procedural pattern with a discrete
token. The label mixes both inputs through

    label = (3 * pattern + 5 * token) mod n_classes

which, at the default sizes (8 patterns, 8 tokens, 16 classes), makes either
input alone worth only 1/8 accuracy while the pair determines the label
exactly, so a model must fuse the modalities to do well. The class histogram
is uniform: every label is hit by the same number of (pattern, token) pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Dataset", "TaskConfig", "generate_dataset", "pattern_bank"]


@dataclass(frozen=True)
class TaskConfig:
    n_patterns: int = 8
    n_tokens: int = 8
    n_classes: int = 16
    image_size: int = 8
    noise_std: float = 0.5
    train_count: int = 4096
    eval_count: int = 1024

    def __post_init__(self):
        if not 2 <= self.n_patterns <= 8:
            raise ValueError("n_patterns must be in [2, 8]")
        if self.n_tokens < 2 or self.n_classes < 2:
            raise ValueError("n_tokens and n_classes must be >= 2")
        if self.image_size < 4:
            raise ValueError("image_size must be >= 4")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.train_count < 1 or self.eval_count < 1:
            raise ValueError("train_count and eval_count must be >= 1")

    @property
    def pixels(self) -> int:
        return self.image_size * self.image_size


@dataclass
class Dataset:
    """Flattened images, token ids, and labels; one row per sample."""

    images: np.ndarray
    tokens: np.ndarray
    labels: np.ndarray

    @property
    def n(self) -> int:
        return len(self.labels)


def pattern_bank(image_size: int = 8) -> np.ndarray:
    """Eight fixed +-1 templates: stripes, checker, diagonals, blobs."""
    s = image_size
    r, c = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    half = s // 2
    quarter = max(s // 4, 1)
    bank = np.stack([
        np.where(r % 2 == 0, 1.0, -1.0),
        np.where(c % 2 == 0, 1.0, -1.0),
        np.where((r + c) % 2 == 0, 1.0, -1.0),
        np.where(np.abs(r - c) <= 1, 1.0, -1.0),
        np.where((np.abs(r - (s - 1) / 2) < quarter) & (np.abs(c - (s - 1) / 2) < quarter),
                 1.0, -1.0),
        np.where((r < quarter) | (r >= s - quarter), 1.0, -1.0) *
        np.where((c < quarter) | (c >= s - quarter), 1.0, -1.0),
        np.where((np.abs(r - half) <= 0) | (np.abs(c - half) <= 0), 1.0, -1.0),
        np.where(np.abs(r + c - (s - 1)) <= 1, 1.0, -1.0),
    ])
    return bank.astype(np.float32)


def labels_for(patterns: np.ndarray, tokens: np.ndarray, n_classes: int) -> np.ndarray:
    return (3 * patterns + 5 * tokens) % n_classes


def generate_dataset(task: TaskConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic (train, eval) split; samples are disjoint draws."""
    rng = np.random.default_rng(seed)
    total = task.train_count + task.eval_count
    bank = pattern_bank(task.image_size)[:task.n_patterns]
    patterns = rng.integers(0, task.n_patterns, size=total)
    tokens = rng.integers(0, task.n_tokens, size=total)
    labels = labels_for(patterns, tokens, task.n_classes)
    noise = rng.normal(0.0, task.noise_std, size=(total, task.image_size, task.image_size))
    images = (bank[patterns] + noise).reshape(total, -1).astype(np.float32)

    def cut(a, b):
        return Dataset(images=images[a:b], tokens=tokens[a:b].astype(np.int64),
                       labels=labels[a:b].astype(np.int64))

    return cut(0, task.train_count), cut(task.train_count, total)
