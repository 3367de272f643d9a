"""Synthetic desk-scale datasets and trigger sets.

* ``blobs``: Gaussian class clusters in R^d, the MLP fixture.
* ``patterns``: 1x8x8 procedurally drawn images. Family ``"A"`` holds
  oriented stripes (horizontal, vertical, two diagonals); family ``"B"``
  (checkerboards, bumps, squares, ramps) is a disjoint domain used as a
  fine-tuning target.
* trigger sets: uniform noise with seeded labels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import make_rng
from .errors import UsageError

SPLITS = {"train": 0, "val": 1, "test": 2}


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.X) != len(self.y):
            raise UsageError(f"{len(self.X)} samples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise UsageError("labels out of range")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.X.shape[1:])


@dataclass
class TriggerSet(Dataset):
    seed: int = 0


def _split_rng(seed: int, split: str) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), SPLITS.get(split, 3)])
    return np.random.Generator(np.random.PCG64(ss))


def blobs(n: int, dim: int = 16, num_classes: int = 4, seed: int = 0, split: str = "train", spread: float = 1.0) -> Dataset:
    """Balanced Gaussian clusters; ``seed`` fixes the centers, ``split`` the draw."""
    centers = make_rng(seed).normal(0.0, 1.0, size=(num_classes, dim))
    rng = _split_rng(seed, split)
    y = np.arange(n) % num_classes
    rng.shuffle(y)
    X = centers[y] + spread * rng.normal(0.0, 1.0, size=(n, dim))
    return Dataset(X, y, num_classes, split)


def _stripes(rng, kind: int, size: int) -> np.ndarray:
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    coord = (r, c, r + c, r - c)[kind]
    period = rng.uniform(2.5, 4.0)
    return np.sin(2 * np.pi * coord / period + rng.uniform(0, 2 * np.pi))


def _family_b(rng, kind: int, size: int) -> np.ndarray:
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == 0:
        cell = rng.integers(1, 3)
        img = ((r // cell + c // cell) % 2) * 2.0 - 1.0
        return img if rng.random() < 0.5 else -img
    if kind == 1:
        cy, cx = rng.uniform(2, size - 2, size=2)
        return 2.0 * np.exp(-((r - cy) ** 2 + (c - cx) ** 2) / 3.0) - 1.0
    if kind == 2:
        img = -np.ones((size, size))
        y0, x0 = rng.integers(0, size - 3, size=2)
        img[y0 : y0 + 4, x0 : x0 + 4] = 1.0
        return img
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * r + np.sin(theta) * c
    ramp = ramp - ramp.mean()
    return ramp / (np.abs(ramp).max() + 1e-9)


def patterns(n: int, family: str = "A", seed: int = 0, split: str = "train", noise: float = 0.3, size: int = 8) -> Dataset:
    """Four-class 1 x size x size pattern images."""
    if family not in ("A", "B"):
        raise UsageError(f"unknown pattern family {family!r}")
    rng = _split_rng(seed + (0 if family == "A" else 7919), split)
    y = np.arange(n) % 4
    rng.shuffle(y)
    draw = _stripes if family == "A" else _family_b
    X = np.stack([draw(rng, int(k), size) for k in y])
    X = X + noise * rng.normal(size=X.shape)
    return Dataset(X[:, None].astype(np.float32), y, 4, split)


def make_trigger_set(n: int, input_shape, num_classes: int, seed: int) -> TriggerSet:
    """``n`` uniform-noise samples in [-2, 2] with seeded labels."""
    if n < 1:
        raise UsageError("trigger set needs at least one sample")
    rng = make_rng(seed)
    X = rng.uniform(-2.0, 2.0, size=(n, *tuple(input_shape)))
    y = rng.integers(0, num_classes, size=n)
    return TriggerSet(X, y, num_classes, "trigger", seed=int(seed))
