"""Synthetic and tiny-corpus datasets with deterministic, seed-driven splits."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .ann import ann_forward, mlp
from .tensor import Array, Rng


@dataclass
class Dataset:
    x: Array
    y: Array
    task: str  # "classify" | "regress" | "lm"

    def __len__(self) -> int:
        return len(self.x)


@dataclass
class DatasetSplits:
    train: Dataset
    calib: Dataset
    test: Dataset


@dataclass
class DataSpec:
    kind: str                     # synthetic-teacher | two-class-synthetic | char-lm
    samples: int = 10000
    input_dim: int = 8
    classes: int = 4
    task: str = "classify"        # synthetic-teacher also supports "regress"
    teacher_hidden: list[int] = field(default_factory=lambda: [32])
    path: str | None = None       # char-lm corpus file
    window: int = 8

    def __post_init__(self):
        kinds = ("synthetic-teacher", "two-class-synthetic", "char-lm")
        if self.kind not in kinds:
            raise ValueError(f"unknown dataset kind {self.kind!r}; choose from {kinds}")
        if self.samples < 10:
            raise ValueError(f"need at least 10 samples, got {self.samples}")


def _split(x: Array, y: Array, task: str, rng: Rng) -> DatasetSplits:
    """Shuffled 90/10 train/test split; calibration reuses the training split."""
    n = len(x)
    perm = rng.permutation(n)
    n_test = max(1, n // 10)
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    train = Dataset(x[train_idx], y[train_idx], task)
    test = Dataset(x[test_idx], y[test_idx], task)
    return DatasetSplits(train=train, calib=train, test=test)


def _synthetic_teacher(spec: DataSpec, rng: Rng) -> tuple[Array, Array, str]:
    x = rng.split("x").normal(0.0, 1.0, (spec.samples, spec.input_dim))
    out_dim = spec.classes
    teacher = mlp([spec.input_dim] + list(spec.teacher_hidden) + [out_dim], rng.split("teacher"))
    logits = ann_forward(teacher, x, record=False).output
    if spec.task == "regress":
        return x, logits.astype(np.float32), "regress"
    return x, logits.argmax(axis=1).astype(np.int64), "classify"


def _two_class(spec: DataSpec, rng: Rng) -> tuple[Array, Array, str]:
    n, d = spec.samples, spec.input_dim
    y = rng.split("labels").integers(0, 2, (n,)).astype(np.int64)
    offset = np.float32(1.2 / np.sqrt(d))
    x = rng.split("x").normal(0.0, 1.0, (n, d))
    x = x + (2 * y[:, None].astype(np.float32) - 1) * offset
    return x.astype(np.float32), y, "classify"


def _char_lm(spec: DataSpec, rng: Rng) -> tuple[Array, Array, str]:
    if spec.path is None:
        raise ValueError("char-lm dataset needs a corpus path")
    if not os.path.exists(spec.path):
        raise ValueError(f"cannot read corpus file: {spec.path}")
    with open(spec.path, "rb") as f:
        raw = f.read()
    if len(raw) == 0:
        raise ValueError(f"empty corpus file: {spec.path}")
    tokens = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    n = len(tokens) - spec.window
    if n < 10:
        raise ValueError(
            f"corpus too short: {len(tokens)} bytes for window {spec.window}")
    n = min(n, spec.samples)
    starts = np.arange(n)
    x = np.stack([tokens[s:s + spec.window] for s in starts])
    y = tokens[spec.window:spec.window + n]
    return x, y, "lm"


def make_dataset(spec: DataSpec, rng: Rng) -> DatasetSplits:
    """Build (train, calib, test); deterministic for a given spec and seed."""
    if spec.kind == "synthetic-teacher":
        x, y, task = _synthetic_teacher(spec, rng)
    elif spec.kind == "two-class-synthetic":
        x, y, task = _two_class(spec, rng)
    else:
        x, y, task = _char_lm(spec, rng)
    return _split(x, y, task, rng.split("split"))
