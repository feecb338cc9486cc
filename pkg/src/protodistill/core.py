"""Shared types, dense-vector helpers and robust statistics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import AbstractSet, Optional

import numpy as np


class ValidationError(ValueError):
    """Bad input shape, range, or file content."""


class NumericalError(ArithmeticError):
    """A computation produced a degenerate or non-finite result."""


class DegenerateInputError(NumericalError, ValueError):
    pass


class DegeneratePrototypeError(NumericalError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class EmbeddingRecord:
    """An id, an optional class label and a dense feature vector."""

    id: str
    label: Optional[int]
    vec: np.ndarray
    split: str = "train"

    def __post_init__(self):
        vec = np.asarray(self.vec, dtype=np.float64)
        if vec.ndim != 1:
            raise ValidationError(f"record {self.id!r}: vector must be 1-D, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ValidationError(f"record {self.id!r}: non-finite vector entries")
        vec.setflags(write=False)
        object.__setattr__(self, "vec", vec)

    @property
    def dim(self) -> int:
        return self.vec.shape[0]

    def is_normalized(self, tol: float = 1e-6) -> bool:
        return abs(np.linalg.norm(self.vec) - 1.0) <= tol


@dataclass(frozen=True)
class ClassIndexSets:
    base: frozenset
    novel: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "base", frozenset(int(k) for k in self.base))
        object.__setattr__(self, "novel", frozenset(int(k) for k in self.novel))
        overlap = self.base & self.novel
        if overlap:
            raise ValidationError(f"base and novel classes overlap: {sorted(overlap)}")

    @property
    def all(self) -> frozenset:
        return self.base | self.novel

    def covers(self, classes: AbstractSet[int]) -> bool:
        return self.all == frozenset(classes)


@dataclass(frozen=True)
class RobustStats:
    median: float
    mad: float
    zscores: np.ndarray


def l2_normalize(v, axis: int = -1) -> np.ndarray:
    """Scale `v` to unit Euclidean norm along `axis`.

    Raises DegenerateInputError for an all-zero vector (or any all-zero row
    when `v` is a matrix).
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValidationError("cannot normalize a vector with non-finite entries")
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm == 0.0):
        raise DegenerateInputError("cannot normalize a zero vector")
    return v / norm


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


def softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValidationError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise ValidationError("softmax input has non-finite entries")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def robust_stats(scores, epsilon: float = 1e-8) -> RobustStats:
    """Median, median absolute deviation and robust z-scores of `scores`.

    z_j = |s_j - median| / (MAD + epsilon). Even-length medians take the
    midpoint of the two central order statistics.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValidationError("robust_stats needs at least one score")
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    med = float(np.median(s))
    dev = np.abs(s - med)
    mad = float(np.median(dev))
    z = dev / (mad + epsilon)
    z.setflags(write=False)
    return RobustStats(median=med, mad=mad, zscores=z)
