"""Per-layer feature statistics and the two distances defined on them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidInputError

DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class StatsConfig:
    epsilon: float = DEFAULT_EPSILON
    feature_dim: Optional[int] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidInputError(f"epsilon must be positive, got {self.epsilon}")
        if self.feature_dim is not None and self.feature_dim < 1:
            raise InvalidInputError(f"feature_dim must be >= 1, got {self.feature_dim}")


@dataclass(frozen=True, eq=False)
class FeatureStats:
    """Diagonal Gaussian descriptor ``{mean, std}`` of a token set."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        std = np.array(self.std, dtype=float).reshape(-1)
        if mean.shape != std.shape:
            raise InvalidInputError(f"mean/std length mismatch: {mean.shape} vs {std.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise InvalidInputError("feature statistics must be finite")
        if np.any(std < 0):
            raise InvalidInputError("std entries must be non-negative")
        mean.flags.writeable = False
        std.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def as_vector(self) -> np.ndarray:
        """Stacked ``[mean; std]`` of length ``2C``."""
        return np.concatenate([self.mean, self.std])

    @classmethod
    def from_vector(cls, vec) -> "FeatureStats":
        vec = np.asarray(vec, dtype=float)
        if vec.ndim != 1 or vec.shape[0] % 2:
            raise InvalidInputError("stacked statistics must be a vector of even length")
        c = vec.shape[0] // 2
        return cls(vec[:c], vec[c:])

    def __eq__(self, other):
        if not isinstance(other, FeatureStats):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)

    __hash__ = None


def compute_stats(tokens, cfg: StatsConfig = StatsConfig()) -> FeatureStats:
    """Column mean and ``sqrt(unbiased variance + eps)`` over the token rows.

    A single row has no spread, so its variance term is taken as zero.
    """
    tokens = np.asarray(tokens, dtype=float)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise InvalidInputError(f"expected a non-empty N x C token matrix, got shape {tokens.shape}")
    if cfg.feature_dim is not None and tokens.shape[1] != cfg.feature_dim:
        raise InvalidInputError(f"expected feature dim {cfg.feature_dim}, got {tokens.shape[1]}")
    if not np.all(np.isfinite(tokens)):
        raise InvalidInputError("token matrix contains non-finite entries")
    n = tokens.shape[0]
    mean = tokens.mean(axis=0)
    if n == 1:
        var = np.zeros_like(mean)
    else:
        var = ((tokens - mean) ** 2).sum(axis=0) / (n - 1)
    return FeatureStats(mean, np.sqrt(var + cfg.epsilon))


def _check_dims(a: FeatureStats, b: FeatureStats):
    if a.dim != b.dim:
        raise InvalidInputError(f"feature dimension mismatch: {a.dim} vs {b.dim}")


def w2_distance(a: FeatureStats, b: FeatureStats) -> float:
    """2-Wasserstein distance between diagonal Gaussians."""
    _check_dims(a, b)
    return float(np.sqrt(np.sum((a.mean - b.mean) ** 2) + np.sum((a.std - b.std) ** 2)))


def moment_distance(source: FeatureStats, target: FeatureStats) -> float:
    """Sum of the mean-gap and std-gap Euclidean norms."""
    _check_dims(source, target)
    return float(np.linalg.norm(source.mean - target.mean) + np.linalg.norm(source.std - target.std))
