"""Rejection head: a one-hidden-layer network over the features of a
``(span, top entity)`` pair that gates final predictions by ``gamma``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mention import sigmoid

__all__ = ["RParams", "build_features", "feature_length", "rejection_score", "rejection_forward", "accept",
           "DEFAULT_HIDDEN"]

DEFAULT_HIDDEN = 128


def feature_length(dim: int) -> int:
    return 2 + 4 * dim


@dataclass
class RParams:
    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = float(self.b2)
        h = self.b1.shape[0]
        if self.W1.ndim != 2 or self.W1.shape[0] != h or self.w2.shape != (h,):
            raise ValueError("inconsistent rejection head shapes")
        if (self.W1.shape[1] - 2) % 4 or self.W1.shape[1] < 6:
            raise ValueError(f"rejection input width {self.W1.shape[1]} is not 2 + 4d")
        if not all(np.all(np.isfinite(a)) for a in (self.W1, self.b1, self.w2, self.b2)):
            raise ValueError("rejection params contain non-finite entries")

    @property
    def hidden(self) -> int:
        return self.b1.shape[0]

    @property
    def dim(self) -> int:
        return (self.W1.shape[1] - 2) // 4

    @classmethod
    def zeros(cls, dim: int, hidden: int = DEFAULT_HIDDEN) -> "RParams":
        return cls(np.zeros((hidden, feature_length(dim))), np.zeros(hidden), np.zeros(hidden), 0.0)

    @classmethod
    def init(cls, dim: int, hidden: int = DEFAULT_HIDDEN, rng=None) -> "RParams":
        rng = np.random.default_rng(rng)
        width = feature_length(dim)
        return cls(rng.standard_normal((hidden, width)) / np.sqrt(width), np.zeros(hidden),
                   rng.standard_normal(hidden) / np.sqrt(hidden), 0.0)

    def copy(self) -> "RParams":
        return RParams(self.W1.copy(), self.b1.copy(), self.w2.copy(), self.b2)


def build_features(md_prob, ed_score, m, e) -> np.ndarray:
    """``[p, s, m, e, m - e, m * e]``; batched when ``m`` and ``e`` are 2-D."""
    m = np.asarray(m, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if m.shape != e.shape:
        raise ValueError(f"dimension mismatch: mention {m.shape} vs entity {e.shape}")
    p = np.asarray(md_prob, dtype=np.float64)[..., None]
    s = np.asarray(ed_score, dtype=np.float64)[..., None]
    return np.concatenate([p, s, m, e, m - e, m * e], axis=-1)


def rejection_forward(features: np.ndarray, params: RParams):
    """Returns ``(pre_activation, hidden, logit)``, kept for backprop."""
    z = features @ params.W1.T + params.b1
    h = np.maximum(z, 0.0)
    return z, h, h @ params.w2 + params.b2


def rejection_score(features: np.ndarray, params: RParams):
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != params.W1.shape[1]:
        raise ValueError(f"feature length {features.shape[-1]} != rejection input width {params.W1.shape[1]}")
    return sigmoid(rejection_forward(features, params)[2])


def accept(score: float, gamma: float) -> bool:
    if not 0 <= gamma <= 1:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    return score > gamma
