"""Mention pooling and dense-retrieval disambiguation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .index import EntityIndex
from .mention import SpanScore

__all__ = ["EDParams", "MentionCandidate", "Disambiguation", "pool_mention", "ed_score", "disambiguate",
           "DEFAULT_K"]

DEFAULT_K = 16


@dataclass
class EDParams:
    pool_weight: np.ndarray
    pool_bias: np.ndarray

    def __post_init__(self):
        self.pool_weight = np.asarray(self.pool_weight, dtype=np.float64)
        self.pool_bias = np.asarray(self.pool_bias, dtype=np.float64)
        d = self.pool_bias.shape[0]
        if self.pool_weight.shape != (d, d) or self.pool_bias.ndim != 1:
            raise ValueError("pool_weight must be (d, d) and pool_bias (d,)")
        if not (np.all(np.isfinite(self.pool_weight)) and np.all(np.isfinite(self.pool_bias))):
            raise ValueError("ED params contain non-finite entries")

    @property
    def dim(self) -> int:
        return self.pool_bias.shape[0]

    @classmethod
    def identity(cls, dim: int, scale: float = 1.0) -> "EDParams":
        return cls(np.eye(dim) * scale, np.zeros(dim))

    def copy(self) -> "EDParams":
        return EDParams(self.pool_weight.copy(), self.pool_bias.copy())


@dataclass
class MentionCandidate:
    i: int
    j: int
    md: SpanScore
    m: np.ndarray


@dataclass
class Disambiguation:
    entity_id: str
    ed_score: float
    runner_ups: list = field(default_factory=list)


def pool_mention(reps: np.ndarray, i: int, j: int, params: EDParams) -> np.ndarray:
    """Mean of the span's token vectors followed by one affine layer."""
    if not 0 <= i <= j < len(reps):
        raise ValueError(f"span ({i}, {j}) outside passage of {len(reps)} tokens")
    return params.pool_weight @ reps[i : j + 1].mean(axis=0) + params.pool_bias


def ed_score(m: np.ndarray, e: np.ndarray) -> float:
    m = np.asarray(m, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if m.shape != e.shape:
        raise ValueError(f"dimension mismatch: mention {m.shape} vs entity {e.shape}")
    return float(m @ e)


def disambiguate(candidate: MentionCandidate, index: EntityIndex, k: int = DEFAULT_K) -> Disambiguation:
    hits = index.search(candidate.m, k)
    (best, score), rest = hits[0], hits[1:]
    return Disambiguation(best, score, rest)
