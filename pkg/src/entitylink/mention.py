"""Span scoring for mention detection.

A span ``(i, j)`` (inclusive token indices) gets the logit

    s_start[i] + s_end[j] + sum(s_inside[t] for i < t < j)

and the probability ``sigmoid(logit)``.  Candidates are the valid spans whose
probability is strictly above ``beta``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import TokenizedPassage

__all__ = [
    "TRAIN_MAX_SPAN_LEN",
    "INFERENCE_MAX_SPAN_LEN",
    "MDParams",
    "SpanScore",
    "BoundaryScores",
    "sigmoid",
    "boundary_scores",
    "enumerate_valid_spans",
    "valid_span_arrays",
    "span_logits",
    "span_probability",
    "detect_mentions",
]

TRAIN_MAX_SPAN_LEN = 256
INFERENCE_MAX_SPAN_LEN = 10


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


@dataclass
class MDParams:
    w_start: np.ndarray
    w_end: np.ndarray
    w_inside: np.ndarray

    def __post_init__(self):
        self.w_start = np.asarray(self.w_start, dtype=np.float64)
        self.w_end = np.asarray(self.w_end, dtype=np.float64)
        self.w_inside = np.asarray(self.w_inside, dtype=np.float64)
        d = self.w_start.shape
        if len(d) != 1 or self.w_end.shape != d or self.w_inside.shape != d:
            raise ValueError("w_start, w_end, w_inside must be vectors of equal length")
        for name in ("w_start", "w_end", "w_inside"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def dim(self) -> int:
        return self.w_start.shape[0]

    @classmethod
    def zeros(cls, dim: int) -> "MDParams":
        return cls(np.zeros(dim), np.zeros(dim), np.zeros(dim))

    def copy(self) -> "MDParams":
        return MDParams(self.w_start.copy(), self.w_end.copy(), self.w_inside.copy())


@dataclass(frozen=True)
class SpanScore:
    i: int
    j: int
    logit: float
    prob: float


class BoundaryScores(NamedTuple):
    start: np.ndarray
    end: np.ndarray
    inside: np.ndarray


def boundary_scores(reps: np.ndarray, params: MDParams) -> BoundaryScores:
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim != 2 or reps.shape[0] == 0:
        raise ValueError("token representations must be a non-empty (n, d) matrix")
    if reps.shape[1] != params.dim:
        raise ValueError(f"dimension mismatch: reps have d={reps.shape[1]}, MD params have d={params.dim}")
    return BoundaryScores(reps @ params.w_start, reps @ params.w_end, reps @ params.w_inside)


def valid_span_arrays(passage: TokenizedPassage, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Valid spans as two index arrays ``(I, J)`` in lexicographic order."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    starts = np.flatnonzero(np.asarray(passage.word_start_flags, dtype=bool))
    ends = np.flatnonzero(np.asarray(passage.word_end_flags, dtype=bool))
    if starts.size == 0 or ends.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    I, J = np.meshgrid(starts, ends, indexing="ij")
    keep = (J >= I) & (J - I + 1 <= max_len)
    return I[keep].astype(np.int64), J[keep].astype(np.int64)


def enumerate_valid_spans(passage: TokenizedPassage, max_len: int) -> list[tuple[int, int]]:
    """Spans that start at a word start, end at a word end and are at most
    ``max_len`` tokens long."""
    I, J = valid_span_arrays(passage, max_len)
    return list(zip(I.tolist(), J.tolist()))


def span_logits(scores: BoundaryScores, I: np.ndarray, J: np.ndarray) -> np.ndarray:
    # prefix sums give the inside term in O(1) per span
    csum = np.concatenate([[0.0], np.cumsum(scores.inside)])
    lo = I + 1
    hi = np.maximum(J, lo)
    return scores.start[I] + scores.end[J] + (csum[hi] - csum[lo])


def span_probability(scores: BoundaryScores, i: int, j: int) -> SpanScore:
    if i > j:
        raise ValueError(f"span start {i} is after span end {j}")
    inside = float(np.sum(scores.inside[i + 1 : j]))
    logit = float(scores.start[i]) + float(scores.end[j]) + inside
    return SpanScore(i, j, logit, float(sigmoid(logit)))


def detect_mentions(
    reps: np.ndarray,
    passage: TokenizedPassage,
    params: MDParams,
    beta: float,
    max_len: int = INFERENCE_MAX_SPAN_LEN,
) -> list[SpanScore]:
    """All valid spans with probability strictly above ``beta``."""
    if not 0 <= beta < 1:
        raise ValueError(f"beta must be in [0, 1), got {beta}")
    if len(passage) == 0:
        return []
    scores = boundary_scores(reps, params)
    I, J = valid_span_arrays(passage, max_len)
    logits = span_logits(scores, I, J)
    probs = np.atleast_1d(sigmoid(logits))
    keep = np.flatnonzero(probs > beta)
    return [SpanScore(int(I[k]), int(J[k]), float(logits[k]), float(probs[k])) for k in keep]
