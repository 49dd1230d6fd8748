"""End-to-end inference: windowing, one encoder pass per window, MD -> ED ->
rejection, and overlap resolution by MD score."""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import encoder
from .data import Passage, TokenizedPassage, tokenize
from .disambiguation import DEFAULT_K
from .evaluation import e2e_prf
from .index import EntityIndex
from .mention import INFERENCE_MAX_SPAN_LEN, detect_mentions
from .model import LinkerModel
from .rejection import build_features, rejection_score

__all__ = [
    "LinkerConfig",
    "LinkedMention",
    "LinkStats",
    "SweepPoint",
    "SweepResult",
    "split_windows",
    "merge_window_predictions",
    "score_candidates",
    "link_passage",
    "link_corpus",
    "sweep_gamma",
    "parse_grid",
    "write_predictions",
    "read_predictions",
    "write_sweep_csv",
]


@dataclass(frozen=True)
class LinkerConfig:
    beta: float = 0.4
    gamma: float = 0.2
    max_seq_len: int = 256
    window_overlap: int = 128
    max_mention_len: int = INFERENCE_MAX_SPAN_LEN
    k: int = DEFAULT_K

    def __post_init__(self):
        if not 0 <= self.beta < 1:
            raise ValueError(f"beta must be in [0, 1), got {self.beta}")
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0 < self.window_overlap < self.max_seq_len:
            raise ValueError("window_overlap must satisfy 0 < overlap < max_seq_len")
        if self.max_mention_len < 1 or self.k < 1:
            raise ValueError("max_mention_len and k must be positive")


@dataclass(frozen=True)
class LinkedMention:
    i: int
    j: int
    start: int
    end: int
    entity_id: str
    md_prob: float
    ed_score: float
    rejection_score: float

    def to_json(self) -> dict:
        return {"start": self.start, "end": self.end, "entity_id": self.entity_id, "md": self.md_prob,
                "ed": self.ed_score, "r": self.rejection_score}


@dataclass
class LinkStats:
    """Instrumentation counters; safe to share only within one thread."""

    passages: int = 0
    windows: int = 0
    encoder_calls: int = 0
    candidates: int = 0
    seconds: float = 0.0

    def merge(self, other: "LinkStats") -> None:
        self.passages += other.passages
        self.windows += other.windows
        self.encoder_calls += other.encoder_calls
        self.candidates += other.candidates
        self.seconds += other.seconds


def split_windows(n: int, max_seq_len: int, overlap: int) -> list[tuple[int, int]]:
    """Half-open token windows of at most ``max_seq_len`` starting at
    multiples of ``max_seq_len - overlap``; the last one ends at ``n``."""
    if not 0 <= overlap < max_seq_len:
        raise ValueError("overlap must be smaller than max_seq_len")
    if n <= 0:
        return []
    stride = max_seq_len - overlap
    windows = []
    start = 0
    while start + max_seq_len < n:
        windows.append((start, start + max_seq_len))
        start += stride
    windows.append((start, n))
    return windows


def _merge_key(m: LinkedMention):
    return (-m.md_prob, m.i, -(m.j - m.i), m.entity_id)


def merge_window_predictions(mentions: Iterable[LinkedMention]) -> list[LinkedMention]:
    """Greedy overlap resolution: highest MD probability first, then earlier
    start, longer span, smaller entity id.  Output is ordered by position."""
    kept: list[LinkedMention] = []
    for m in sorted(mentions, key=_merge_key):
        if all(m.j < k.i or k.j < m.i for k in kept):
            kept.append(m)
    return sorted(kept, key=lambda m: (m.i, m.j))


def _score_window(tp: TokenizedPassage, offset: int, model: LinkerModel, index: EntityIndex,
                  config: LinkerConfig, stats: LinkStats) -> list[LinkedMention]:
    reps = encoder.encode_tokens(tp, model.mention_encoder)
    stats.encoder_calls += 1
    spans = detect_mentions(reps, tp, model.md, config.beta, config.max_mention_len)
    if not spans:
        return []
    I = np.array([s.i for s in spans])
    J = np.array([s.j for s in spans])
    csum = np.vstack([np.zeros((1, reps.shape[1])), np.cumsum(reps, axis=0)])
    pooled = (csum[J + 1] - csum[I]) / (J - I + 1)[:, None]
    M = pooled @ model.ed.pool_weight.T + model.ed.pool_bias
    hits = index.search_batch(M, config.k)
    top_ids = [h[0][0] for h in hits]
    ed = np.array([h[0][1] for h in hits])
    Etop = np.stack([index.vector(e) for e in top_ids])
    probs = np.array([s.prob for s in spans])
    r = np.atleast_1d(rejection_score(build_features(probs, ed, M, Etop), model.rejection))
    stats.candidates += len(spans)
    out = []
    for k, s in enumerate(spans):
        gi, gj = s.i + offset, s.j + offset
        out.append(LinkedMention(gi, gj, tp.token_char_spans[s.i][0], tp.token_char_spans[s.j][1], top_ids[k],
                                 s.prob, float(ed[k]), float(r[k])))
    return out


def score_candidates(text, model: LinkerModel, index: EntityIndex, config: LinkerConfig = LinkerConfig(),
                     stats: Optional[LinkStats] = None, windowed: bool = True) -> list[LinkedMention]:
    """Merged candidates before the rejection gate (every rejection score is
    kept, so any ``gamma`` can be applied afterwards)."""
    if len(index) == 0:
        raise ValueError("cannot link against an empty index")
    if index.dim != model.dim:
        raise ValueError(f"dimension mismatch: model d={model.dim}, index d={index.dim}")
    stats = stats if stats is not None else LinkStats()
    t0 = time.perf_counter()
    tp = text if isinstance(text, TokenizedPassage) else tokenize(text)
    n = len(tp)
    stats.passages += 1
    if n == 0:
        return []
    windows = split_windows(n, config.max_seq_len, config.window_overlap) if windowed else [(0, n)]
    found: list[LinkedMention] = []
    for s, e in windows:
        stats.windows += 1
        found.extend(_score_window(tp.slice(s, e), s, model, index, config, stats))
    merged = merge_window_predictions(found)
    stats.seconds += time.perf_counter() - t0
    return merged


def link_passage(text, model: LinkerModel, index: EntityIndex, config: LinkerConfig = LinkerConfig(),
                 stats: Optional[LinkStats] = None, windowed: bool = True) -> list[LinkedMention]:
    """Linked mentions of one passage with rejection score above ``gamma``.

    Overlaps are resolved before gating, so raising ``gamma`` only ever
    removes mentions.
    """
    return [m for m in score_candidates(text, model, index, config, stats, windowed)
            if m.rejection_score > config.gamma]


def link_corpus(passages: Sequence[Passage], model: LinkerModel, index: EntityIndex,
                config: LinkerConfig = LinkerConfig(), threads: int = 1,
                stats: Optional[LinkStats] = None, gate: bool = True) -> dict:
    """``{passage id: mentions}``; passages are processed independently."""
    stats = stats if stats is not None else LinkStats()
    fn = link_passage if gate else score_candidates

    def run(p: Passage):
        local = LinkStats()
        return p.id, fn(tokenize(p.text, p.id, p.language), model, index, config, local), local

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, passages))
    else:
        results = [run(p) for p in passages]
    out = {}
    for pid, mentions, local in results:
        out[pid] = mentions
        stats.merge(local)
    return out


@dataclass(frozen=True)
class SweepPoint:
    gamma: float
    precision: Optional[float]
    recall: Optional[float]
    f1: float
    num_predictions: int


@dataclass
class SweepResult:
    points: list = field(default_factory=list)

    @property
    def best(self) -> SweepPoint:
        return max(self.points, key=lambda p: p.f1)

    @property
    def best_gamma(self) -> float:
        return self.best.gamma


def sweep_gamma(dev_corpus: Sequence[Passage], model: LinkerModel, index: EntityIndex,
                gamma_grid: Sequence[float], config: LinkerConfig = LinkerConfig(), threads: int = 1,
                cached: Optional[dict] = None) -> SweepResult:
    """Precision/recall/F1 at each ``gamma``; the model runs once and only the
    final gate is re-applied per grid point."""
    grid = [float(g) for g in gamma_grid]
    if not grid:
        raise ValueError("gamma grid is empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("gamma grid must be sorted ascending")
    if cached is None:
        cached = link_corpus(dev_corpus, model, index, config, threads, gate=False)
    gold = {p.id: p.mentions for p in dev_corpus}
    result = SweepResult()
    for g in grid:
        preds = {pid: [m for m in ms if m.rejection_score > g] for pid, ms in cached.items()}
        prf = e2e_prf(preds, gold)
        result.points.append(SweepPoint(g, prf.precision, prf.recall, prf.f1, prf.num_pred))
    return result


def parse_grid(spec: str) -> list[float]:
    """``"start:stop:step"`` (inclusive stop) or a comma-separated list."""
    try:
        if ":" in spec:
            start, stop, step = (float(x) for x in spec.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            count = int(np.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + k * step, 10) for k in range(count)]
        values = [float(x) for x in spec.split(",") if x.strip()]
        if not values:
            raise ValueError
        return values
    except ValueError:
        raise ValueError(f"malformed grid {spec!r}; expected start:stop:step or a comma list") from None


def write_predictions(predictions: dict, path: os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pid, mentions in predictions.items():
            fh.write(json.dumps({"id": pid, "mentions": [m.to_json() for m in mentions]}) + "\n")


def read_predictions(path: os.PathLike) -> dict:
    """Prediction file -> ``{id: [LinkedMention]}`` (token indices set to -1)."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out[str(obj["id"])] = [
                    LinkedMention(-1, -1, int(m["start"]), int(m["end"]), str(m["entity_id"]),
                                  float(m.get("md", 0.0)), float(m.get("ed", 0.0)), float(m.get("r", 0.0)))
                    for m in obj.get("mentions", [])
                ]
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed prediction line ({exc})") from None
    return out


def write_sweep_csv(result: SweepResult, path: os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "precision", "recall", "f1", "num_predictions"])
        for p in result.points:
            w.writerow([p.gamma, "" if p.precision is None else repr(p.precision),
                        "" if p.recall is None else repr(p.recall), repr(p.f1), p.num_predictions])
