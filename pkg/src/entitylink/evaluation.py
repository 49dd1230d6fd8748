"""Hard-match metrics: end-to-end P/R/F1, MD recall, ED accuracy with oracle
mentions, per-language breakdown and an audit list of false positives.

Predictions and gold are mappings ``{passage id: [mention]}`` where each
mention has ``start``, ``end`` (character offsets) and ``entity_id``.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "PRF",
    "EDAccuracy",
    "LanguageScores",
    "EvalReport",
    "f1_score",
    "e2e_prf",
    "md_recall",
    "ed_accuracy",
    "underlabeling_report",
    "evaluate",
    "format_report",
]


def f1_score(p: Optional[float], r: Optional[float]) -> float:
    if p is None or r is None or p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


@dataclass(frozen=True)
class PRF:
    precision: Optional[float]
    recall: Optional[float]
    f1: float
    num_pred: int
    num_gold: int
    num_correct: int


def _triples(mentions) -> Counter:
    return Counter((m.start, m.end, m.entity_id) for m in mentions)


def _spans(mentions) -> Counter:
    return Counter((m.start, m.end) for m in mentions)


def _matched(pred: Counter, gold: Counter) -> int:
    # one-to-one: each gold item absorbs at most one identical prediction
    return sum(min(c, gold[key]) for key, c in pred.items())


def e2e_prf(predictions: Mapping[str, Sequence], gold: Mapping[str, Sequence]) -> PRF:
    correct = n_pred = n_gold = 0
    for pid in set(predictions) | set(gold):
        p = _triples(predictions.get(pid, ()))
        g = _triples(gold.get(pid, ()))
        correct += _matched(p, g)
        n_pred += sum(p.values())
        n_gold += sum(g.values())
    precision = correct / n_pred if n_pred else None
    recall = correct / n_gold if n_gold else None
    # 2PR/(P+R) written in counts, so the result is a single correctly rounded division
    f1 = 2 * correct / (n_pred + n_gold) if correct else 0.0
    return PRF(precision, recall, f1, n_pred, n_gold, correct)


def md_recall(predictions: Mapping[str, Sequence], gold: Mapping[str, Sequence]) -> Optional[float]:
    """Fraction of gold spans matched exactly by a predicted span; entities
    are ignored."""
    hit = total = 0
    for pid, gms in gold.items():
        g = _spans(gms)
        hit += _matched(_spans(predictions.get(pid, ())), g)
        total += sum(g.values())
    return hit / total if total else None


@dataclass(frozen=True)
class EDAccuracy:
    accuracy: Optional[float]
    num_evaluated: int
    num_correct: int
    num_unreachable: int


def ed_accuracy(model, index, passages) -> EDAccuracy:
    """Accuracy of the top retrieved entity for every gold span (oracle
    mention detection).  Gold spans that do not align with token boundaries
    are excluded and counted."""
    from .data import char_span_to_token_span, tokenize
    from .encoder import encode_tokens

    correct = evaluated = unreachable = 0
    for p in passages:
        if not p.mentions:
            continue
        tp = tokenize(p.text, p.id)
        spans, golds = [], []
        for gm in p.mentions:
            span = char_span_to_token_span(tp, gm.start, gm.end)
            if span is None:
                unreachable += 1
                continue
            spans.append(span)
            golds.append(gm.entity_id)
        if not spans:
            continue
        reps = encode_tokens(tp, model.mention_encoder)
        csum = np.vstack([np.zeros((1, reps.shape[1])), np.cumsum(reps, axis=0)])
        I = np.array([s[0] for s in spans])
        J = np.array([s[1] for s in spans])
        M = ((csum[J + 1] - csum[I]) / (J - I + 1)[:, None]) @ model.ed.pool_weight.T + model.ed.pool_bias
        for hits, g in zip(index.search_batch(M, 1), golds):
            correct += hits[0][0] == g
            evaluated += 1
    return EDAccuracy(correct / evaluated if evaluated else None, evaluated, correct, unreachable)


def underlabeling_report(predictions: Mapping[str, Sequence], gold: Mapping[str, Sequence]) -> list[dict]:
    """Predictions that count as false positives, for manual audit of missing
    gold labels.  Each row carries how often the predicted entity occurs in
    gold and a coarse frequency bucket; rows are sorted by descending MD
    probability."""
    freq = Counter(m.entity_id for ms in gold.values() for m in ms)
    rows = []
    for pid, pms in predictions.items():
        remaining = _triples(gold.get(pid, ()))
        for m in pms:
            key = (m.start, m.end, m.entity_id)
            if remaining[key] > 0:
                remaining[key] -= 1
                continue
            f = freq.get(m.entity_id, 0)
            rows.append({
                "id": pid,
                "start": m.start,
                "end": m.end,
                "entity_id": m.entity_id,
                "md": float(getattr(m, "md_prob", 0.0)),
                "r": float(getattr(m, "rejection_score", 0.0)),
                "gold_frequency": f,
                "frequency_bucket": "unseen" if f == 0 else "rare" if f < 5 else "frequent",
            })
    rows.sort(key=lambda r: (-r["md"], r["id"], r["start"], r["end"]))
    return rows


@dataclass
class LanguageScores:
    precision: Optional[float]
    recall: Optional[float]
    f1: float
    md_recall: Optional[float]
    num_gold: int
    num_pred: int
    num_correct: int
    ed_accuracy: Optional[float] = None
    num_unreachable_gold: int = 0


@dataclass
class EvalReport:
    overall: LanguageScores
    per_language: dict = field(default_factory=dict)
    macro_f1: Optional[float] = None

    def to_json(self) -> dict:
        return {"overall": asdict(self.overall),
                "per_language": {k: asdict(v) for k, v in sorted(self.per_language.items())},
                "macro_f1": self.macro_f1}

    def save(self, path: os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)


def _scores(pred, gold, unreachable: int = 0) -> LanguageScores:
    prf = e2e_prf(pred, gold)
    return LanguageScores(prf.precision, prf.recall, prf.f1, md_recall(pred, gold), prf.num_gold, prf.num_pred,
                          prf.num_correct, None, unreachable)


def evaluate(predictions: Mapping[str, Sequence], gold: Mapping[str, Sequence],
             languages: Optional[Mapping[str, str]] = None,
             unreachable: Optional[Mapping[str, int]] = None) -> EvalReport:
    """Micro-averaged scores overall and per language; ``macro_f1`` is the
    plain mean of the per-language F1 values."""
    unreachable = unreachable or {}
    report = EvalReport(_scores(predictions, gold, sum(unreachable.values())))
    if languages:
        by_lang: dict = {}
        for pid in gold:
            by_lang.setdefault(languages.get(pid) or "und", []).append(pid)
        for lang, pids in by_lang.items():
            report.per_language[lang] = _scores({p: predictions.get(p, ()) for p in pids},
                                                {p: gold[p] for p in pids},
                                                sum(unreachable.get(p, 0) for p in pids))
        report.macro_f1 = float(np.mean([s.f1 for s in report.per_language.values()]))
    return report


def _fmt(x) -> str:
    return "   -  " if x is None else f"{x:6.4f}"


def format_report(report: EvalReport) -> str:
    lines = [f"{'lang':<8}{'P':>8}{'R':>8}{'F1':>8}{'MD-R':>8}{'ED-acc':>8}{'gold':>7}{'pred':>7}"]

    def row(name, s: LanguageScores):
        lines.append(f"{name:<8}{_fmt(s.precision):>8}{_fmt(s.recall):>8}{_fmt(s.f1):>8}{_fmt(s.md_recall):>8}"
                     f"{_fmt(s.ed_accuracy):>8}{s.num_gold:>7}{s.num_pred:>7}")

    for lang, s in sorted(report.per_language.items()):
        row(lang, s)
    row("all", report.overall)
    if report.macro_f1 is not None:
        lines.append(f"macro-average F1 over {len(report.per_language)} languages: {report.macro_f1:.4f}")
    return "\n".join(lines)
