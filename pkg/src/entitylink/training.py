"""Staged training with hand-derived gradients.

Stages, run in this order:

``ed_inbatch``
    mention and entity encoders plus mention pooling, softmax over the gold
    entities present in the batch.
``ed_hard``
    same parameters, negatives mined from an exact index over the current
    entity encodings.
``end_to_end``
    entity encoder frozen; MD head, mention encoder, pooling and rejection
    head trained on the sum of the MD, ED and rejection losses.

All maths runs in float64.  Parameters are rounded to float32 precision at
the end of a stage so that saved files reproduce them exactly.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import EntityRecord, Passage, TokenizedPassage, char_span_to_token_span, tokenize
from .encoder import context_means, encode_entities, entity_context_mean
from .index import EntityIndex
from .mention import INFERENCE_MAX_SPAN_LEN, TRAIN_MAX_SPAN_LEN, BoundaryScores, sigmoid, span_logits, \
    valid_span_arrays
from .model import LinkerModel, init_model
from .rejection import build_features, rejection_forward
from .synthetic import generate_synthetic_corpus

__all__ = [
    "STAGES",
    "LOSS_CLAMP",
    "TrainConfig",
    "EpochLosses",
    "TrainReport",
    "StageOrderError",
    "md_loss",
    "ed_loss",
    "r_loss",
    "PreparedPassage",
    "prepare_passage",
    "prepare_corpus",
    "EntityTable",
    "Candidate",
    "batch_loss_and_grads",
    "detect_training_candidates",
    "mine_hard_negatives",
    "train",
    "train_pipeline",
    "gradient_check",
    "generate_synthetic_corpus",
    "write_report_csv",
]

log = logging.getLogger(__name__)

STAGES = ("ed_inbatch", "ed_hard", "end_to_end")
LOSS_CLAMP = 1e-7
TRAIN_BETA = 0.5

ED_TRAINABLE = ("mention_w_mix", "entity_w_mix", "pool_weight", "pool_bias")
E2E_TRAINABLE = ("mention_w_mix", "w_start", "w_end", "w_inside", "pool_weight", "pool_bias",
                 "r_W1", "r_b1", "r_w2", "r_b2")


class StageOrderError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: str = "ed_inbatch"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 1
    hard_negatives_per_positive: int = 4
    seed: int = 0
    max_span_len: int = TRAIN_MAX_SPAN_LEN
    candidate_max_span_len: int = INFERENCE_MAX_SPAN_LEN
    from_scratch: bool = False
    optimizer: str = "adam"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {', '.join(STAGES)}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class EpochLosses:
    epoch: int
    md_loss: float
    ed_loss: float
    r_loss: float
    total: float


@dataclass
class TrainReport:
    stage: str
    epochs: list = field(default_factory=list)
    model: Optional[LinkerModel] = None

    @property
    def totals(self) -> list[float]:
        return [e.total for e in self.epochs]


# ---------------------------------------------------------------------------
# losses


def _bce_terms(p, y):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pc = np.clip(p, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    return -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))


def _bce_dlogit(p, y):
    """d BCE / d logit for ``p = sigmoid(logit)``.

    The clamp only guards the loss value; the gradient stays ``p - y`` so a
    saturated wrong prediction can still recover.
    """
    return p - y


def md_loss(span_probs, gold_labels) -> float:
    """Mean binary cross-entropy over valid spans; probabilities are clamped
    to ``[1e-7, 1 - 1e-7]``."""
    terms = _bce_terms(span_probs, gold_labels)
    return float(terms.mean()) if terms.size else 0.0


def r_loss(rejection_scores, labels) -> float:
    terms = _bce_terms(rejection_scores, labels)
    return float(terms.mean()) if terms.size else 0.0


def _logsumexp(z: np.ndarray) -> float:
    zmax = np.max(z)
    return float(zmax + np.log(np.sum(np.exp(z - zmax))))


def ed_loss(m: np.ndarray, positive: np.ndarray, negatives: np.ndarray) -> float:
    """Negative log-likelihood of the positive entity under a softmax over
    the positive and the negatives."""
    negatives = np.atleast_2d(negatives)
    if negatives.shape[0] < 1:
        raise ValueError("ed_loss needs at least one negative")
    z = np.concatenate([[positive @ m], negatives @ m])
    return _logsumexp(z) - float(z[0])


# ---------------------------------------------------------------------------
# prepared data


@dataclass
class PreparedPassage:
    passage: TokenizedPassage
    A: np.ndarray  # context means, (n, d)
    I: np.ndarray  # valid span starts
    J: np.ndarray  # valid span ends
    y: np.ndarray  # 1.0 where the valid span is gold
    gold: list  # (i, j, entity_id)
    unreachable: int = 0


def prepare_passage(p: Passage, config, max_span_len: int = TRAIN_MAX_SPAN_LEN) -> PreparedPassage:
    tp = tokenize(p.text, p.id, p.language)
    A = context_means(tp.tokens, config)
    I, J = valid_span_arrays(tp, max_span_len)
    valid = {(int(i), int(j)): k for k, (i, j) in enumerate(zip(I, J))}
    y = np.zeros(len(I))
    gold, unreachable = [], 0
    for gm in p.mentions:
        span = char_span_to_token_span(tp, gm.start, gm.end)
        if span is None or span not in valid:
            unreachable += 1
            continue
        y[valid[span]] = 1.0
        gold.append((span[0], span[1], gm.entity_id))
    return PreparedPassage(tp, A, I, J, y, gold, unreachable)


def prepare_corpus(corpus: Sequence[Passage], config, max_span_len: int = TRAIN_MAX_SPAN_LEN) -> list[PreparedPassage]:
    return [prepare_passage(p, config, max_span_len) for p in corpus]


class EntityTable:
    """Catalog rows with cached context means for the entity encoder."""

    def __init__(self, catalog: Sequence[EntityRecord], config):
        self.records = list(catalog)
        self.ids = [r.entity_id for r in self.records]
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate entity ids in catalog")
        self.pos = {eid: k for k, eid in enumerate(self.ids)}
        self.means = np.stack([entity_context_mean(r, config) for r in self.records])

    def __len__(self) -> int:
        return len(self.ids)

    def encodings(self, model: LinkerModel) -> np.ndarray:
        return encode_entities(self.records, model.entity_encoder, self.means)

    def index(self, model: LinkerModel) -> EntityIndex:
        return EntityIndex.exact(self.ids, self.encodings(model))


@dataclass(frozen=True)
class Candidate:
    """A detected span with its retrieved top entity, used to train the
    rejection head."""

    i: int
    j: int
    entity_pos: int
    label: float


# ---------------------------------------------------------------------------
# parameter dictionaries


def model_params(model: LinkerModel) -> dict:
    params = {k: v.copy() for k, v in model.arrays().items()}
    params["r_b2"] = np.array([model.rejection.b2])
    return params


def _unpack(params: dict):
    return (params["mention_w_mix"], params["entity_w_mix"], params["w_start"], params["w_end"],
            params["w_inside"], params["pool_weight"], params["pool_bias"], params["r_W1"], params["r_b1"],
            params["r_w2"], float(params["r_b2"][0]))


def _zeros_like(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _span_means(P: np.ndarray, I: np.ndarray, J: np.ndarray) -> np.ndarray:
    csum = np.vstack([np.zeros((1, P.shape[1])), np.cumsum(P, axis=0)])
    return (csum[J + 1] - csum[I]) / (J - I + 1)[:, None]


def _scatter_span_means(dQ: np.ndarray, I: np.ndarray, J: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of :func:`_span_means`."""
    g = dQ / (J - I + 1)[:, None]
    diff = np.zeros((n + 1, dQ.shape[1]))
    np.add.at(diff, I, g)
    np.add.at(diff, J + 1, -g)
    return np.cumsum(diff, axis=0)[:n]


def _normalize_backward(E: np.ndarray, norms: np.ndarray, dE: np.ndarray) -> np.ndarray:
    return (dE - E * np.sum(E * dE, axis=1, keepdims=True)) / norms


# ---------------------------------------------------------------------------
# forward / backward


def batch_loss_and_grads(
    params: dict,
    batch: Sequence[PreparedPassage],
    entity_means: np.ndarray,
    entity_pos: dict,
    parts: Sequence[str] = ("md", "ed", "r"),
    ed_negatives: Optional[Sequence[Sequence[Sequence[int]]]] = None,
    candidates: Optional[Sequence[Sequence[Candidate]]] = None,
    gold_filter: Optional[Sequence[Sequence[int]]] = None,
) -> dict:
    """Losses of one batch and their gradients, per loss part.

    ``ed_negatives[b][g]`` lists negative entity positions for gold ``g`` of
    passage ``b``; when omitted, the other gold entities of the batch are the
    negatives (in-batch).  ``candidates[b]`` holds the rejection-head inputs
    for passage ``b``.  ``gold_filter[b]`` restricts which golds count for ED.

    Returns ``{part: (loss, grads)}`` where each loss is the mean over its
    items in the batch (spans, gold mentions, candidates).
    """
    Wm, We, ws, we, wi, Wp, bp, W1, b1, w2, b2 = _unpack(params)
    d = Wm.shape[0]
    out = {}
    Ps = [pp.A @ Wm.T for pp in batch]
    dPs = {part: [np.zeros_like(P) for P in Ps] for part in parts}
    grads = {part: _zeros_like(params) for part in parts}

    # entity encodings for every row any part touches
    if ed_negatives is None and "ed" in parts:
        inbatch = sorted({entity_pos[e] for pp in batch for (_, _, e) in pp.gold})
    else:
        inbatch = []
    rows = set(inbatch)
    for b, pp in enumerate(batch):
        rows.update(entity_pos[e] for (_, _, e) in pp.gold)
        if ed_negatives is not None:
            for negs in ed_negatives[b]:
                rows.update(negs)
        if candidates is not None:
            rows.update(c.entity_pos for c in candidates[b])
    rows = np.array(sorted(rows), dtype=np.int64)
    local = {int(r): k for k, r in enumerate(rows)}
    Ab = entity_means[rows] if len(rows) else np.zeros((0, d))
    U = Ab @ We.T
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    E = U / norms if len(rows) else U
    dE = {part: np.zeros_like(E) for part in parts}

    if "md" in parts:
        total, count = 0.0, 0
        g_ws, g_we, g_wi = grads["md"]["w_start"], grads["md"]["w_end"], grads["md"]["w_inside"]
        for b, pp in enumerate(batch):
            if len(pp.I) == 0:
                continue
            P = Ps[b]
            n = P.shape[0]
            sc = BoundaryScores(P @ ws, P @ we, P @ wi)
            p = np.atleast_1d(sigmoid(span_logits(sc, pp.I, pp.J)))
            total += float(_bce_terms(p, pp.y).sum())
            count += len(pp.I)
            g = _bce_dlogit(p, pp.y)
            ds = np.bincount(pp.I, g, minlength=n)
            de = np.bincount(pp.J, g, minlength=n)
            diff = np.zeros(n + 1)
            inner = pp.J > pp.I + 1
            np.add.at(diff, pp.I[inner] + 1, g[inner])
            np.add.at(diff, pp.J[inner], -g[inner])
            di = np.cumsum(diff)[:n]
            g_ws += P.T @ ds
            g_we += P.T @ de
            g_wi += P.T @ di
            dPs["md"][b] += np.outer(ds, ws) + np.outer(de, we) + np.outer(di, wi)
        out["md"] = (total, count)

    if "ed" in parts:
        total, count = 0.0, 0
        g = grads["ed"]
        inb_local = np.array([local[r] for r in inbatch], dtype=np.int64)
        for b, pp in enumerate(batch):
            if not pp.gold:
                continue
            keep = range(len(pp.gold)) if gold_filter is None else gold_filter[b]
            if not keep:
                continue
            gi = np.array([pp.gold[k][0] for k in keep])
            gj = np.array([pp.gold[k][1] for k in keep])
            Q = _span_means(Ps[b], gi, gj)
            M = Q @ Wp.T + bp
            dM = np.zeros_like(M)
            for r, k in enumerate(keep):
                pos = local[entity_pos[pp.gold[k][2]]]
                if ed_negatives is None:
                    cols = np.concatenate([[pos], inb_local[inb_local != pos]])
                else:
                    cols = np.array([pos] + [local[x] for x in ed_negatives[b][k]], dtype=np.int64)
                if len(cols) < 2:
                    continue
                z = E[cols] @ M[r]
                lse = _logsumexp(z)
                total += lse - float(z[0])
                count += 1
                dz = np.exp(z - lse)
                dz[0] -= 1.0
                dM[r] += E[cols].T @ dz
                np.add.at(dE["ed"], cols, np.outer(dz, M[r]))
            g["pool_weight"] += dM.T @ Q
            g["pool_bias"] += dM.sum(axis=0)
            dPs["ed"][b] += _scatter_span_means(dM @ Wp, gi, gj, Ps[b].shape[0])
        out["ed"] = (total, count)

    if "r" in parts:
        total, count = 0.0, 0
        g = grads["r"]
        for b, pp in enumerate(batch):
            cands = candidates[b] if candidates is not None else []
            if not cands:
                continue
            P = Ps[b]
            n = P.shape[0]
            ci = np.array([c.i for c in cands])
            cj = np.array([c.j for c in cands])
            cpos = np.array([local[c.entity_pos] for c in cands])
            y = np.array([c.label for c in cands])
            sc = BoundaryScores(P @ ws, P @ we, P @ wi)
            mdp = np.atleast_1d(sigmoid(span_logits(sc, ci, cj)))
            Q = _span_means(P, ci, cj)
            M = Q @ Wp.T + bp
            Ec = E[cpos]
            s = np.sum(M * Ec, axis=1)
            F = build_features(mdp, s, M, Ec)
            z1 = F @ W1.T + b1
            h = np.maximum(z1, 0.0)
            o = h @ w2 + b2
            r = np.atleast_1d(sigmoid(o))
            total += float(_bce_terms(r, y).sum())
            count += len(cands)
            do = _bce_dlogit(r, y)
            g["r_w2"] += h.T @ do
            g["r_b2"] += do.sum()
            dz1 = np.outer(do, w2) * (z1 > 0)
            g["r_W1"] += dz1.T @ F
            g["r_b1"] += dz1.sum(axis=0)
            dF = dz1 @ W1
            dp, ds = dF[:, 0], dF[:, 1]
            dm1, de1 = dF[:, 2 : 2 + d], dF[:, 2 + d : 2 + 2 * d]
            ddiff, dhad = dF[:, 2 + 2 * d : 2 + 3 * d], dF[:, 2 + 3 * d :]
            dM = dm1 + ddiff + dhad * Ec + ds[:, None] * Ec
            dEc = de1 - ddiff + dhad * M + ds[:, None] * M
            np.add.at(dE["r"], cpos, dEc)
            g["pool_weight"] += dM.T @ Q
            g["pool_bias"] += dM.sum(axis=0)
            dP = _scatter_span_means(dM @ Wp, ci, cj, n)
            # MD probability feature
            dl = dp * mdp * (1.0 - mdp)
            dss = np.bincount(ci, dl, minlength=n)
            dse = np.bincount(cj, dl, minlength=n)
            diff = np.zeros(n + 1)
            inner = cj > ci + 1
            np.add.at(diff, ci[inner] + 1, dl[inner])
            np.add.at(diff, cj[inner], -dl[inner])
            dsi = np.cumsum(diff)[:n]
            g["w_start"] += P.T @ dss
            g["w_end"] += P.T @ dse
            g["w_inside"] += P.T @ dsi
            dP += np.outer(dss, ws) + np.outer(dse, we) + np.outer(dsi, wi)
            dPs["r"][b] += dP
        out["r"] = (total, count)

    result = {}
    for part in parts:
        total, count = out[part]
        g = grads[part]
        for b, pp in enumerate(batch):
            g["mention_w_mix"] += dPs[part][b].T @ pp.A
        if len(rows):
            dU = _normalize_backward(E, norms, dE[part])
            g["entity_w_mix"] += dU.T @ Ab
        if count:
            for k in g:
                g[k] /= count
            result[part] = (total / count, g)
        else:
            result[part] = (0.0, g)
    return result


# ---------------------------------------------------------------------------
# candidate construction and mining


def _mention_vectors(model: LinkerModel, pp: PreparedPassage, spans) -> np.ndarray:
    P = pp.A @ model.mention_encoder.w_mix.T
    I = np.array([s[0] for s in spans], dtype=np.int64)
    J = np.array([s[1] for s in spans], dtype=np.int64)
    return _span_means(P, I, J) @ model.ed.pool_weight.T + model.ed.pool_bias


def detect_training_candidates(model: LinkerModel, pp: PreparedPassage, entity_vectors: np.ndarray,
                               entity_pos: dict, beta: float = TRAIN_BETA,
                               max_len: int = INFERENCE_MAX_SPAN_LEN) -> list[Candidate]:
    """Spans above ``beta`` paired with their top-1 entity; label 1 iff the
    pair equals a gold pair."""
    if len(pp.passage) == 0:
        return []
    P = pp.A @ model.mention_encoder.w_mix.T
    md = model.md
    I, J = valid_span_arrays(pp.passage, max_len)
    p = np.atleast_1d(sigmoid(span_logits(BoundaryScores(P @ md.w_start, P @ md.w_end, P @ md.w_inside), I, J)))
    keep = np.flatnonzero(p > beta)
    if keep.size == 0:
        return []
    I, J = I[keep], J[keep]
    M = _span_means(P, I, J) @ model.ed.pool_weight.T + model.ed.pool_bias
    S = M @ entity_vectors.T
    best = np.argmax(S, axis=1)  # ties resolve to the lowest row; rows follow catalog order
    gold = {(i, j): entity_pos[e] for (i, j, e) in pp.gold}
    return [Candidate(int(i), int(j), int(e), float(gold.get((int(i), int(j))) == e))
            for i, j, e in zip(I, J, best)]


def mine_hard_negatives(model: LinkerModel, index: EntityIndex, corpus: Sequence[PreparedPassage],
                        per_positive: int) -> list[list[list[str]]]:
    """For every gold mention, the top-``per_positive`` retrieved entities
    other than the gold one."""
    out = []
    k = min(per_positive + 1, len(index))
    for pp in corpus:
        if not pp.gold:
            out.append([])
            continue
        M = _mention_vectors(model, pp, [(i, j) for (i, j, _) in pp.gold])
        hits = index.search_batch(M, k)
        out.append([[eid for eid, _ in h if eid != gold_id][:per_positive]
                    for h, (_, _, gold_id) in zip(hits, pp.gold)])
    return out


# ---------------------------------------------------------------------------
# training loop


class _Optimizer:
    """Plain SGD or Adam over named model tensors; ``r_b2`` is the scalar
    rejection bias."""

    def __init__(self, kind: str, lr: float, names: Sequence[str], beta1=0.9, beta2=0.999, eps=1e-8):
        self.kind, self.lr, self.names = kind, lr, tuple(names)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def _step(self, name: str, g: np.ndarray) -> np.ndarray:
        if self.kind == "sgd":
            return self.lr * g
        if name not in self.m:
            self.m[name] = np.zeros_like(g)
            self.v[name] = np.zeros_like(g)
        self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
        self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
        mhat = self.m[name] / (1 - self.b1**self.t)
        vhat = self.v[name] / (1 - self.b2**self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def apply(self, model: LinkerModel, grads: dict) -> None:
        self.t += 1
        arrays = model.arrays()
        for name in self.names:
            delta = self._step(name, np.asarray(grads[name], dtype=np.float64))
            if name == "r_b2":
                model.rejection.b2 -= float(delta[0])
            else:
                arrays[name] -= delta


def _sum_grads(parts: dict) -> dict:
    total = None
    for _, g in parts.values():
        if total is None:
            total = {k: v.copy() for k, v in g.items()}
        else:
            for k in total:
                total[k] += g[k]
    return total


def train(config: TrainConfig, corpus: Sequence[Passage], catalog: Sequence[EntityRecord],
          model: Optional[LinkerModel] = None, prepared: Optional[list] = None,
          table: Optional[EntityTable] = None) -> TrainReport:
    """Run one stage; returns per-epoch losses and the updated model (a copy)."""
    if model is None:
        if config.stage == "end_to_end" and not config.from_scratch:
            raise StageOrderError(
                "end_to_end needs an entity encoder from a prior ED stage (ed_inbatch -> ed_hard -> end_to_end); "
                "pass a trained model or set from_scratch")
        model = init_model(seed=config.seed)
    elif config.stage == "end_to_end" and not config.from_scratch and \
            not any(s in model.stages for s in ("ed_inbatch", "ed_hard")):
        raise StageOrderError(
            "end_to_end needs an entity encoder from a prior ED stage (ed_inbatch -> ed_hard -> end_to_end)")
    if config.stage == "ed_inbatch" and config.batch_size < 2:
        raise ValueError("ed_inbatch needs batch_size >= 2 for in-batch negatives")
    model = model.copy()
    report = TrainReport(config.stage, [], model)
    if config.epochs == 0:
        return report

    if prepared is None:
        prepared = prepare_corpus(corpus, model.mention_encoder.config, config.max_span_len)
    if table is None:
        table = EntityTable(catalog, model.entity_encoder.config)
    rng = np.random.default_rng(config.seed)
    frozen_before = model.entity_encoder.w_mix.copy()
    names = E2E_TRAINABLE if config.stage == "end_to_end" else ED_TRAINABLE
    opt = _Optimizer(config.optimizer, config.learning_rate, names)

    for epoch in range(config.epochs):
        order = rng.permutation(len(prepared))
        if config.stage == "end_to_end":
            losses = _e2e_epoch(model, prepared, table, order, config, opt)
        else:
            losses = _ed_epoch(model, prepared, table, order, config, opt)
        md, ed, r = losses
        report.epochs.append(EpochLosses(epoch, md, ed, r, md + ed + r))
        log.info("%s epoch %d: md=%.4f ed=%.4f r=%.4f", config.stage, epoch, md, ed, r)

    if config.stage == "end_to_end":
        assert np.array_equal(frozen_before, model.entity_encoder.w_mix)
    model.round_to_float32()
    if config.stage not in model.stages:
        model.stages.append(config.stage)
    return report


def _batches(order: np.ndarray, size: int):
    for s in range(0, len(order), size):
        yield order[s : s + size]


def _ed_epoch(model, prepared, table, order, config, opt):
    """ED-only epoch; batches are ``batch_size`` gold mentions."""
    mentions = [(b, g) for b in order for g in range(len(prepared[b].gold))]
    hard = None
    if config.stage == "ed_hard":
        index = table.index(model)
        mined = mine_hard_negatives(model, index, prepared, config.hard_negatives_per_positive)
        hard = [[[table.pos[e] for e in negs] for negs in per_passage] for per_passage in mined]
    sums, n_batches = 0.0, 0
    for s in range(0, len(mentions), config.batch_size):
        chunk = mentions[s : s + config.batch_size]
        by_passage: dict = {}
        for b, g in chunk:
            by_passage.setdefault(int(b), []).append(g)
        keys = list(by_passage)
        batch = [prepared[b] for b in keys]
        negs = None
        if hard is not None:
            negs = [hard[b] for b in keys]
        res = batch_loss_and_grads(model_params(model), batch, table.means, table.pos, ("ed",),
                                   ed_negatives=negs, gold_filter=[by_passage[b] for b in keys])
        loss, grads = res["ed"]
        opt.apply(model, grads)
        sums += loss
        n_batches += 1
    return 0.0, sums / max(n_batches, 1), 0.0


def _e2e_epoch(model, prepared, table, order, config, opt):
    E_all = table.encodings(model)  # entity encoder is frozen for the whole stage
    index = EntityIndex.exact(table.ids, E_all)
    sums = np.zeros(3)
    n_batches = 0
    for idx in _batches(order, config.batch_size):
        batch = [prepared[b] for b in idx]
        mined = mine_hard_negatives(model, index, batch, config.hard_negatives_per_positive)
        negs = [[[table.pos[e] for e in n] for n in per] for per in mined]
        cands = [detect_training_candidates(model, pp, E_all, table.pos, TRAIN_BETA,
                                            config.candidate_max_span_len) for pp in batch]
        res = batch_loss_and_grads(model_params(model), batch, table.means, table.pos, ("md", "ed", "r"),
                                   ed_negatives=negs, candidates=cands)
        opt.apply(model, _sum_grads(res))
        sums += [res["md"][0], res["ed"][0], res["r"][0]]
        n_batches += 1
    return tuple(float(x) for x in sums / max(n_batches, 1))


def train_pipeline(configs: Sequence[TrainConfig], corpus, catalog, model: Optional[LinkerModel] = None):
    """Run several stages in order, sharing prepared data; returns the reports."""
    reports = []
    prepared = table = None
    for cfg in configs:
        if model is None:
            model = init_model(seed=cfg.seed)
        if prepared is None:
            prepared = prepare_corpus(corpus, model.mention_encoder.config, cfg.max_span_len)
            table = EntityTable(catalog, model.entity_encoder.config)
        rep = train(cfg, corpus, catalog, model, prepared, table)
        reports.append(rep)
        model = rep.model
    return reports


def write_report_csv(report: TrainReport, path: os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "md_loss", "ed_loss", "r_loss", "total"])
        for e in report.epochs:
            w.writerow([e.epoch, repr(e.md_loss), repr(e.ed_loss), repr(e.r_loss), repr(e.total)])


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(loss_fn: Callable[[dict], tuple], params: dict, eps: float = 1e-6,
                   num_coords: int = 100, rng=None, names: Optional[Sequence[str]] = None) -> float:
    """Largest relative error between ``loss_fn``'s analytic gradient and
    central differences over a random sample of coordinates.

    ``loss_fn(params) -> (loss, grads)`` with ``grads`` keyed like ``params``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(rng)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    names = list(names or params)
    _, analytic = loss_fn(params)
    coords = [(name, flat) for name in names for flat in range(params[name].size)]
    if len(coords) > num_coords:
        picks = rng.choice(len(coords), size=num_coords, replace=False)
        coords = [coords[k] for k in sorted(picks)]
    worst = 0.0
    for name, flat in coords:
        arr = params[name].reshape(-1)
        orig = arr[flat]
        arr[flat] = orig + eps
        up, _ = loss_fn(params)
        arr[flat] = orig - eps
        down, _ = loss_fn(params)
        arr[flat] = orig
        g_fd = (up - down) / (2 * eps)
        g_a = float(analytic[name].reshape(-1)[flat])
        worst = max(worst, abs(g_a - g_fd) / max(1e-8, abs(g_a) + abs(g_fd)))
    return worst
