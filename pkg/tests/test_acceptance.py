"""Acceptance suite: one PASS/FAIL line per criterion, printed past pytest's capture."""

import math
import time
from fractions import Fraction

import numpy as np
import pytest
from grad_setup import gradient_setup

from entitylink import encoder as encoder_module
from entitylink.data import GoldMention, Passage, tokenize
from entitylink.disambiguation import ed_score
from entitylink.encoder import EncoderConfig, ParamsFormatError
from entitylink.evaluation import e2e_prf, ed_accuracy, md_recall
from entitylink.index import EntityIndex, HNSWParams, IndexFormatError
from entitylink.mention import MDParams, boundary_scores, detect_mentions, span_probability
from entitylink.model import init_model, load_model, model_to_bytes, params_digest, save_model
from entitylink.pipeline import (
    LinkedMention,
    LinkerConfig,
    LinkStats,
    link_corpus,
    link_passage,
    score_candidates,
    split_windows,
    sweep_gamma,
)
from entitylink.rejection import RParams, build_features, rejection_score
from entitylink.synthetic import generate_synthetic_corpus, split_corpus
from entitylink.training import (
    EntityTable,
    TrainConfig,
    batch_loss_and_grads,
    ed_loss,
    gradient_check,
    md_loss,
    r_loss,
    train_pipeline,
)


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail=""):
        with capsys.disabled():
            print(f"\nCRITERION {number:>2} {'PASS' if ok else 'FAIL'}  {name}  {detail}")
        assert ok, f"criterion {number} failed: {detail}"

    return emit


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


# ---------------------------------------------------------------------------
# 1. formula fidelity

def _direct_sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))


def _direct_bce(ps, ys):
    total = 0.0
    for p, y in zip(ps, ys):
        p = min(max(p, 1e-7), 1 - 1e-7)
        total += -(y * math.log(p) + (1 - y) * math.log(1 - p))
    return total / len(ps)


def test_criterion_1_formula_fidelity(report):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = {}
    for _ in range(1000):
        d = int(rng.integers(2, 9))
        n = int(rng.integers(2, 12))
        reps = rng.standard_normal((n, d))
        md = MDParams(*rng.standard_normal((3, d)))
        i = int(rng.integers(n))
        j = int(rng.integers(i, n))
        dot = lambda w, t: sum(float(w[c]) * float(reps[t, c]) for c in range(d))  # noqa: E731
        z = dot(md.w_start, i) + dot(md.w_end, j) + sum(dot(md.w_inside, t) for t in range(i + 1, j))
        got = span_probability(boundary_scores(reps, md), i, j).prob
        worst["span_probability"] = max(worst.get("span_probability", 0), rel_err(got, _direct_sigmoid(z)))

        m, e = rng.standard_normal(d), rng.standard_normal(d)
        worst["ed_score"] = max(worst.get("ed_score", 0),
                                rel_err(ed_score(m, e), sum(float(a) * float(b) for a, b in zip(m, e))))

        h = int(rng.integers(1, 6))
        width = 2 + 4 * d
        rp = RParams(rng.standard_normal((h, width)), rng.standard_normal(h), rng.standard_normal(h),
                     float(rng.standard_normal()))
        p, s = float(rng.random()), float(rng.standard_normal())
        f = [p, s] + list(m) + list(e) + [a - b for a, b in zip(m, e)] + [a * b for a, b in zip(m, e)]
        hid = [max(0.0, sum(rp.W1[r, c] * f[c] for c in range(width)) + rp.b1[r]) for r in range(h)]
        want = _direct_sigmoid(sum(rp.w2[r] * hid[r] for r in range(h)) + rp.b2)
        worst["rejection_score"] = max(worst.get("rejection_score", 0),
                                       rel_err(float(rejection_score(build_features(p, s, m, e), rp)), want))

        k = int(rng.integers(1, 8))
        ps, ys = rng.random(k), rng.integers(0, 2, k)
        worst["md_loss"] = max(worst.get("md_loss", 0), rel_err(md_loss(ps, ys), _direct_bce(ps, ys)))
        worst["r_loss"] = max(worst.get("r_loss", 0), rel_err(r_loss(ps, ys), _direct_bce(ps, ys)))

        pos, negs = rng.standard_normal(d), rng.standard_normal((int(rng.integers(1, 6)), d))
        logits = [sum(float(a) * float(b) for a, b in zip(pos, m))]
        logits += [sum(float(a) * float(b) for a, b in zip(row, m)) for row in negs]
        want = -logits[0] + math.log(sum(math.exp(z) for z in logits))
        worst["ed_loss"] = max(worst.get("ed_loss", 0), rel_err(ed_loss(m, pos, negs), want))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-9 and elapsed < 10
    report(1, "formula fidelity", ok, f"max rel err {max(worst.values()):.2e} over 6 formulas x 1000, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. gradient checks

def test_criterion_2_gradient_checks(report):
    t0 = time.perf_counter()
    errs = {}
    for part in ("md", "ed", "r"):
        for hard in (False, True):
            params, preps, table, cands, negs = gradient_setup(21 + len(errs))
            fn = lambda p: batch_loss_and_grads(p, preps, table.means, table.pos, (part,),  # noqa: E731
                                                ed_negatives=negs if hard else None, candidates=cands)[part]
            # every coordinate of every trainable tensor
            n_coords = sum(v.size for v in params.values())
            errs[(part, hard)] = gradient_check(fn, params, eps=1e-6, num_coords=n_coords, rng=0)
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst <= 1e-4 and elapsed < 60
    report(2, "gradient checks", ok, f"max rel err {worst:.2e} (md/ed/r, in-batch and hard), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. kNN oracle equivalence

@pytest.mark.slow
def test_criterion_3_knn_oracle(report):
    rng = np.random.default_rng(3)
    N, d, nq = 10_000, 64, 1000
    X = rng.standard_normal((N, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    Q = rng.standard_normal((nq, d))
    Q /= np.linalg.norm(Q, axis=1, keepdims=True)
    ids = [f"E{k:05d}" for k in range(N)]
    t0 = time.perf_counter()
    exact = EntityIndex.exact(ids, X)
    approx = EntityIndex.hnsw(ids, X, HNSWParams(M=16, ef_construction=100, ef_search=128, seed=0))
    ex = exact.search_batch(Q, 10)
    ap = approx.search_batch(Q, 10)
    elapsed = time.perf_counter() - t0

    S = Q @ X.T
    naive_equal = all([ids[c] for c in np.lexsort((np.arange(N), -S[q]))[:10]] == [e for e, _ in ex[q]]
                      for q in range(nq))
    r1 = np.mean([ap[q][0][0] == ex[q][0][0] for q in range(nq)])
    r10 = np.mean([len({e for e, _ in ap[q]} & {e for e, _ in ex[q]}) / 10 for q in range(nq)])
    ok = naive_equal and r1 >= 0.95 and r10 >= 0.9 and elapsed < 120
    report(3, "kNN oracle equivalence", ok,
           f"exact==naive {naive_equal}, recall@1 {r1:.3f}, recall@10 {r10:.3f}, build+query {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. monotonicity suites

WORDS = "the river Brandt flows past old Kestrel towers near Umbra and lake Voss".split()


def _text(r, n):
    return " ".join(WORDS[k] for k in r.integers(len(WORDS), size=n))


def _random_linker(seed, dim=8, n_entities=12):
    r = np.random.default_rng(seed)
    model = init_model(EncoderConfig(dim=dim, context_window=int(r.integers(0, 3))), hidden=8, seed=seed,
                       md_scale=3.0)
    for v in model.arrays().values():
        v += r.standard_normal(v.shape) * 0.3
    model.rejection.W1 *= 3
    X = r.standard_normal((n_entities, dim))
    index = EntityIndex.exact([f"E{k}" for k in range(n_entities)], X / np.linalg.norm(X, axis=1, keepdims=True))
    return model, index


def _random_corpus(r, n_passages, n_entities=12):
    out = []
    for k in range(n_passages):
        tp = tokenize(text := _text(r, int(r.integers(5, 25))))
        picks = sorted(set(r.integers(len(tp), size=3).tolist()))
        ms = tuple(GoldMention(*tp.token_char_spans[t], f"E{int(r.integers(n_entities))}") for t in picks)
        out.append(Passage(f"p{k}", text, ms, "en"))
    return out


def test_criterion_4_monotonicity(report):
    rng = np.random.default_rng(4)
    violations = {"beta": 0, "gamma": 0, "recall": 0}
    for trial in range(100):
        tp = tokenize(_text(rng, int(rng.integers(1, 30))))
        d = int(rng.integers(2, 8))
        reps = rng.standard_normal((len(tp), d))
        params = MDParams(*rng.standard_normal((3, d)))
        b1, b2 = sorted(rng.random(2) * 0.99)
        lo = {(s.i, s.j) for s in detect_mentions(reps, tp, params, b1)}
        hi = {(s.i, s.j) for s in detect_mentions(reps, tp, params, b2)}
        violations["beta"] += not hi <= lo

        model, index = _random_linker(trial)
        text = _text(rng, int(rng.integers(1, 40)))
        beta = float(rng.random() * 0.6)
        g1, g2 = sorted(rng.random(2))
        lo = set(link_passage(text, model, index, LinkerConfig(beta=beta, gamma=g1)))
        hi = set(link_passage(text, model, index, LinkerConfig(beta=beta, gamma=g2)))
        violations["gamma"] += not hi <= lo

        dev = _random_corpus(rng, 4)
        grid = sorted(set(np.round(rng.random(8), 3).tolist()))
        res = sweep_gamma(dev, model, index, grid, LinkerConfig(beta=beta))
        recalls = [p.recall for p in res.points]
        violations["recall"] += any(b > a for a, b in zip(recalls, recalls[1:]))
    ok = sum(violations.values()) == 0
    report(4, "monotonicity suites", ok, f"violations over 100 trials each: {violations}")


# ---------------------------------------------------------------------------
# 5. windowing equivalence

def test_criterion_5_windowing(report):
    rng = np.random.default_rng(5)
    cfg = LinkerConfig(beta=0.2, gamma=0.1)
    mismatches = 0
    for trial in range(100):
        model, index = _random_linker(1000 + trial % 10)
        tp = tokenize(_text(rng, int(rng.integers(1, cfg.max_seq_len))))
        text = tp.text[: tp.token_char_spans[min(len(tp), cfg.max_seq_len - 1) - 1][1]]
        assert len(tokenize(text)) < cfg.max_seq_len
        mismatches += set(link_passage(text, model, index, cfg, windowed=True)) != \
            set(link_passage(text, model, index, cfg, windowed=False))

    coverage_bad = 0
    for L, overlap in ((cfg.max_seq_len, cfg.window_overlap), (16, 5), (7, 6), (2, 1)):
        for n in range(1, 4 * L + 1):
            wins = split_windows(n, L, overlap)
            covered = np.zeros(n, dtype=int)
            for s, e in wins:
                coverage_bad += not (0 <= s < e <= n and e - s <= L)
                covered[s:e] += 1
            coverage_bad += not covered.all()
    ok = mismatches == 0 and coverage_bad == 0
    report(5, "windowing equivalence", ok,
           f"{mismatches} mismatches in 100 passages, {coverage_bad} coverage violations up to 4*L_max")


# ---------------------------------------------------------------------------
# 6. metric oracle

def _pred(s, e, eid):
    return LinkedMention(-1, -1, s, e, eid, 0.5, 0.0, 0.9)


def _hand_counts(pred, gold):
    correct = n_pred = n_gold = span_hits = 0
    for pid in set(pred) | set(gold):
        pool = list(gold.get(pid, []))
        spans = [(s, e) for s, e, _ in pool]
        n_gold += len(pool)
        for t in pred.get(pid, []):
            n_pred += 1
            if t in pool:
                pool.remove(t)
                correct += 1
            if t[:2] in spans:
                spans.remove(t[:2])
                span_hits += 1
    return correct, n_pred, n_gold, span_hits


def test_criterion_6_metric_oracle(report):
    rng = np.random.default_rng(6)
    configs = [({"p": [(0, 3, "A"), (4, 8, "B"), (9, 12, "X")]},
                {"p": [(0, 3, "A"), (4, 8, "B"), (13, 15, "C"), (16, 20, "D")]})]
    while len(configs) < 50:
        pred, gold = {}, {}
        for pid in ("a", "b", "c")[: int(rng.integers(1, 4))]:
            gold[pid] = [(int(s), int(s) + int(rng.integers(1, 3)), "ABC"[int(rng.integers(3))])
                         for s in rng.integers(0, 6, int(rng.integers(0, 5)))]
            pred[pid] = []
            for s, e, ent in gold[pid]:
                roll = rng.random()
                if roll < 0.4:
                    pred[pid].append((s, e, ent))  # exact hit
                elif roll < 0.6:
                    pred[pid].append((s, e, "Z"))  # right span, wrong entity
                elif roll < 0.7:
                    pred[pid].append((s, e + 1, ent))  # boundary off by one
            pred[pid] += [(int(s), int(s) + 1, "A") for s in rng.integers(10, 14, int(rng.integers(0, 3)))]
        configs.append((pred, gold))

    bad = []
    for k, (pred_raw, gold_raw) in enumerate(configs):
        pred = {pid: [_pred(*t) for t in v] for pid, v in pred_raw.items()}
        gold = {pid: [GoldMention(*t) for t in v] for pid, v in gold_raw.items()}
        c, n_p, n_g, hits = _hand_counts(pred_raw, gold_raw)
        P = Fraction(c, n_p) if n_p else None
        R = Fraction(c, n_g) if n_g else None
        F = 2 * P * R / (P + R) if P and R else Fraction(0)
        prf = e2e_prf(pred, gold)
        same = (prf.precision == (None if P is None else float(P)) and prf.recall == (None if R is None else float(R))
                and prf.f1 == float(F))
        mr = md_recall(pred, gold)
        if mr is not None:
            same = same and mr == hits / n_g and mr >= prf.recall
        if not same:
            bad.append(k)
    example = e2e_prf({"p": [_pred(*t) for t in configs[0][0]["p"]]}, {"p": [GoldMention(*t) for t in configs[0][1]["p"]]})
    ok = not bad and example.f1 == 4 / 7
    report(6, "metric oracle", ok, f"{50 - len(bad)}/50 configurations exact, worked example F1 = {example.f1!r}")


# ---------------------------------------------------------------------------
# 7, 8, 10. desk-scale staged training on the synthetic corpus

RECIPE_DIM = 128
RECIPE_CONTEXT = 2
RECIPE_BETA = 0.1
GAMMA_GRID = [k / 20 for k in range(21)]


@pytest.fixture(scope="module")
def desk_run():
    t0 = time.perf_counter()
    catalog, corpus = generate_synthetic_corpus(200, 2000, seed=7)
    train_c, dev_c, test_c = split_corpus(corpus, 7)
    model = init_model(EncoderConfig(dim=RECIPE_DIM, context_window=RECIPE_CONTEXT), seed=7)
    cfgs = [TrainConfig("ed_inbatch", 3e-2, 32, 3, seed=7), TrainConfig("ed_hard", 3e-2, 32, 7, seed=7),
            TrainConfig("end_to_end", 1e-2, 32, 20, seed=7)]
    reports = train_pipeline(cfgs, train_c, catalog, model)
    trained = reports[-1].model
    index = EntityTable(catalog, trained.entity_encoder.config).index(trained)
    cfg = LinkerConfig(beta=RECIPE_BETA)
    sweep = sweep_gamma(dev_c, trained, index, GAMMA_GRID, cfg)
    stats = LinkStats()
    t_link = time.perf_counter()
    candidates = link_corpus(test_c, trained, index, cfg, gate=False, stats=stats)
    link_seconds = time.perf_counter() - t_link
    return dict(catalog=catalog, dev=dev_c, test=test_c, reports=reports, model=trained, index=index, sweep=sweep,
                candidates=candidates, stats=stats, link_seconds=link_seconds, start=t0)


@pytest.mark.slow
def test_criterion_7_desk_scale_learning(report, desk_run):
    r = desk_run
    test_c, model, index = r["test"], r["model"], r["index"]
    gold = {p.id: p.mentions for p in test_c}
    gamma = r["sweep"].best_gamma
    preds = {pid: [m for m in ms if m.rejection_score > gamma] for pid, ms in r["candidates"].items()}
    ed = ed_accuracy(model, index, test_c).accuracy
    mdr = md_recall(r["candidates"], gold)
    f1 = e2e_prf(preds, gold).f1
    epochs = sum(len(rep.epochs) for rep in r["reports"])
    elapsed = time.perf_counter() - r["start"]

    # a passage that quotes an entity title verbatim gets that span linked to the entity
    verbatim = 0
    for p in test_c:
        for gm in p.mentions:
            title = next(c.title for c in r["catalog"] if c.entity_id == gm.entity_id)
            if p.text[gm.start:gm.end] == title and any(
                    (m.start, m.end, m.entity_id) == (gm.start, gm.end, gm.entity_id) for m in preds[p.id]):
                verbatim += 1
    ok = ed >= 0.90 and mdr >= 0.85 and f1 >= 0.70 and epochs <= 30 and elapsed < 900 and verbatim > 0
    report(7, "desk-scale learning", ok,
           f"ED acc {ed:.3f} (>=0.90), MD recall {mdr:.3f} (>=0.85), F1 {f1:.3f} (>=0.70) at gamma={gamma}, "
           f"{epochs} epochs, {elapsed:.0f}s, {verbatim} verbatim titles linked")


@pytest.mark.slow
def test_criterion_8_single_pass(report, desk_run, monkeypatch):
    r = desk_run
    calls = []
    real = encoder_module.encode_tokens
    monkeypatch.setattr(encoder_module, "encode_tokens", lambda tp, p: calls.append(len(tp)) or real(tp, p))
    cfg = LinkerConfig(beta=RECIPE_BETA, max_seq_len=16, window_overlap=8)
    per_passage_ok = True
    total_windows = 0
    for p in r["test"][:50]:
        before = len(calls)
        stats = LinkStats()
        found = score_candidates(p.text, r["model"], r["index"], cfg, stats)
        n_windows = len(split_windows(len(tokenize(p.text)), 16, 8))
        per_passage_ok &= len(calls) - before == stats.windows == n_windows
        per_passage_ok &= stats.candidates >= len(found)
        total_windows += n_windows
    throughput = len(r["test"]) / r["link_seconds"]
    ok = per_passage_ok and len(calls) == total_windows and r["stats"].encoder_calls == r["stats"].windows
    report(8, "single-pass contract", ok,
           f"{len(calls)} encoder calls for {total_windows} windows; throughput {throughput:.1f} passages/sec "
           f"({r['stats'].candidates} candidates on {len(r['test'])} test passages)")


@pytest.mark.slow
def test_criterion_10_frozen_entity_encoder(report, desk_run):
    before = r_before = desk_run["reports"][1].model.entity_encoder
    after = desk_run["reports"][2].model.entity_encoder
    same = before.w_mix.tobytes() == after.w_mix.tobytes() and params_digest(r_before) == params_digest(after)
    moved = desk_run["reports"][1].model.mention_encoder.w_mix.tobytes() != \
        desk_run["reports"][2].model.mention_encoder.w_mix.tobytes()
    report(10, "frozen entity encoder", same and moved,
           f"entity encoder bytes identical {same}, mention encoder updated {moved}")


# ---------------------------------------------------------------------------
# 9. persistence round-trips

def test_criterion_9_persistence(report, tmp_path):
    rng = np.random.default_rng(9)
    model = init_model(EncoderConfig(dim=16), hidden=8, seed=9)
    for v in model.arrays().values():
        v += rng.standard_normal(v.shape).astype(np.float32)
    save_model(model, tmp_path / "m")
    checks = {"model": model_to_bytes(load_model(tmp_path / "m")) == model_to_bytes(model)}
    X = rng.standard_normal((500, 16))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    ids = [f"Q{k}" for k in range(500)]
    for name, idx in (("exact", EntityIndex.exact(ids, X)),
                      ("hnsw", EntityIndex.hnsw(ids, X, HNSWParams(M=8, ef_construction=40, seed=1))),
                      ("exact-int8", EntityIndex.exact(ids, X, storage="int8"))):
        idx.save(tmp_path / name)
        back = EntityIndex.load(tmp_path / name)
        q = rng.standard_normal(16)
        checks[name] = back.to_bytes() == idx.to_bytes() and back.search(q, 5) == idx.search(q, 5)

    errors = {}
    raw_model = (tmp_path / "m").read_bytes()
    raw_index = (tmp_path / "hnsw").read_bytes()
    cases = {
        "model truncated": ("m2", raw_model[:-7], load_model, ParamsFormatError),
        "model bad magic": ("m3", b"XXXX" + raw_model[4:], load_model, ParamsFormatError),
        "index truncated": ("i2", raw_index[:-3], EntityIndex.load, IndexFormatError),
        "index bad magic": ("i3", b"XXXX" + raw_index[4:], EntityIndex.load, IndexFormatError),
        "index trailing bytes": ("i4", raw_index + b"\0", EntityIndex.load, IndexFormatError),
    }
    for label, (fname, data, loader, exc) in cases.items():
        (tmp_path / fname).write_bytes(data)
        try:
            loader(tmp_path / fname)
            errors[label] = False
        except exc:
            errors[label] = True
    try:
        load_model(tmp_path / "m", expected=EncoderConfig(dim=32))
        errors["model dim mismatch"] = False
    except ParamsFormatError:
        errors["model dim mismatch"] = True
    ok = all(checks.values()) and all(errors.values())
    report(9, "persistence round-trips", ok, f"round-trips {checks}; named errors {errors}")
