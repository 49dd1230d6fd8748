import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entitylink.data import GoldMention, Passage
from entitylink.encoder import EncoderConfig
from entitylink.evaluation import (
    e2e_prf,
    ed_accuracy,
    evaluate,
    format_report,
    md_recall,
    underlabeling_report,
)
from entitylink.index import EntityIndex
from entitylink.model import init_model
from entitylink.pipeline import LinkedMention


def lm(start, end, eid, md=0.5):
    return LinkedMention(-1, -1, start, end, eid, md, 0.0, 0.9)


def g(start, end, eid):
    return GoldMention(start, end, eid)


def test_worked_example():
    pred = {"p": [lm(0, 3, "A"), lm(4, 8, "B"), lm(9, 12, "X")]}
    gold = {"p": [g(0, 3, "A"), g(4, 8, "B"), g(13, 15, "C"), g(16, 20, "D")]}
    prf = e2e_prf(pred, gold)
    assert (prf.precision, prf.recall) == (2 / 3, 1 / 2)
    assert prf.f1 == pytest.approx(4 / 7, abs=1e-15)


def test_perfect_predictions():
    gold = {"p": [g(0, 3, "A")], "q": [g(2, 5, "B"), g(6, 9, "C")]}
    pred = {k: [lm(m.start, m.end, m.entity_id) for m in v] for k, v in gold.items()}
    prf = e2e_prf(pred, gold)
    assert prf.precision == prf.recall == prf.f1 == 1.0


def test_wrong_entity_is_wrong():
    prf = e2e_prf({"p": [lm(0, 3, "B")]}, {"p": [g(0, 3, "A")]})
    assert prf.num_correct == 0 and prf.f1 == 0.0
    assert md_recall({"p": [lm(0, 3, "B")]}, {"p": [g(0, 3, "A")]}) == 1.0


def test_no_predictions():
    prf = e2e_prf({"p": []}, {"p": [g(0, 3, "A")]})
    assert prf.precision is None and prf.f1 == 0.0 and prf.recall == 0.0


def test_duplicate_prediction_matches_once():
    prf = e2e_prf({"p": [lm(0, 3, "A"), lm(0, 3, "A")]}, {"p": [g(0, 3, "A")]})
    assert prf.num_correct == 1 and prf.precision == 0.5


def test_md_recall_examples():
    gold = {"p": [g(0, 3, "A"), g(4, 6, "B"), g(7, 9, "C"), g(10, 12, "D")]}
    extras = [lm(20, 22, "Z")]
    assert md_recall({"p": [lm(m.start, m.end, "?") for m in gold["p"]] + extras}, gold) == 1.0
    assert md_recall({"p": [lm(1, 3, "A")]}, {"p": [g(0, 3, "A")]}) == 0.0
    assert md_recall({"p": [lm(m.start, m.end, "?") for m in gold["p"][:3]]}, gold) == 0.75
    assert md_recall({}, {}) is None


def _hand_prf(pred, gold):
    """Slow reference: match each prediction to an unused identical gold."""
    correct = n_pred = n_gold = 0
    for pid in set(pred) | set(gold):
        pool = [(m.start, m.end, m.entity_id) for m in gold.get(pid, [])]
        n_gold += len(pool)
        for m in pred.get(pid, []):
            n_pred += 1
            key = (m.start, m.end, m.entity_id)
            if key in pool:
                pool.remove(key)
                correct += 1
    p = Fraction(correct, n_pred) if n_pred else None
    r = Fraction(correct, n_gold) if n_gold else None
    f = 0 if p is None or r is None or p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


mention = st.tuples(st.integers(0, 4), st.integers(1, 3), st.sampled_from("ABC"))


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(st.sampled_from(["p1", "p2", "p3"]), st.lists(mention, max_size=5)),
       st.dictionaries(st.sampled_from(["p1", "p2", "p3"]), st.lists(mention, max_size=5)))
def test_prf_matches_hand_count(pred_raw, gold_raw):
    pred = {k: [lm(s, s + n, e) for s, n, e in v] for k, v in pred_raw.items()}
    gold = {k: [g(s, s + n, e) for s, n, e in v] for k, v in gold_raw.items()}
    prf = e2e_prf(pred, gold)
    p, r, f = _hand_prf(pred, gold)
    assert prf.precision == (None if p is None else float(p))
    assert prf.recall == (None if r is None else float(r))
    assert prf.f1 == pytest.approx(float(f), rel=1e-12, abs=0)
    assert prf.num_correct <= min(prf.num_pred, prf.num_gold)
    mr = md_recall(pred, gold)
    if mr is not None:
        assert mr >= prf.recall
    shuffled = dict(reversed(list(pred.items())))
    assert e2e_prf(shuffled, gold) == prf


def test_underlabeling_report():
    gold = {"p": [g(0, 3, "A")], "q": [g(0, 2, "A")]}
    assert underlabeling_report({"p": [lm(0, 3, "A")], "q": [lm(0, 2, "A")]}, gold) == []
    rows = underlabeling_report({"p": [lm(0, 3, "A"), lm(5, 9, "A", md=0.3), lm(10, 12, "Z", md=0.8)]}, gold)
    assert [(r["start"], r["entity_id"]) for r in rows] == [(10, "Z"), (5, "A")]
    assert rows[0]["frequency_bucket"] == "unseen" and rows[1]["gold_frequency"] == 2


def test_evaluate_per_language_and_macro(tmp_path):
    gold = {"a": [g(0, 1, "A")], "b": [g(0, 1, "B"), g(2, 3, "C")]}
    pred = {"a": [lm(0, 1, "A")], "b": [lm(0, 1, "B")]}
    rep = evaluate(pred, gold, {"a": "en", "b": "de"})
    assert rep.per_language["en"].f1 == 1.0
    assert rep.per_language["de"].f1 == pytest.approx(2 / 3)
    assert rep.macro_f1 == pytest.approx((1 + 2 / 3) / 2)
    assert rep.overall.recall == pytest.approx(2 / 3)
    assert "macro-average" in format_report(rep)
    rep.save(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["per_language"]["de"]["num_gold"] == 2


def _ed_setup():
    model = init_model(EncoderConfig(dim=8), hidden=4, seed=0)
    passages = [Passage("p", "Alpha met Beta in Gamma", (g(0, 5, "A"), g(10, 14, "B"), g(18, 23, "C")))]
    return model, passages


def test_ed_accuracy_with_only_gold_entity():
    model, passages = _ed_setup()
    for eid in "ABC":
        sub = [Passage("p", passages[0].text, tuple(m for m in passages[0].mentions if m.entity_id == eid))]
        idx = EntityIndex.exact([eid], np.ones((1, 8)) / np.sqrt(8))
        assert ed_accuracy(model, idx, sub).accuracy == 1.0


def test_ed_accuracy_matches_exhaustive_scoring(rng):
    from entitylink.data import char_span_to_token_span, tokenize
    from entitylink.disambiguation import pool_mention
    from entitylink.encoder import encode_tokens

    model, passages = _ed_setup()
    X = rng.standard_normal((3, 8))
    idx = EntityIndex.exact(list("ABC"), X / np.linalg.norm(X, axis=1, keepdims=True))
    tp = tokenize(passages[0].text)
    reps = encode_tokens(tp, model.mention_encoder)
    correct = 0
    for m in passages[0].mentions:
        i, j = char_span_to_token_span(tp, m.start, m.end)
        s = idx.vectors.astype(float) @ pool_mention(reps, i, j, model.ed)
        correct += "ABC"[int(np.argmax(s))] == m.entity_id
    assert ed_accuracy(model, idx, passages).accuracy == correct / 3


def test_ed_accuracy_empty_and_unreachable():
    model, _ = _ed_setup()
    idx = EntityIndex.exact(["A"], np.eye(8)[:1])
    assert ed_accuracy(model, idx, []).accuracy is None
    res = ed_accuracy(model, idx, [Passage("p", "Alphabet", (g(0, 5, "A"),))])
    assert res.accuracy is None and res.num_unreachable == 1
