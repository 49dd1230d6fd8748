import pytest

from entitylink.data import char_span_to_token_span, tokenize, write_catalog, write_corpus
from entitylink.synthetic import generate_synthetic_corpus, split_corpus


def test_gold_mentions_align(small_synth):
    catalog, corpus = small_synth
    ids = {r.entity_id for r in catalog}
    for p in corpus:
        assert p.mentions
        tp = tokenize(p.text)
        for m in p.mentions:
            assert m.entity_id in ids
            assert char_span_to_token_span(tp, m.start, m.end) is not None


def test_titles_distinct_and_multiword(small_synth):
    catalog, _ = small_synth
    titles = [r.title for r in catalog]
    assert len({t.lower() for t in titles}) == len(titles)
    assert all(len(t.split()) >= 2 for t in titles)


def test_deterministic_files(tmp_path):
    for k in range(2):
        cat, corp = generate_synthetic_corpus(15, 40, seed=9)
        write_catalog(cat, tmp_path / f"c{k}")
        write_corpus(corp, tmp_path / f"p{k}")
    assert (tmp_path / "c0").read_bytes() == (tmp_path / "c1").read_bytes()
    assert (tmp_path / "p0").read_bytes() == (tmp_path / "p1").read_bytes()
    assert generate_synthetic_corpus(15, 40, seed=10)[1] != generate_synthetic_corpus(15, 40, seed=9)[1]


def test_needs_two_entities():
    with pytest.raises(ValueError):
        generate_synthetic_corpus(1, 5)


def test_split_disjoint_and_complete(small_synth):
    _, corpus = small_synth
    tr, dv, te = split_corpus(corpus, seed=7)
    ids = [p.id for p in tr + dv + te]
    assert sorted(ids) == sorted(p.id for p in corpus) and len(set(ids)) == len(ids)
    assert (len(tr), len(dv), len(te)) == (48, 6, 6)
