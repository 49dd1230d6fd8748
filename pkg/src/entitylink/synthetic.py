"""Seeded synthetic catalog and corpus for desk-scale training.

Entity titles are capitalised pseudo-words; passages are lowercase filler
text in one of a few "languages" with entity titles dropped in, sometimes
inflected by a suffix on the last word.
"""

from __future__ import annotations

import numpy as np

from .data import EntityRecord, GoldMention, Passage

__all__ = ["generate_synthetic_corpus", "split_corpus", "LANGUAGES"]

LANGUAGES = ("de", "en", "es", "fr")

_ONSETS = ["b", "br", "d", "dr", "f", "g", "gr", "k", "kr", "l", "m", "n", "p", "pr", "r", "s", "st", "t", "tr",
           "v", "z", "th", "sh", "ch"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ei"]
_CODAS = ["", "", "n", "r", "l", "s", "th", "m", "k"]

_FILLER = {
    "en": "the of and a in to was is for on with as by at from that which this it also after when during its "
          "their an were been has had most many later city near".split(),
    "de": "der die das und in zu von mit auf ist war ein eine auch nach als bei aus dem den sich wurde noch "
          "wie vor seit zum zur unter".split(),
    "es": "el la los las de y en que por con una un para como del al fue es se su sus desde entre durante "
          "tras sobre hasta".split(),
    "fr": "le la les de et en un une des du est dans pour par sur au avec qui fut son sa ses aux lors "
          "depuis apres avant entre".split(),
}
_TEMPLATES = {
    "en": "{title} is a {cat} from {place} known for {thing}",
    "de": "{title} ist ein {cat} aus {place} bekannt durch {thing}",
    "es": "{title} es un {cat} de {place} conocido por {thing}",
    "fr": "{title} est un {cat} de {place} connu pour {thing}",
}
_CATS = "river town painter mountain company novel festival league island dynasty composer bridge".split()
_THINGS = "music trade poetry bridges wool mining ceramics sailing astronomy cheese glass textiles".split()


def _word(rng: np.random.Generator, min_len: int = 4, max_len: int = 6) -> str:
    while True:
        syl = rng.integers(2, 4)
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    + _CODAS[rng.integers(len(_CODAS))] for _ in range(syl))
        if min_len <= len(w) <= max_len:
            return w


def _titles(rng: np.random.Generator, n: int) -> list[str]:
    shared = [_word(rng).capitalize() for _ in range(max(4, n // 10))]
    seen: set = set()
    titles = []
    while len(titles) < n:
        k = int(rng.choice([2, 2, 3]))
        words = [_word(rng).capitalize() for _ in range(k)]
        if k > 1 and rng.random() < 0.3:
            words[0] = shared[rng.integers(len(shared))]
        title = " ".join(words)
        if title.lower() in seen:
            continue
        seen.add(title.lower())
        titles.append(title)
    return titles


def _inflect(title: str) -> str:
    return title + ("es" if title.endswith("s") else "s")


def generate_synthetic_corpus(num_entities: int, num_passages: int, seed: int = 0,
                              inflect_prob: float = 0.2) -> tuple[list[EntityRecord], list[Passage]]:
    """Deterministic ``(catalog, corpus)``; every passage carries at least one
    gold mention and every gold offset falls on token boundaries."""
    if num_entities < 2:
        raise ValueError("need at least 2 entities (negatives must exist)")
    rng = np.random.default_rng(seed)
    titles = _titles(rng, num_entities)
    places = [_word(rng).capitalize() for _ in range(12)]
    catalog = []
    for k, title in enumerate(titles):
        n_lang = int(rng.integers(1, 4))
        langs = sorted(rng.choice(LANGUAGES, size=n_lang, replace=False).tolist())
        cat = _CATS[rng.integers(len(_CATS))]
        place = places[rng.integers(len(places))]
        thing = _THINGS[rng.integers(len(_THINGS))]
        catalog.append(EntityRecord(
            entity_id=f"Q{1000 + k}",
            titles={lang: title for lang in langs},
            descriptions={lang: _TEMPLATES[lang].format(title=title, cat=cat, place=place, thing=thing)
                          for lang in langs},
            mention_counts={lang: int(rng.integers(0, 50)) for lang in langs},
        ))

    corpus = []
    for p in range(num_passages):
        lang = LANGUAGES[rng.integers(len(LANGUAGES))]
        filler = _FILLER[lang]
        n_mentions = int(rng.integers(1, 4))
        parts: list[str] = []
        mentions = []
        pos = 0

        def emit(text: str) -> None:
            nonlocal pos
            if parts:
                parts.append(" ")
                pos += 1
            parts.append(text)
            pos += len(text)

        for _ in range(n_mentions):
            emit(" ".join(filler[rng.integers(len(filler))] for _ in range(int(rng.integers(2, 7)))))
            ent = catalog[rng.integers(len(catalog))]
            surface = ent.title
            if rng.random() < inflect_prob:
                surface = _inflect(surface)
            emit(surface)
            mentions.append(GoldMention(pos - len(surface), pos, ent.entity_id))
            if rng.random() < 0.3:
                parts.append(",")
                pos += 1
        emit(" ".join(filler[rng.integers(len(filler))] for _ in range(int(rng.integers(1, 5)))) + ".")
        corpus.append(Passage(f"p{p:06d}", "".join(parts), tuple(mentions), lang))
    return catalog, corpus


def split_corpus(corpus, seed: int = 0, fractions=(0.8, 0.1, 0.1)):
    """Disjoint train/dev/test split by a seeded permutation."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    n_train = int(round(fractions[0] * len(corpus)))
    n_dev = int(round(fractions[1] * len(corpus)))
    pick = lambda idx: [corpus[k] for k in sorted(idx)]  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train : n_train + n_dev]), pick(order[n_train + n_dev :])
