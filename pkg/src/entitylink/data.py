"""Passages, gold annotations, entity records and the deterministic tokenizer.

Gold annotations live on disk as unicode character offsets (start inclusive,
end exclusive) and are converted to inclusive token spans ``(i, j)`` only when
a model needs them.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

__all__ = [
    "SUBWORD_LEN",
    "TokenizedPassage",
    "GoldMention",
    "Passage",
    "EntityRecord",
    "tokenize",
    "char_span_to_token_span",
    "token_span_to_char_span",
    "select_description_language",
    "read_corpus",
    "write_corpus",
    "read_catalog",
    "write_catalog",
]

SUBWORD_LEN = 6

_WORD_RE = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class TokenizedPassage:
    id: str
    text: str
    tokens: tuple[str, ...]
    token_char_spans: tuple[tuple[int, int], ...]
    word_start_flags: tuple[bool, ...]
    word_end_flags: tuple[bool, ...]
    language_hint: Optional[str] = None

    def __len__(self) -> int:
        return len(self.tokens)

    def slice(self, start: int, stop: int) -> "TokenizedPassage":
        """Tokens ``[start, stop)`` as a passage over the same text."""
        return TokenizedPassage(
            id=self.id,
            text=self.text,
            tokens=self.tokens[start:stop],
            token_char_spans=self.token_char_spans[start:stop],
            word_start_flags=self.word_start_flags[start:stop],
            word_end_flags=self.word_end_flags[start:stop],
            language_hint=self.language_hint,
        )


@dataclass(frozen=True)
class GoldMention:
    start: int
    end: int
    entity_id: str

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid mention offsets ({self.start}, {self.end})")
        if not self.entity_id:
            raise ValueError("gold mention has an empty entity_id")


@dataclass(frozen=True)
class Passage:
    """One corpus line: raw text plus optional gold mentions."""

    id: str
    text: str
    mentions: tuple[GoldMention, ...] = ()
    language: Optional[str] = None

    def __post_init__(self):
        for m in self.mentions:
            if m.end > len(self.text):
                raise ValueError(
                    f"passage {self.id!r}: mention ({m.start}, {m.end}) exceeds text length {len(self.text)}"
                )


@dataclass(frozen=True)
class EntityRecord:
    entity_id: str
    titles: dict = field(default_factory=dict)
    descriptions: dict = field(default_factory=dict)
    mention_counts: dict = field(default_factory=dict)
    selected_language: str = ""

    def __post_init__(self):
        if not self.entity_id:
            raise ValueError("entity_id must be non-empty")
        for lang, count in self.mention_counts.items():
            if count < 0:
                raise ValueError(f"entity {self.entity_id!r}: negative mention count for {lang!r}")
        if not self.selected_language:
            object.__setattr__(self, "selected_language", select_description_language(self))
        elif self.selected_language not in self.descriptions:
            raise ValueError(
                f"entity {self.entity_id!r}: selected language {self.selected_language!r} has no description"
            )

    @property
    def title(self) -> str:
        lang = self.selected_language
        if lang in self.titles:
            return self.titles[lang]
        # fall back to any title, lexicographically first language
        return self.titles[min(self.titles)] if self.titles else ""

    @property
    def description(self) -> str:
        return self.descriptions[self.selected_language]


def tokenize(text: str, id: str = "", language_hint: Optional[str] = None) -> TokenizedPassage:
    """Split on whitespace and punctuation, then cut each word into pieces of
    at most ``SUBWORD_LEN`` characters.

    >>> tokenize("San Francisco").tokens
    ('San', 'Franci', 'sco')
    """
    tokens: list[str] = []
    spans: list[tuple[int, int]] = []
    starts: list[bool] = []
    ends: list[bool] = []
    for match in _WORD_RE.finditer(text):
        w0, w1 = match.span()
        for s in range(w0, w1, SUBWORD_LEN):
            e = min(s + SUBWORD_LEN, w1)
            tokens.append(text[s:e])
            spans.append((s, e))
            starts.append(s == w0)
            ends.append(e == w1)
    return TokenizedPassage(
        id=id,
        text=text,
        tokens=tuple(tokens),
        token_char_spans=tuple(spans),
        word_start_flags=tuple(starts),
        word_end_flags=tuple(ends),
        language_hint=language_hint,
    )


def char_span_to_token_span(passage: TokenizedPassage, start_char: int, end_char: int) -> Optional[tuple[int, int]]:
    """Inclusive token span whose boundaries coincide exactly with
    ``[start_char, end_char)``, or ``None`` when the offsets cut through a token
    or cover no token."""
    if not 0 <= start_char < end_char <= len(passage.text):
        raise ValueError(
            f"character span ({start_char}, {end_char}) out of range for text of length {len(passage.text)}"
        )
    i = j = None
    for k, (s, e) in enumerate(passage.token_char_spans):
        if s == start_char:
            i = k
        if e == end_char:
            j = k
            break
        if s >= end_char:
            break
    if i is None or j is None or i > j:
        return None
    return i, j


def token_span_to_char_span(passage: TokenizedPassage, i: int, j: int) -> tuple[int, int]:
    return passage.token_char_spans[i][0], passage.token_char_spans[j][1]


def select_description_language(record: EntityRecord) -> str:
    """Language whose description is kept for the entity: most mentions wins,
    ties go to the lexicographically smallest language code."""
    if not record.descriptions:
        raise ValueError(f"entity {record.entity_id!r} has no descriptions")
    return min(record.descriptions, key=lambda lang: (-record.mention_counts.get(lang, 0), lang))


# ---------------------------------------------------------------------------
# JSON-lines IO


def _iter_jsonl(path: os.PathLike) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def read_corpus(path: os.PathLike) -> list[Passage]:
    passages = []
    for lineno, obj in _iter_jsonl(path):
        try:
            mentions = tuple(
                GoldMention(int(m["start"]), int(m["end"]), str(m["entity_id"])) for m in obj.get("mentions", [])
            )
            passages.append(Passage(str(obj["id"]), obj["text"], mentions, obj.get("language")))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return passages


def write_corpus(passages: Iterable[Passage], path: os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in passages:
            obj = {
                "id": p.id,
                "text": p.text,
                "mentions": [{"start": m.start, "end": m.end, "entity_id": m.entity_id} for m in p.mentions],
            }
            if p.language is not None:
                obj["language"] = p.language
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=False) + "\n")


def read_catalog(path: os.PathLike) -> list[EntityRecord]:
    records = []
    for lineno, obj in _iter_jsonl(path):
        try:
            records.append(
                EntityRecord(
                    entity_id=str(obj["entity_id"]),
                    titles=dict(obj.get("titles", {})),
                    descriptions=dict(obj.get("descriptions", {})),
                    mention_counts={k: int(v) for k, v in obj.get("mention_counts", {}).items()},
                )
            )
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return records


def write_catalog(records: Iterable[EntityRecord], path: os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "entity_id": r.entity_id,
                "titles": r.titles,
                "descriptions": r.descriptions,
                "mention_counts": r.mention_counts,
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
