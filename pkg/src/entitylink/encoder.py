"""Toy token encoder standing in for a pretrained transformer.

Every token gets a fixed unit-norm embedding ``h`` built by hashing string
features of the token (the token itself, its character shape and its
character trigrams) into seeded random buckets.  A token representation is

    p_t = W_mix @ mean(R[-c] h[t - c], ..., h[t], ..., R[c] h[t + c])

with neighbours outside the passage skipped and ``R[k]`` a fixed seeded
signed permutation per relative offset (``R[0]`` is the identity).  ``W_mix`` is the only trainable
tensor, so the context means can be cached per passage and the encoder
reduces to one matrix product.

Mention and entity encoders are two independent :class:`EncoderParams`.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import BinaryIO, Optional

import numpy as np

from .data import EntityRecord, TokenizedPassage, tokenize

__all__ = [
    "EncoderConfig",
    "EncoderParams",
    "ParamsFormatError",
    "token_embedding",
    "context_means",
    "encode_tokens",
    "entity_context_mean",
    "encode_entity",
    "encode_entities",
    "save_params",
    "load_params",
    "ENCODER_MAGIC",
]

ENCODER_MAGIC = b"BELAENC1"
_HEADER = struct.Struct("<IIIQ")

ENTITY_SEPARATOR = " : "


class ParamsFormatError(ValueError):
    """Raised for corrupt or incompatible parameter files."""


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    context_window: int = 2
    vocab_hash_buckets: int = 2**16
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if self.context_window < 0:
            raise ValueError(f"context_window must be >= 0, got {self.context_window}")
        if self.vocab_hash_buckets < 1:
            raise ValueError("vocab_hash_buckets must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


@dataclass
class EncoderParams:
    config: EncoderConfig
    w_mix: np.ndarray

    def __post_init__(self):
        self.w_mix = np.asarray(self.w_mix, dtype=np.float64)
        d = self.config.dim
        if self.w_mix.shape != (d, d):
            raise ValueError(f"w_mix has shape {self.w_mix.shape}, expected ({d}, {d})")

    @classmethod
    def identity(cls, config: EncoderConfig) -> "EncoderParams":
        return cls(config, np.eye(config.dim))

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, self.w_mix.copy())


# ---------------------------------------------------------------------------
# hashed token embeddings


def _shape(token: str) -> str:
    out = []
    for ch in token:
        c = "X" if ch.isupper() else "x" if ch.isalpha() else "d" if ch.isdigit() else ch
        if not out or out[-1] != c:
            out.append(c)
    return "".join(out)


def _features(token: str) -> list[tuple[str, float]]:
    padded = f"<{token.lower()}>"
    grams = [padded[k : k + 3] for k in range(max(1, len(padded) - 2))]
    gw = 1.0 / np.sqrt(len(grams))
    return [("t:" + token, 1.0), ("s:" + _shape(token), 1.0)] + [("g:" + g, gw) for g in grams]


@lru_cache(maxsize=1 << 18)
def _bucket_vector(seed: int, bucket: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng([seed, bucket])
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    v.setflags(write=False)
    return v


def _bucket(feature: str, seed: int, buckets: int) -> int:
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    return int.from_bytes(digest, "little") % buckets


@lru_cache(maxsize=1 << 18)
def _token_embedding(token: str, seed: int, buckets: int, dim: int) -> np.ndarray:
    h = np.zeros(dim)
    for feat, weight in _features(token):
        h += weight * _bucket_vector(seed, _bucket(feat, seed, buckets), dim)
    norm = np.linalg.norm(h)
    h = h / norm if norm > 0 else _bucket_vector(seed, 0, dim).copy()
    h.setflags(write=False)
    return h


def token_embedding(token: str, config: EncoderConfig) -> np.ndarray:
    """Unit-norm hashed embedding; depends only on ``token`` and the config."""
    return _token_embedding(token, config.seed, config.vocab_hash_buckets, config.dim)


@lru_cache(maxsize=64)
def _offset_transform(seed: int, dim: int, offset: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed signed permutation applied to a neighbour at relative position
    ``offset``; the identity for the token itself."""
    if offset == 0:
        return np.arange(dim), np.ones(dim)
    rng = np.random.default_rng([seed, 0x0FF5E7, offset + 1024])
    return rng.permutation(dim), rng.choice([-1.0, 1.0], size=dim)


def context_means(tokens, config: EncoderConfig) -> np.ndarray:
    """Row ``t`` is the mean over ``[t - c, t + c]`` (clipped to the passage)
    of the hashed embeddings, each neighbour passed through the fixed signed
    permutation of its relative offset so that left and right context stay
    distinguishable."""
    n = len(tokens)
    d = config.dim
    if n == 0:
        return np.zeros((0, d))
    H = np.stack([token_embedding(tok, config) for tok in tokens])
    c = config.context_window
    if c == 0:
        return H
    out = H.copy()
    counts = np.ones(n)
    for off in range(-c, c + 1):
        if off == 0 or abs(off) >= n:
            continue
        perm, sign = _offset_transform(config.seed, d, off)
        shifted = H[:, perm] * sign
        if off > 0:
            out[: n - off] += shifted[off:]
            counts[: n - off] += 1
        else:
            out[-off:] += shifted[: n + off]
            counts[-off:] += 1
    return out / counts[:, None]


def encode_tokens(passage: TokenizedPassage, params: EncoderParams) -> np.ndarray:
    """Token representations, shape ``(n_tokens, dim)``."""
    A = context_means(passage.tokens, params.config)
    return A @ params.w_mix.T


def entity_context_mean(record: EntityRecord, config: EncoderConfig) -> np.ndarray:
    """Mean context vector of the entity text; the entity encoding is this
    vector mapped through ``W_mix`` and normalized."""
    title, desc = record.title, record.descriptions.get(record.selected_language, "")
    if not title.strip() and not desc.strip():
        raise ValueError(f"entity {record.entity_id!r} has neither title nor description")
    toks = tokenize(title + ENTITY_SEPARATOR + desc).tokens
    return context_means(toks, config).mean(axis=0)


def _normalize_rows(U: np.ndarray, what: str = "entity") -> np.ndarray:
    norms = np.linalg.norm(U, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"{what} encoding has zero norm")
    return U / norms


def encode_entity(record: EntityRecord, params: EncoderParams) -> np.ndarray:
    u = params.w_mix @ entity_context_mean(record, params.config)
    return _normalize_rows(u[None, :])[0]


def encode_entities(records, params: EncoderParams, means: Optional[np.ndarray] = None) -> np.ndarray:
    """Unit-norm encodings for many records, shape ``(N, dim)``.

    ``means`` may carry precomputed :func:`entity_context_mean` rows.
    """
    if means is None:
        means = np.stack([entity_context_mean(r, params.config) for r in records])
    return _normalize_rows(means @ params.w_mix.T)


# ---------------------------------------------------------------------------
# persistence


def write_encoder(fh: BinaryIO, params: EncoderParams) -> None:
    cfg = params.config
    fh.write(ENCODER_MAGIC)
    fh.write(_HEADER.pack(cfg.dim, cfg.vocab_hash_buckets, cfg.context_window, cfg.seed))
    fh.write(params.w_mix.astype("<f4").tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ParamsFormatError(f"truncated file while reading {what}: expected {n} bytes, got {len(buf)}")
    return buf


def read_encoder(fh: BinaryIO, expected: Optional[EncoderConfig] = None, magic: bytes = ENCODER_MAGIC) -> EncoderParams:
    got = fh.read(len(magic))
    if got != magic:
        raise ParamsFormatError(f"bad magic: expected {magic!r}, got {got!r}")
    dim, buckets, cw, seed = _HEADER.unpack(_read_exact(fh, _HEADER.size, "header"))
    if dim < 2:
        raise ParamsFormatError(f"corrupt header: dim={dim}")
    if expected is not None:
        for name, have, want in (
            ("dim", dim, expected.dim),
            ("vocab_hash_buckets", buckets, expected.vocab_hash_buckets),
            ("context_window", cw, expected.context_window),
        ):
            if have != want:
                raise ParamsFormatError(f"{name} mismatch: file has {have}, config expects {want}")
    config = EncoderConfig(dim=dim, context_window=cw, vocab_hash_buckets=buckets, seed=seed)
    raw = _read_exact(fh, 4 * dim * dim, "W_mix")
    w = np.frombuffer(raw, dtype="<f4").reshape(dim, dim).astype(np.float64)
    return EncoderParams(config, w)


def save_params(params: EncoderParams, path: os.PathLike) -> None:
    """Write a bare encoder file (header plus ``W_mix``, no extra sections)."""
    buf = io.BytesIO()
    write_encoder(buf, params)
    _atomic_write(path, buf.getvalue())


def load_params(path: os.PathLike, expected: Optional[EncoderConfig] = None) -> EncoderParams:
    with open(path, "rb") as fh:
        return read_encoder(fh, expected)


def _atomic_write(path: os.PathLike, data: bytes) -> None:
    tmp = f"{os.fspath(path)}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
