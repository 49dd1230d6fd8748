"""Maximum-inner-product entity index.

Two kinds share one class: ``exact`` scores every row (the oracle) and
``hnsw`` walks a layered proximity graph (Malkov & Yashunin style) built over
inner-product similarity.  Vectors are stored as float32, or optionally as
symmetric int8 codes with one float32 scale per row.
"""

from __future__ import annotations

import heapq
import io
import math
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Optional, Sequence

import numpy as np

__all__ = [
    "HNSWParams",
    "EntityIndex",
    "IndexFormatError",
    "build_exact",
    "build_approximate",
    "quantize_int8",
    "INDEX_MAGIC",
]

INDEX_MAGIC = b"BELAIDX1"

KIND_EXACT = 0
KIND_HNSW = 1
STORAGE_F32 = 0
STORAGE_INT8 = 1


class IndexFormatError(ValueError):
    pass


@dataclass(frozen=True)
class HNSWParams:
    M: int = 16
    ef_construction: int = 200
    ef_search: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("M must be >= 2")
        if self.ef_construction < 1 or self.ef_search < 1:
            raise ValueError("ef values must be positive")


def quantize_int8(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric per-row int8 quantization; returns ``(codes, scales)``."""
    X = np.asarray(X, dtype=np.float32)
    amax = np.abs(X).max(axis=1)
    scales = np.where(amax > 0, amax / 127.0, 1.0).astype(np.float32)
    codes = np.clip(np.rint(X / scales[:, None]), -127, 127).astype(np.int8)
    return codes, scales


@dataclass
class EntityIndex:
    ids: list
    vectors: np.ndarray  # float32 (N, d); dequantized values for int8 storage
    kind: str = "exact"
    storage: str = "float32"
    params: Optional[HNSWParams] = None
    levels: Optional[np.ndarray] = None
    # graph[layer][node] -> int32 neighbour array; only nodes with level >= layer
    graph: list = field(default_factory=list)
    entry_point: int = -1
    codes: Optional[np.ndarray] = None
    scales: Optional[np.ndarray] = None

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        if len(set(self.ids)) != len(self.ids):
            seen = set()
            dup = next(i for i in self.ids if i in seen or seen.add(i))
            raise ValueError(f"duplicate entity id {dup!r}")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError("vectors must be an (N, d) matrix with one row per id")
        self._X = np.ascontiguousarray(self.vectors, dtype=np.float64)
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        self._id_rank = np.empty(len(self.ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(self.ids))
        self._pos = {eid: r for r, eid in enumerate(self.ids)}

    # -- construction -----------------------------------------------------

    @classmethod
    def exact(cls, ids: Sequence[str], vectors: np.ndarray, storage: str = "float32") -> "EntityIndex":
        vectors, codes, scales = _prepare(vectors, storage)
        return cls(list(ids), vectors, "exact", storage, codes=codes, scales=scales)

    @classmethod
    def hnsw(
        cls, ids: Sequence[str], vectors: np.ndarray, params: HNSWParams = HNSWParams(), storage: str = "float32"
    ) -> "EntityIndex":
        vectors, codes, scales = _prepare(vectors, storage)
        index = cls(list(ids), vectors, "hnsw", storage, params=params, codes=codes, scales=scales)
        _HNSWBuilder(index, params).build()
        return index

    # -- queries -----------------------------------------------------------

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def position(self, entity_id: str) -> int:
        return self._pos[entity_id]

    def vector(self, entity_id: str) -> np.ndarray:
        return self._X[self._pos[entity_id]]

    def _check_query(self, query: np.ndarray, k: int) -> np.ndarray:
        if len(self.ids) == 0:
            raise ValueError("cannot search an empty index")
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query, dtype=np.float64)
        if q.shape[-1] != self.dim:
            raise ValueError(f"query dimension {q.shape[-1]} does not match index dimension {self.dim}")
        return q

    def _rank(self, rows: np.ndarray, scores: np.ndarray, k: int) -> list[tuple[str, float]]:
        order = np.lexsort((self._id_rank[rows], -scores))[:k]
        return [(self.ids[r], float(s)) for r, s in zip(rows[order], scores[order])]

    def search(self, query: np.ndarray, k: int, ef_search: Optional[int] = None) -> list[tuple[str, float]]:
        """Top-``k`` ``(entity_id, score)`` pairs by descending inner product,
        ties broken by entity id."""
        q = self._check_query(query, k)
        if self.kind == "exact":
            scores = self._X @ q
            return self._rank(np.arange(len(self.ids)), scores, k)
        ef = max(ef_search or self.params.ef_search, k)
        rows, scores = self._hnsw_search(q, ef)
        return self._rank(rows, scores, k)

    def search_batch(self, queries: np.ndarray, k: int, ef_search: Optional[int] = None) -> list[list[tuple[str, float]]]:
        Q = self._check_query(np.atleast_2d(queries), k)
        if self.kind != "exact":
            return [self.search(q, k, ef_search) for q in Q]
        S = Q @ self._X.T
        all_rows = np.arange(len(self.ids))
        out = []
        kk = min(k, len(self.ids))
        for s in S:
            if kk < len(self.ids):
                # candidates: everything scoring at least the k-th best, so ties survive
                kth = np.partition(s, -kk)[-kk]
                rows = np.flatnonzero(s >= kth)
            else:
                rows = all_rows
            out.append(self._rank(rows, s[rows], k))
        return out

    def _hnsw_search(self, q: np.ndarray, ef: int) -> tuple[np.ndarray, np.ndarray]:
        ep = self.entry_point
        ep_score = float(self._X[ep] @ q)
        for layer in range(len(self.graph) - 1, 0, -1):
            ep, ep_score = _greedy(self._X, self.graph[layer], q, ep, ep_score)
        found = _search_layer(self._X, self.graph[0], q, [(ep_score, ep)], ef)
        rows = np.fromiter((r for _, r in found), dtype=np.int64, count=len(found))
        scores = np.fromiter((s for s, _ in found), dtype=np.float64, count=len(found))
        return rows, scores

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.write(buf)
        return buf.getvalue()

    def write(self, fh: BinaryIO) -> None:
        n, d = self.vectors.shape
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<BIIB", KIND_HNSW if self.kind == "hnsw" else KIND_EXACT, n, d,
                             STORAGE_INT8 if self.storage == "int8" else STORAGE_F32))
        for eid in self.ids:
            raw = eid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        if self.storage == "int8":
            fh.write(self.codes.astype(np.int8).tobytes())
            fh.write(self.scales.astype("<f4").tobytes())
        else:
            fh.write(self.vectors.astype("<f4").tobytes())
        if self.kind == "hnsw":
            p = self.params
            fh.write(struct.pack("<IIIQiI", p.M, p.ef_construction, p.ef_search, p.seed, self.entry_point,
                                 len(self.graph)))
            fh.write(self.levels.astype("<u1").tobytes())
            for layer, adj in enumerate(self.graph):
                for node in np.flatnonzero(self.levels >= layer):
                    nb = adj[int(node)]
                    fh.write(struct.pack("<I", len(nb)))
                    fh.write(np.asarray(nb, dtype="<i4").tobytes())

    def save(self, path: os.PathLike) -> None:
        tmp = f"{os.fspath(path)}.tmp{os.getpid()}"
        with open(tmp, "wb") as fh:
            self.write(fh)
        os.replace(tmp, path)

    @classmethod
    def read(cls, fh: BinaryIO) -> "EntityIndex":
        magic = fh.read(len(INDEX_MAGIC))
        if magic != INDEX_MAGIC:
            raise IndexFormatError(f"bad magic: expected {INDEX_MAGIC!r}, got {magic!r}")
        kind, n, d, storage = struct.unpack("<BIIB", _read(fh, 10, "header"))
        if kind not in (KIND_EXACT, KIND_HNSW):
            raise IndexFormatError(f"unknown index kind {kind}")
        if storage not in (STORAGE_F32, STORAGE_INT8):
            raise IndexFormatError(f"unknown vector storage {storage}")
        ids = []
        for _ in range(n):
            (ln,) = struct.unpack("<I", _read(fh, 4, "id length"))
            ids.append(_read(fh, ln, "id").decode("utf-8"))
        codes = scales = None
        if storage == STORAGE_INT8:
            codes = np.frombuffer(_read(fh, n * d, "int8 codes"), dtype=np.int8).reshape(n, d).copy()
            scales = np.frombuffer(_read(fh, 4 * n, "scales"), dtype="<f4").astype(np.float32)
            vectors = codes.astype(np.float32) * scales[:, None]
        else:
            vectors = np.frombuffer(_read(fh, 4 * n * d, "vectors"), dtype="<f4").reshape(n, d).astype(np.float32)
        storage_name = "int8" if storage == STORAGE_INT8 else "float32"
        if kind == KIND_EXACT:
            return cls(ids, vectors, "exact", storage_name, codes=codes, scales=scales)
        M, efc, efs, seed, entry, n_layers = struct.unpack("<IIIQiI", _read(fh, 28, "graph header"))
        levels = np.frombuffer(_read(fh, n, "levels"), dtype="<u1").astype(np.int64)
        graph = []
        for layer in range(n_layers):
            adj = {}
            for node in np.flatnonzero(levels >= layer):
                (cnt,) = struct.unpack("<I", _read(fh, 4, "neighbour count"))
                nb = np.frombuffer(_read(fh, 4 * cnt, "neighbours"), dtype="<i4").astype(np.int32)
                if cnt and (nb.min() < 0 or nb.max() >= n):
                    raise IndexFormatError(f"neighbour id out of range on layer {layer}")
                adj[int(node)] = nb
            graph.append(adj)
        return cls(ids, vectors, "hnsw", storage_name, params=HNSWParams(M, efc, efs, seed), levels=levels,
                   graph=graph, entry_point=entry, codes=codes, scales=scales)

    @classmethod
    def load(cls, path: os.PathLike) -> "EntityIndex":
        with open(path, "rb") as fh:
            index = cls.read(fh)
            if fh.read(1):
                raise IndexFormatError("trailing bytes after index payload")
        return index


def _read(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise IndexFormatError(f"truncated index file while reading {what}")
    return buf


def _prepare(vectors: np.ndarray, storage: str):
    X = np.asarray(vectors, dtype=np.float32)
    if X.ndim != 2:
        raise ValueError("vectors must be 2-D")
    if storage == "float32":
        return X, None, None
    if storage == "int8":
        codes, scales = quantize_int8(X)
        return codes.astype(np.float32) * scales[:, None], codes, scales
    raise ValueError(f"unknown storage mode {storage!r}")


# ---------------------------------------------------------------------------
# HNSW internals; similarity is the inner product, larger is closer


def _greedy(X, adj, q, ep, ep_score):
    changed = True
    while changed:
        changed = False
        nb = adj.get(ep)
        if nb is None or len(nb) == 0:
            break
        s = X[nb] @ q
        best = int(np.argmax(s))
        if s[best] > ep_score:
            ep, ep_score, changed = int(nb[best]), float(s[best]), True
    return ep, ep_score


def _search_layer(X, adj, q, entry: list, ef: int) -> list[tuple[float, int]]:
    """Beam search on one layer; returns up to ``ef`` ``(score, node)`` pairs."""
    visited = {node for _, node in entry}
    candidates = [(-s, node) for s, node in entry]
    heapq.heapify(candidates)
    results = list(entry)
    heapq.heapify(results)
    while len(results) > ef:
        heapq.heappop(results)
    while candidates:
        neg, c = heapq.heappop(candidates)
        if len(results) >= ef and -neg < results[0][0]:
            break
        nb = adj.get(c)
        if nb is None or len(nb) == 0:
            continue
        fresh = [x for x in nb.tolist() if x not in visited]
        if not fresh:
            continue
        visited.update(fresh)
        scores = X[fresh] @ q
        worst = results[0][0] if len(results) >= ef else -math.inf
        for node, s in zip(fresh, scores.tolist()):
            if s > worst or len(results) < ef:
                heapq.heappush(candidates, (-s, node))
                heapq.heappush(results, (s, node))
                if len(results) > ef:
                    heapq.heappop(results)
                worst = results[0][0] if len(results) >= ef else -math.inf
    return sorted(results, key=lambda t: (-t[0], t[1]))


class _HNSWBuilder:
    def __init__(self, index: EntityIndex, params: HNSWParams):
        self.index = index
        self.p = params
        self.X = index._X
        self.rng = np.random.default_rng(params.seed)
        self.mult = 1.0 / math.log(params.M)

    def _select(self, q_scores: list[tuple[float, int]], m: int) -> list[int]:
        """Diversity heuristic: keep a candidate only if it is closer to the
        base point than to every neighbour already kept."""
        chosen: list[int] = []
        for s, node in q_scores:
            if len(chosen) >= m:
                break
            if chosen:
                if float(np.max(self.X[chosen] @ self.X[node])) >= s:
                    continue
            chosen.append(node)
        return chosen

    def _shrink(self, node: int, nbrs: np.ndarray, m: int) -> np.ndarray:
        s = self.X[nbrs] @ self.X[node]
        ranked = sorted(zip(s.tolist(), nbrs.tolist()), key=lambda t: (-t[0], t[1]))
        return np.asarray(self._select(ranked, m), dtype=np.int32)

    def build(self) -> None:
        idx = self.index
        n = len(idx.ids)
        levels = np.floor(-np.log(1.0 - self.rng.random(n)) * self.mult).astype(np.int64)
        levels = np.minimum(levels, 255)
        idx.levels = levels
        graph: list[dict] = []
        X = self.X
        M, M0 = self.p.M, 2 * self.p.M
        entry, top = -1, -1
        for node in range(n):
            lvl = int(levels[node])
            while len(graph) <= lvl:
                graph.append({})
            for layer in range(lvl + 1):
                graph[layer][node] = np.zeros(0, dtype=np.int32)
            if entry < 0:
                entry, top = node, lvl
                continue
            q = X[node]
            ep, ep_score = entry, float(X[entry] @ q)
            for layer in range(top, lvl, -1):
                ep, ep_score = _greedy(X, graph[layer], q, ep, ep_score)
            eps = [(ep_score, ep)]
            for layer in range(min(lvl, top), -1, -1):
                found = _search_layer(X, graph[layer], q, eps, self.p.ef_construction)
                found = [(s, c) for s, c in found if c != node]
                neighbours = self._select(found, M)
                graph[layer][node] = np.asarray(neighbours, dtype=np.int32)
                cap = M0 if layer == 0 else M
                for nb in neighbours:
                    lst = graph[layer][nb]
                    if node in lst:
                        continue
                    lst = np.append(lst, np.int32(node))
                    if len(lst) > cap:
                        lst = self._shrink(nb, lst, cap)
                    graph[layer][nb] = lst
                eps = found
            if lvl > top:
                entry, top = node, lvl
        idx.graph = graph
        idx.entry_point = entry


def build_exact(catalog, encoder_params, storage: str = "float32") -> EntityIndex:
    from .encoder import encode_entities

    records = list(catalog)
    if not records:
        raise ValueError("catalog is empty")
    _check_unique(records)
    return EntityIndex.exact([r.entity_id for r in records], encode_entities(records, encoder_params), storage)


def build_approximate(catalog, encoder_params, build_params: HNSWParams = HNSWParams(),
                      storage: str = "float32") -> EntityIndex:
    from .encoder import encode_entities

    records = list(catalog)
    if not records:
        raise ValueError("catalog is empty")
    _check_unique(records)
    vectors = encode_entities(records, encoder_params)
    return EntityIndex.hnsw([r.entity_id for r in records], vectors, build_params, storage)


def _check_unique(records) -> None:
    seen = set()
    for r in records:
        if r.entity_id in seen:
            raise ValueError(f"duplicate entity id {r.entity_id!r} in catalog")
        seen.add(r.entity_id)
