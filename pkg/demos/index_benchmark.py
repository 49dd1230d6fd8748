"""Compare the exact and graph-based entity indexes on random unit vectors.

    python3 demos/index_benchmark.py [--n 10000] [--dim 64] [--queries 500]

Prints build time, per-query latency and recall against exhaustive search
for several ef_search values, with float32 and int8 storage.
"""

import argparse
import time

import numpy as np

from entitylink.index import EntityIndex, HNSWParams


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def recall_at(found, truth, k):
    return np.mean([len({e for e, _ in f[:k]} & {e for e, _ in t[:k]}) / k for f, t in zip(found, truth)])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--queries", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    X, Q = unit_rows(rng, args.n, args.dim), unit_rows(rng, args.queries, args.dim)
    ids = [f"E{k}" for k in range(args.n)]

    exact = EntityIndex.exact(ids, X)
    t0 = time.perf_counter()
    truth = exact.search_batch(Q, 10)
    print(f"exact: {1e3 * (time.perf_counter() - t0) / args.queries:.2f} ms/query")

    for storage in ("float32", "int8"):
        t0 = time.perf_counter()
        graph = EntityIndex.hnsw(ids, X, HNSWParams(M=16, ef_construction=100, seed=args.seed), storage=storage)
        print(f"\ngraph index, {storage} storage, built in {time.perf_counter() - t0:.1f}s, "
              f"{len(graph.to_bytes()) / 1e6:.1f} MB on disk")
        print("  ef_search  ms/query  recall@1  recall@10")
        for ef in (16, 32, 64, 128, 256):
            t0 = time.perf_counter()
            found = graph.search_batch(Q, 10, ef_search=ef)
            ms = 1e3 * (time.perf_counter() - t0) / args.queries
            print(f"  {ef:9d}  {ms:8.2f}  {recall_at(found, truth, 1):8.3f}  {recall_at(found, truth, 10):9.3f}")


if __name__ == "__main__":
    main()
