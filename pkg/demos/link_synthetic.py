"""Train the linker on a synthetic corpus, pick gamma on dev, link the test set.

    python3 demos/link_synthetic.py [--entities 200] [--passages 2000] [--seed 7]

Runs the three training stages in order, prints per-epoch losses, the dev
precision/recall curve over gamma and test-set scores, then shows the
linked mentions of a few test passages.
"""

import argparse
import logging
import time

from entitylink.encoder import EncoderConfig
from entitylink.evaluation import e2e_prf, ed_accuracy, md_recall
from entitylink.model import init_model
from entitylink.pipeline import LinkerConfig, LinkStats, link_corpus, sweep_gamma
from entitylink.synthetic import generate_synthetic_corpus, split_corpus
from entitylink.training import EntityTable, TrainConfig, train_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--entities", type=int, default=200)
    ap.add_argument("--passages", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--beta", type=float, default=0.1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="  %(message)s")

    catalog, corpus = generate_synthetic_corpus(args.entities, args.passages, seed=args.seed)
    train_c, dev_c, test_c = split_corpus(corpus, args.seed)
    print(f"{len(catalog)} entities; {len(train_c)}/{len(dev_c)}/{len(test_c)} train/dev/test passages")
    print("sample passage:", train_c[0].text)

    t0 = time.perf_counter()
    model = init_model(EncoderConfig(dim=128, context_window=2), seed=args.seed)
    stages = [TrainConfig("ed_inbatch", 3e-2, 32, 3, seed=args.seed),
              TrainConfig("ed_hard", 3e-2, 32, 7, seed=args.seed),
              TrainConfig("end_to_end", 1e-2, 32, 20, seed=args.seed)]
    reports = train_pipeline(stages, train_c, catalog, model)
    model = reports[-1].model
    print(f"training took {time.perf_counter() - t0:.0f}s")
    for rep in reports:
        print(f"  {rep.stage:<11} total loss {rep.totals[0]:.3f} -> {rep.totals[-1]:.3f}")

    index = EntityTable(catalog, model.entity_encoder.config).index(model)
    cfg = LinkerConfig(beta=args.beta)
    sweep = sweep_gamma(dev_c, model, index, [k / 10 for k in range(11)], cfg)
    print("\ndev gamma sweep")
    print("  gamma  precision  recall  f1")
    for p in sweep.points:
        prec = "   -   " if p.precision is None else f"{p.precision:7.3f}"
        print(f"  {p.gamma:5.2f}  {prec}  {p.recall:7.3f}  {p.f1:.3f}")
    gamma = sweep.best_gamma

    stats = LinkStats()
    candidates = link_corpus(test_c, model, index, cfg, gate=False, stats=stats)
    preds = {pid: [m for m in ms if m.rejection_score > gamma] for pid, ms in candidates.items()}
    gold = {p.id: p.mentions for p in test_c}
    prf = e2e_prf(preds, gold)
    print(f"\ntest: ED accuracy with gold spans {ed_accuracy(model, index, test_c).accuracy:.3f}, "
          f"span recall {md_recall(candidates, gold):.3f}, "
          f"P/R/F1 {prf.precision:.3f}/{prf.recall:.3f}/{prf.f1:.3f} at gamma={gamma}")
    print(f"linking throughput {stats.passages / stats.seconds:.0f} passages/sec")

    titles = {r.entity_id: r.title for r in catalog}
    for p in test_c[:3]:
        print("\n" + p.text)
        for m in preds[p.id]:
            print(f"  [{p.text[m.start:m.end]}] -> {m.entity_id} ({titles[m.entity_id]}), r={m.rejection_score:.2f}")


if __name__ == "__main__":
    main()
