"""Command-line entry point.

Subcommands: ``gen-synth``, ``build-index``, ``train``, ``link``, ``eval``
and ``sweep``.  Every output file gets a ``<output>.manifest.json`` next to
it (``manifest.json`` inside the directory for ``gen-synth``) recording the
command, the resolved configuration, input and output hashes and the wall
clock duration.  Errors go to standard error prefixed with ``entitylink: `` and
exit with status 1.

Settings may come from a ``key = value`` file given by ``--config``; flags
override it.  Recognised keys::

    dim context_window vocab_hash_buckets encoder_seed hidden
    learning_rate batch_size epochs hard_negatives_per_positive seed optimizer
    beta gamma max_seq_len window_overlap max_mention_len k
    M ef_construction ef_search storage
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from . import __version__
from .data import read_catalog, read_corpus, write_catalog, write_corpus
from .encoder import EncoderConfig, _atomic_write
from .evaluation import ed_accuracy, evaluate, format_report, underlabeling_report
from .index import EntityIndex, HNSWParams, build_approximate, build_exact
from .model import init_model, load_model, save_model
from .pipeline import (
    LinkerConfig,
    LinkStats,
    link_corpus,
    parse_grid,
    sweep_gamma,
    write_predictions,
    write_sweep_csv,
)
from .synthetic import generate_synthetic_corpus, split_corpus
from .training import STAGES, TrainConfig, train, write_report_csv

__all__ = ["main", "RunManifest", "read_config_file", "CliError"]

_CONFIG_TYPES = {
    "dim": int,
    "context_window": int,
    "vocab_hash_buckets": int,
    "encoder_seed": int,
    "hidden": int,
    "learning_rate": float,
    "batch_size": int,
    "epochs": int,
    "hard_negatives_per_positive": int,
    "seed": int,
    "optimizer": str,
    "beta": float,
    "gamma": float,
    "max_seq_len": int,
    "window_overlap": int,
    "max_mention_len": int,
    "k": int,
    "M": int,
    "ef_construction": int,
    "ef_search": int,
    "storage": str,
}


class CliError(Exception):
    """A user-facing error; the message is printed after ``entitylink: ``."""


def read_config_file(path: Optional[str]) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    if path is None:
        return {}
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _CONFIG_TYPES:
                raise CliError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                out[key] = _CONFIG_TYPES[key](value)
            except ValueError:
                raise CliError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return out


def _settings(args) -> dict:
    """Config file values overridden by any flag the user actually set."""
    conf = read_config_file(getattr(args, "config", None))
    for key in _CONFIG_TYPES:
        value = getattr(args, key, None)
        if value is not None:
            conf[key] = value
    return conf


def _encoder_config(conf: dict) -> EncoderConfig:
    base = EncoderConfig()
    return EncoderConfig(dim=conf.get("dim", base.dim), context_window=conf.get("context_window", base.context_window),
                         vocab_hash_buckets=conf.get("vocab_hash_buckets", base.vocab_hash_buckets),
                         seed=conf.get("encoder_seed", base.seed))


def _linker_config(conf: dict) -> LinkerConfig:
    names = ("beta", "gamma", "max_seq_len", "window_overlap", "max_mention_len", "k")
    return LinkerConfig(**{n: conf[n] for n in names if n in conf})


# ---------------------------------------------------------------------------
# manifests


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: dict = field(default_factory=dict)  # path -> sha256
    seed: Optional[int] = None
    duration_seconds: float = 0.0
    version: str = __version__

    def add_inputs(self, *paths) -> None:
        for p in paths:
            if p is not None:
                self.inputs[p] = file_sha256(p)

    def add_outputs(self, *paths) -> None:
        for p in paths:
            self.outputs[p] = file_sha256(p)

    def save(self, path: str) -> None:
        _atomic_write(path, (json.dumps(asdict(self), indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _manifest_path(output: str) -> str:
    return output + ".manifest.json"


def _write_via_tmp(path: str, writer) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    writer(tmp)
    os.replace(tmp, path)


def _check_output(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise CliError(f"{path} exists; pass --force to overwrite")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> int:
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise CliError(f"{out} is not empty; pass --force to overwrite")
    t0 = time.perf_counter()
    catalog, corpus = generate_synthetic_corpus(args.entities, args.passages, args.seed)
    train_c, dev_c, test_c = split_corpus(corpus, args.seed)
    os.makedirs(out, exist_ok=True)
    paths = {name: os.path.join(out, f"{name}.jsonl") for name in ("catalog", "train", "dev", "test")}
    _write_via_tmp(paths["catalog"], lambda p: write_catalog(catalog, p))
    for name, part in (("train", train_c), ("dev", dev_c), ("test", test_c)):
        _write_via_tmp(paths[name], lambda p, part=part: write_corpus(part, p))
    man = RunManifest("gen-synth", {"entities": args.entities, "passages": args.passages}, seed=args.seed)
    man.add_outputs(*paths.values())
    man.duration_seconds = time.perf_counter() - t0
    man.save(os.path.join(out, "manifest.json"))
    print(f"wrote {len(catalog)} entities, {len(train_c)}/{len(dev_c)}/{len(test_c)} train/dev/test passages to {out}")
    return 0


def cmd_build_index(args) -> int:
    conf = _settings(args)
    _check_output(args.out, args.force)
    t0 = time.perf_counter()
    catalog = read_catalog(args.catalog)
    model = load_model(args.model)
    storage = conf.get("storage", "float32")
    if args.kind == "exact":
        index = build_exact(catalog, model.entity_encoder, storage)
    else:
        base = HNSWParams()
        params = HNSWParams(M=conf.get("M", base.M), ef_construction=conf.get("ef_construction", base.ef_construction),
                            ef_search=conf.get("ef_search", base.ef_search), seed=conf.get("seed", base.seed))
        conf.update(asdict(params))
        index = build_approximate(catalog, model.entity_encoder, params, storage)
    index.save(args.out)
    man = RunManifest("build-index", {"kind": args.kind, "storage": storage, **conf}, seed=conf.get("seed"))
    man.add_inputs(args.catalog, args.model)
    man.add_outputs(args.out)
    man.duration_seconds = time.perf_counter() - t0
    man.save(_manifest_path(args.out))
    print(f"{args.kind} index over {len(index)} entities (d={index.dim}) written to {args.out}")
    return 0


def cmd_train(args) -> int:
    conf = _settings(args)
    _check_output(args.out, args.force)
    t0 = time.perf_counter()
    names = ("learning_rate", "batch_size", "epochs", "hard_negatives_per_positive", "seed", "optimizer")
    config = TrainConfig(stage=args.stage, from_scratch=args.from_scratch, **{n: conf[n] for n in names if n in conf})
    corpus = read_corpus(args.corpus)
    catalog = read_catalog(args.catalog)
    if args.init is not None:
        model = load_model(args.init)
    elif args.stage == "end_to_end" and not args.from_scratch:
        raise CliError("end_to_end needs --init with parameters from an ED stage "
                       "(order: ed_inbatch -> ed_hard -> end_to_end), or --from-scratch")
    else:
        model = init_model(_encoder_config(conf), conf.get("hidden", 128), seed=config.seed)
    if args.stage == "end_to_end" and args.from_scratch:
        print("entitylink: warning: training end_to_end from scratch; the entity encoder was not pre-trained",
              file=sys.stderr)
    report = train(config, corpus, catalog, model)
    save_model(report.model, args.out)
    report_path = args.report or args.out + ".report.csv"
    _write_via_tmp(report_path, lambda p: write_report_csv(report, p))
    man = RunManifest("train", {**asdict(config), **asdict(model.mention_encoder.config)}, seed=config.seed)
    man.add_inputs(args.corpus, args.catalog, args.init)
    man.add_outputs(args.out, report_path)
    man.duration_seconds = time.perf_counter() - t0
    man.save(_manifest_path(args.out))
    for e in report.epochs:
        print(f"{config.stage} epoch {e.epoch}: md={e.md_loss:.4f} ed={e.ed_loss:.4f} r={e.r_loss:.4f} "
              f"total={e.total:.4f}")
    return 0


def _load_model_and_index(args):
    model = load_model(args.model)
    index = EntityIndex.load(args.index)
    if index.dim != model.dim:
        raise CliError(f"dimension mismatch: model {args.model} has d={model.dim}, index {args.index} has "
                       f"d={index.dim}")
    return model, index


def cmd_link(args) -> int:
    conf = _settings(args)
    _check_output(args.out, args.force)
    t0 = time.perf_counter()
    config = _linker_config(conf)
    passages = read_corpus(args.input)
    model, index = _load_model_and_index(args)
    stats = LinkStats()
    start = time.perf_counter()
    preds = link_corpus(passages, model, index, config, threads=args.threads, stats=stats)
    elapsed = time.perf_counter() - start
    _write_via_tmp(args.out, lambda p: write_predictions(preds, p))
    man = RunManifest("link", asdict(config), seed=None)
    man.add_inputs(args.input, args.model, args.index)
    man.add_outputs(args.out)
    man.duration_seconds = time.perf_counter() - t0
    man.save(_manifest_path(args.out))
    n_mentions = sum(len(v) for v in preds.values())
    rate = len(passages) / elapsed if elapsed > 0 else float("inf")
    print(f"linked {len(passages)} passages, {n_mentions} mentions, {stats.windows} windows, "
          f"{stats.encoder_calls} encoder calls; throughput {rate:.1f} passages/sec")
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    gold_passages = read_corpus(args.gold)
    gold = {p.id: p.mentions for p in gold_passages}
    languages = {p.id: p.language for p in gold_passages if p.language}
    out = {}
    if args.ed_only:
        if args.model is None or args.index is None:
            raise CliError("--ed-only needs --model and --index")
        model, index = _load_model_and_index(args)
        acc = ed_accuracy(model, index, gold_passages)
        out["ed_accuracy"] = asdict(acc)
        shown = "-" if acc.accuracy is None else f"{acc.accuracy:.4f}"
        print(f"ED accuracy (gold spans): {shown} over {acc.num_evaluated} mentions "
              f"({acc.num_unreachable} unaligned gold spans skipped)")
    if args.pred is not None:
        from .pipeline import read_predictions

        pred = read_predictions(args.pred)
        extra, missing = sorted(set(pred) - set(gold)), sorted(set(gold) - set(pred))
        if extra or missing:
            raise CliError("passage ids differ between predictions and gold; "
                           f"only in predictions: {extra[:20]}; only in gold: {missing[:20]}")
        report = evaluate(pred, gold, languages or None)
        out.update(report.to_json())
        print(format_report(report))
        if args.audit:
            rows = underlabeling_report(pred, gold)
            out["audit"] = rows
            print(f"\n{len(rows)} unmatched predictions (highest MD probability first):")
            for r in rows:
                print(f"  {r['id']} [{r['start']}, {r['end']}) {r['entity_id']} md={r['md']:.3f} "
                      f"gold_frequency={r['gold_frequency']} ({r['frequency_bucket']})")
    elif not args.ed_only:
        raise CliError("eval needs --pred (or --ed-only with --model and --index)")
    if args.out:
        _check_output(args.out, args.force)
        _atomic_write(args.out, (json.dumps(out, indent=2, sort_keys=True) + "\n").encode("utf-8"))
        man = RunManifest("eval", {"ed_only": args.ed_only, "audit": args.audit})
        man.add_inputs(args.gold, args.pred, args.model if args.ed_only else None,
                       args.index if args.ed_only else None)
        man.add_outputs(args.out)
        man.duration_seconds = time.perf_counter() - t0
        man.save(_manifest_path(args.out))
    return 0


def cmd_sweep(args) -> int:
    conf = _settings(args)
    _check_output(args.out, args.force)
    t0 = time.perf_counter()
    try:
        grid = parse_grid(args.grid)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    config = _linker_config(conf)
    dev = read_corpus(args.dev)
    model, index = _load_model_and_index(args)
    result = sweep_gamma(dev, model, index, grid, config, threads=args.threads)
    _write_via_tmp(args.out, lambda p: write_sweep_csv(result, p))
    man = RunManifest("sweep", {**asdict(config), "grid": args.grid})
    man.add_inputs(args.dev, args.model, args.index)
    man.add_outputs(args.out)
    man.duration_seconds = time.perf_counter() - t0
    man.save(_manifest_path(args.out))
    best = result.best
    print(f"best gamma {best.gamma:g}: F1 {best.f1:.4f} "
          f"(P {best.precision if best.precision is not None else float('nan'):.4f}, "
          f"R {best.recall if best.recall is not None else float('nan'):.4f})")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="key = value settings file; flags override it")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entitylink", description="Desk-scale bi-encoder entity linker.")
    parser.add_argument("--version", action="version", version=f"entitylink {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic catalog and train/dev/test corpora",
                       description="Writes catalog.jsonl, train.jsonl, dev.jsonl and test.jsonl (80/10/10 split). "
                                   "Corpus lines: {id, text, language, mentions: [{start, end, entity_id}]}; "
                                   "catalog lines: {entity_id, titles, descriptions, mention_counts}.")
    p.add_argument("--entities", type=int, required=True)
    p.add_argument("--passages", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p, config=False)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("build-index", help="encode a catalog and build an entity index",
                       description="Index file: BELAIDX1 header, ids, float32 or int8 vectors and, for hnsw, "
                                   "the neighbour graph.")
    p.add_argument("--catalog", required=True)
    p.add_argument("--model", required=True, help="model parameters file")
    p.add_argument("--kind", choices=("exact", "hnsw"), default="exact")
    p.add_argument("--storage", choices=("float32", "int8"))
    p.add_argument("--M", type=int, dest="M")
    p.add_argument("--ef-construction", type=int, dest="ef_construction")
    p.add_argument("--ef-search", type=int, dest="ef_search")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("train", help="run one training stage",
                       description=f"Stages run in the order {' -> '.join(STAGES)}. Writes the model file "
                                   "(BELAENC1 container) and a CSV report epoch,md_loss,ed_loss,r_loss,total.")
    p.add_argument("--stage", choices=STAGES, required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--init", help="parameters from the previous stage")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="CSV report path (default: OUT.report.csv)")
    p.add_argument("--from-scratch", action="store_true", help="allow end_to_end without a prior ED stage")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--seed", type=int)
    p.add_argument("--dim", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("link", help="link every passage of a corpus file",
                       description="Output lines: {id, mentions: [{start, end, entity_id, md, ed, r}]} with "
                                   "character offsets.")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_link)

    p = sub.add_parser("eval", help="score predictions against gold",
                       description="Prints a per-language table and writes a JSON report with --out.")
    p.add_argument("--pred")
    p.add_argument("--gold", required=True)
    p.add_argument("--ed-only", action="store_true", help="ED accuracy on gold spans (needs --model, --index)")
    p.add_argument("--model")
    p.add_argument("--index")
    p.add_argument("--audit", action="store_true", help="list unmatched predictions for label auditing")
    p.add_argument("--out")
    _add_common(p, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="precision/recall at each rejection threshold",
                       description="Output CSV header: gamma,precision,recall,f1,num_predictions.")
    p.add_argument("--dev", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--grid", default="0:1:0.05", help='"start:stop:step" (inclusive) or a comma list')
    p.add_argument("--beta", type=float)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "threads", 1) < 1:
            raise CliError("--threads must be >= 1")
        return args.func(args)
    except CliError as exc:
        print(f"entitylink: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"entitylink: no such file: {exc.filename}", file=sys.stderr)
    except (OSError, ValueError) as exc:
        print(f"entitylink: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
