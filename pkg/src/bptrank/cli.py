"""Command-line entry point: ``bptrank <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import corpus as cp
from . import evalbench as eb
from . import mining as mn
from .config import PipelineConfig
from .errors import BptRankError, ConfigError, ParseError
from .model import RESERVED, CrossEncoder, Vocab, build_vocab, load_checkpoint, save_checkpoint, score_pairs
from .pipeline import EvalSet, bm25_scorer, load_documents, run_toy
from .training import train

log = logging.getLogger("bptrank")

EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 1, 2, 3

COMMANDS = ("normalize", "chunk", "mine", "train", "rerank", "eval", "bench", "all")


class MissingInput(BptRankError):
    pass


def _need(path, what):
    if path is None:
        raise MissingInput(f"{what}: no path given")
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"{what}: {p} does not exist")
    return p


def _common(p):
    p.add_argument("--config", metavar="PATH", help="INI config file layered over the preset")
    p.add_argument("--set", metavar="K=V", action="append", default=[], dest="overrides",
                   help="override one key, e.g. train.epochs=5 (repeatable)")
    p.add_argument("--preset", choices=("paper", "toy"), default="toy")
    p.add_argument("--seed", type=int, help="shorthand for --set pipeline.seed=N")
    p.add_argument("--out", metavar="DIR", help="output directory (default: paths.out)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="bptrank", description="Blockwise-attention cross-encoder reranking pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("normalize", help="NFC + tone-placement normalization of a document file")
    p.add_argument("--input", required=True, help="documents JSONL {id, source, text}")
    p = sub.add_parser("chunk", help="segment and chunk documents")
    p.add_argument("--input", help="documents JSONL (default: bundled toy corpus)")
    p = sub.add_parser("mine", help="mine BM25 + dense + MMR hard-negative triplets")
    p.add_argument("--input", required=True, help="chunks JSONL from the chunk command")
    p.add_argument("--model", help="checkpoint providing embeddings (default: untrained encoder)")
    p = sub.add_parser("train", help="train a cross-encoder on triplets")
    p.add_argument("--input", required=True, help="triplets JSONL")
    p.add_argument("--model", help="checkpoint to continue from (default: fresh model)")
    p = sub.add_parser("rerank", help="score and sort candidates for one query")
    p.add_argument("--model", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--candidates", required=True, help="JSONL {id, text}")
    p = sub.add_parser("eval", help="NDCG@k / MRR@k of a checkpoint and BM25 on explicit candidates")
    p.add_argument("--model", required=True)
    p.add_argument("--candidates", required=True, help="JSONL {query_id, query, candidates}")
    p.add_argument("--qrels", required=True, help="TSV query_id, chunk_id, grade")
    p.add_argument("--texts", required=True, help="JSONL {id, text} for every candidate id")
    p = sub.add_parser("bench", help="latency / memory / throughput report")
    p.add_argument("--model", help="checkpoint (default: untrained model of the preset shape)")
    sub.add_parser("all", help="toy end-to-end run on the bundled corpus")
    for name, sp in sub.choices.items():
        _common(sp)
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = PipelineConfig.preset(args.preset)
    if args.config:
        cfg = PipelineConfig.load(_need(args.config, "--config"), base=cfg)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"pipeline.seed={args.seed}")
    if args.out:
        overrides.append(f"paths.out={args.out}")
    return cfg.with_overrides(overrides).validate()


def _read_texts(path):
    texts = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            texts[str(obj["id"])] = obj["text"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"bad record: {exc}", n) from None
    return texts


def _load_model(path):
    return load_checkpoint(_need(path, "--model").read_bytes())


# ------------------------------------------------------------- commands


def cmd_normalize(args, cfg, out):
    docs = cp.read_documents(_need(args.input, "--input"))
    norm = [cp.RawDocument(d.id, d.source, cp.spell_correct(cp.normalize_text(d.text))) for d in docs]
    path = out / "normalized.jsonl"
    cp.write_documents(norm, path)
    return {"normalized": path}


def cmd_chunk(args, cfg, out):
    docs = cp.read_documents(_need(args.input, "--input")) if args.input else load_documents(cfg.get("paths.corpus") or None)
    c = cfg.values["corpus"]
    chunks, discards = cp.prepare_chunks(docs, c["min_len"], c["max_len"])
    paths = {"chunks": out / "chunks.jsonl", "discards": out / "discards.tsv"}
    cp.write_chunks(chunks, paths["chunks"])
    cp.write_discards(discards, paths["discards"])
    print(f"{len(chunks)} chunks, {len(discards)} discards")
    return paths


def cmd_mine(args, cfg, out):
    chunks = cp.read_chunks(_need(args.input, "--input"))
    if args.model:
        model = _load_model(args.model)
    else:
        vocab = build_vocab([c.text for c in chunks], cfg.get("corpus.vocab_max"))
        model = CrossEncoder.initialize(cfg.model_config(vocab.size), vocab, cfg.get("pipeline.seed"))
    index = mn.bm25_build(chunks, cfg.get("mining.k1"), cfg.get("mining.b"))
    skips = []
    records = mn.mine_triplets(chunks, index, mn.ModelEmbedder(model), cfg.mining_config(), cfg.get("pipeline.seed"),
                               skips, workers=cfg.get("mining.workers"))
    paths = {"triplets": out / "triplets.jsonl", "skips": out / "skips.txt"}
    mn.write_triplets(records, paths["triplets"])
    paths["skips"].write_text("".join(s + "\n" for s in skips), encoding="utf-8")
    print(f"{len(records)} triplets, {len(skips)} skipped")
    return paths


def cmd_train(args, cfg, out):
    records = mn.read_triplets(_need(args.input, "--input"))
    seed = cfg.get("pipeline.seed")
    if args.model:
        model = _load_model(args.model)
    else:
        texts = [t for r in records for t in (r.query, *r.pos, *r.neg)]
        vocab = build_vocab(texts, cfg.get("corpus.vocab_max"))
        model = CrossEncoder.initialize(cfg.model_config(vocab.size), vocab, seed)
    trained, trace = train(model, records, cfg.train_config())
    paths = {"model": out / "model.ckpt", "loss": out / "loss.csv"}
    paths["model"].write_bytes(save_checkpoint(trained))
    paths["loss"].write_text(trace.to_csv(), encoding="utf-8")
    means = trace.epoch_means()
    print(f"epoch mean loss {means[0]:.4f} -> {means[-1]:.4f}")
    return paths


def cmd_rerank(args, cfg, out):
    model = _load_model(args.model)
    cands = _read_texts(_need(args.candidates, "--candidates"))
    ids = list(cands)
    scores = score_pairs(model, [(args.query, cands[i]) for i in ids], cfg.get("eval.batch_size"))
    ranked = eb.rank(ids, scores)
    lines = [f"{n}\t{cid}\t{s:.6f}" for n, (cid, s) in enumerate(ranked, 1)]
    print("\n".join(lines))
    path = out / "reranked.tsv"
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return {"reranked": path}


def cmd_eval(args, cfg, out):
    model = _load_model(args.model)
    queries, cands = eb.read_candidates(_need(args.candidates, "--candidates"))
    qrels = eb.read_qrels(_need(args.qrels, "--qrels"))
    texts = _read_texts(_need(args.texts, "--texts"))
    ks, seeds = cfg.get("eval.ks"), cfg.get("eval.seeds")
    index = mn.bm25_build([cp.Chunk(cid, cid, (t,), 0) for cid, t in sorted(texts.items())],
                          cfg.get("mining.k1"), cfg.get("mining.b"))
    evalset = EvalSet(queries, cands, qrels, texts)
    reports = [
        eb.evaluate(lambda s: eb.model_scorer(model, texts, cfg.get("eval.batch_size")), queries, cands, qrels, ks,
                    seeds, "model", cfg.get("eval.workers")),
        eb.evaluate(lambda s: bm25_scorer(index, evalset.texts), queries, cands, qrels, ks, seeds, "bm25"),
    ]
    return _write_reports(reports, out)


def _write_reports(reports, out):
    table = "NDCG\n" + eb.format_table(reports, "ndcg") + "\nMRR\n" + eb.format_table(reports, "mrr")
    print(table, end="")
    paths = {"metrics_table": out / "metrics.txt", "metrics_json": out / "metrics.json"}
    paths["metrics_table"].write_text(table, encoding="utf-8")
    paths["metrics_json"].write_text(eb.reports_to_json(reports), encoding="utf-8")
    return paths


def cmd_bench(args, cfg, out):
    if args.model:
        model = _load_model(args.model)
    else:
        vocab = Vocab(list(RESERVED) + [f"w{i}" for i in range(2000)])
        model = CrossEncoder.initialize(cfg.model_config(vocab.size), vocab, cfg.get("pipeline.seed"))
    b = cfg.values["bench"]
    report = eb.bench(model, b["batch_size"], b["n_queries"], b["hardware"], seed=cfg.get("pipeline.seed"))
    print(report.to_table(), end="")
    paths = {"bench_csv": out / "bench.csv", "bench_table": out / "bench.txt", "bench_json": out / "bench.json"}
    paths["bench_csv"].write_text(report.to_csv(), encoding="utf-8")
    paths["bench_table"].write_text(report.to_table(), encoding="utf-8")
    paths["bench_json"].write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def cmd_all(args, cfg, out):
    result = run_toy(cfg, out, progress=lambda msg: print(msg, flush=True))
    print(Path(result.artifacts["metrics_table"]).read_text(encoding="utf-8"), end="")
    for s in result.traces:
        print(f"seed {s}: final/first epoch loss = {result.loss_ratio(s):.4f}")
    return result.artifacts


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def write_manifest(out, command, cfg, artifacts):
    manifest = {
        "command": command,
        "config_version": cfg.get("pipeline.version"),
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "artifacts": {k: str(v) for k, v in sorted(artifacts.items())},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.get("paths.out"))
        out.mkdir(parents=True, exist_ok=True)
        artifacts = HANDLERS[args.command](args, cfg, out)
        write_manifest(out, args.command, cfg, artifacts)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInput, FileNotFoundError) as exc:
        print(f"error[missing-input]: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (BptRankError, OSError, ValueError) as exc:
        print(f"error[runtime:{type(exc).__name__}]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
