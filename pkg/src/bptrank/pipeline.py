"""Stage orchestration shared by the command line and the acceptance suite."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import corpus as cp
from . import evalbench as eb
from . import mining as mn
from .config import PipelineConfig
from .model import CrossEncoder, build_vocab, save_checkpoint
from .training import train

log = logging.getLogger(__name__)


def bundled_corpus_path():
    return resources.files("bptrank").joinpath("data/toy_corpus.jsonl")


def load_documents(path=None):
    if path:
        return cp.read_documents(path)
    with resources.as_file(bundled_corpus_path()) as p:
        return cp.read_documents(p)


def heldout_docs(doc_ids, every):
    """Every ``every``-th document in id order is held out from training."""
    return {d for i, d in enumerate(sorted(doc_ids)) if i % every == every - 1}


@dataclass
class EvalSet:
    queries: dict
    candidates: dict
    qrels: dict
    texts: dict

    @classmethod
    def from_records(cls, records):
        """One query per record: its positive (graded 1) among its negatives."""
        queries, cands, qrels, texts = {}, {}, {}, {}
        for r in records:
            qid = r.source_id
            pid = f"{qid}#pos"
            queries[qid] = r.query
            texts[pid] = r.pos[0]
            for cid, text in zip(r.neg_ids, r.neg):
                texts[cid] = text
            cands[qid] = [pid, *r.neg_ids]
            qrels[qid] = {pid: 1}
        return cls(queries, cands, qrels, texts)


def bm25_scorer(index, texts):
    def scorer(query, cids):
        return [index.score_text(query, texts[c]) for c in cids]

    return scorer


@dataclass
class RunResult:
    reports: list
    traces: dict
    artifacts: dict = field(default_factory=dict)
    n_train: int = 0
    n_heldout: int = 0
    models: dict = field(default_factory=dict)
    heldout_records: list = field(default_factory=list)
    chunks: list = field(default_factory=list)

    def loss_ratio(self, seed):
        means = self.traces[seed].epoch_means()
        return means[-1] / means[0]

    def report(self, name):
        return next(r for r in self.reports if r.name == name)


def run_toy(cfg: PipelineConfig, out_dir=None, documents=None, progress=None) -> RunResult:
    """normalize -> chunk -> mine -> train per seed -> evaluate against baselines.

    Mining uses an untrained encoder seeded with ``pipeline.seed``. Documents
    selected by :func:`heldout_docs` supply the evaluation queries; their
    triplets are never trained on.
    """
    say = progress or (lambda msg: None)
    docs = documents if documents is not None else load_documents(cfg.get("paths.corpus") or None)
    c = cfg.values["corpus"]
    chunks, discards = cp.prepare_chunks(docs, c["min_len"], c["max_len"])
    say(f"chunked {len(docs)} documents into {len(chunks)} chunks ({len(discards)} discards)")
    vocab = build_vocab([ch.text for ch in chunks], c["vocab_max"])
    mcfg = cfg.model_config(vocab.size)
    seed = cfg.get("pipeline.seed")
    index = mn.bm25_build(chunks, cfg.get("mining.k1"), cfg.get("mining.b"))
    miner = CrossEncoder.initialize(mcfg, vocab, seed)
    skips = []
    records = mn.mine_triplets(chunks, index, mn.ModelEmbedder(miner), cfg.mining_config(), seed, skips,
                               workers=cfg.get("mining.workers"))
    say(f"mined {len(records)} triplets ({len(skips)} skipped)")

    doc_of = {ch.id: ch.doc_id for ch in chunks}
    held = heldout_docs({d.id for d in docs}, cfg.get("pipeline.heldout_every"))
    train_recs = [r for r in records if doc_of[r.source_id] not in held]
    test_recs = [r for r in records if doc_of[r.source_id] in held]
    evalset = EvalSet.from_records(test_recs)

    traces, models = {}, {}
    for s in cfg.get("eval.seeds"):
        init = CrossEncoder.initialize(mcfg, vocab, s)
        trained, trace = train(init, train_recs, cfg.train_config(seed=s))
        means = trace.epoch_means()
        say(f"seed {s}: epoch loss {means[0]:.4f} -> {means[-1]:.4f}")
        traces[s], models[s] = trace, (init, trained)

    ks, seeds, workers = cfg.get("eval.ks"), cfg.get("eval.seeds"), cfg.get("eval.workers")
    bs = cfg.get("eval.batch_size")
    args = (evalset.queries, evalset.candidates, evalset.qrels, ks, seeds)
    reports = [
        eb.evaluate(lambda s: eb.model_scorer(models[s][1], evalset.texts, bs), *args, name="trained", workers=workers),
        eb.evaluate(lambda s: eb.model_scorer(models[s][0], evalset.texts, bs), *args, name="untrained", workers=workers),
        eb.evaluate(lambda s: bm25_scorer(index, evalset.texts), *args, name="bm25", workers=workers),
    ]
    result = RunResult(reports, traces, n_train=len(train_recs), n_heldout=len(test_recs), models=models,
                       heldout_records=test_recs, chunks=chunks)
    if out_dir is not None:
        result.artifacts = _write_artifacts(Path(out_dir), chunks, discards, records, skips, evalset, result)
    return result


def _write_artifacts(out, chunks, discards, records, skips, evalset, result):
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "chunks": out / "chunks.jsonl",
        "discards": out / "discards.tsv",
        "triplets": out / "triplets.jsonl",
        "skips": out / "skips.txt",
        "candidates": out / "heldout_candidates.jsonl",
        "qrels": out / "heldout_qrels.tsv",
        "texts": out / "heldout_texts.jsonl",
        "metrics_json": out / "metrics.json",
        "metrics_table": out / "metrics.txt",
    }
    cp.write_chunks(chunks, paths["chunks"])
    cp.write_discards(discards, paths["discards"])
    mn.write_triplets(records, paths["triplets"])
    paths["skips"].write_text("".join(s + "\n" for s in skips), encoding="utf-8")
    eb.write_candidates(evalset.queries, evalset.candidates, paths["candidates"])
    eb.write_qrels(evalset.qrels, paths["qrels"])
    with open(paths["texts"], "w", encoding="utf-8") as fh:
        for cid in sorted(evalset.texts):
            fh.write(json.dumps({"id": cid, "text": evalset.texts[cid]}, ensure_ascii=False) + "\n")
    for s, trace in result.traces.items():
        p = out / f"loss_seed{s}.csv"
        p.write_text(trace.to_csv(), encoding="utf-8")
        paths[f"loss_seed{s}"] = p
        p = out / f"model_seed{s}.ckpt"
        p.write_bytes(save_checkpoint(result.models[s][1]))
        paths[f"model_seed{s}"] = p
    summary = {
        "reports": [r.to_json() for r in result.reports],
        "loss_ratio": {str(s): result.loss_ratio(s) for s in result.traces},
        "n_train_triplets": result.n_train,
        "n_heldout_queries": result.n_heldout,
    }
    paths["metrics_json"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    table = "NDCG\n" + eb.format_table(result.reports, "ndcg") + "\nMRR\n" + eb.format_table(result.reports, "mrr")
    paths["metrics_table"].write_text(table, encoding="utf-8")
    return {k: str(v) for k, v in paths.items()}
