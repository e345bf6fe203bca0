"""Ranking metrics, seed-averaged evaluation and the inference bench."""

from __future__ import annotations

import json
import math
import statistics
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractError, MeasurementError, ParseError, UndefinedMetricError, ValidationError
from .model import CrossEncoder, pad_batch

DEFAULT_KS = (3, 5, 10)


# ----------------------------------------------------------------- metrics


def _check(qrels_row, k):
    if k < 1:
        raise ContractError("k must be >= 1")
    if not any(g > 0 for g in qrels_row.values()):
        raise UndefinedMetricError("qrels row has no positive grade")


def dcg(grades) -> float:
    return sum((2.0**g - 1.0) / math.log2(i + 2) for i, g in enumerate(grades))


def ndcg_at_k(ranking: Sequence[str], qrels_row: dict, k: int) -> float:
    """Graded NDCG with gain 2^rel - 1 and discount log2(rank + 1)."""
    _check(qrels_row, k)
    gains = [qrels_row.get(cid, 0) for cid in ranking[:k]]
    ideal = sorted(qrels_row.values(), reverse=True)[:k]
    return dcg(gains) / dcg(ideal)


def mrr_at_k(ranking: Sequence[str], qrels_row: dict, k: int) -> float:
    _check(qrels_row, k)
    for rank, cid in enumerate(ranking[:k], 1):
        if qrels_row.get(cid, 0) > 0:
            return 1.0 / rank
    return 0.0


def rank(chunk_ids, scores) -> list[tuple[str, float]]:
    """Sort by score descending, ties by ascending chunk id."""
    if len(set(chunk_ids)) != len(chunk_ids):
        raise ValidationError("duplicate chunk id in candidate list")
    return sorted(zip(chunk_ids, (float(s) for s in scores)), key=lambda t: (-t[1], t[0]))


# -------------------------------------------------------------- evaluation


@dataclass
class MetricReport:
    name: str
    ks: tuple
    seeds: tuple
    per_seed: list = field(default_factory=list)
    n_queries: int = 0

    @property
    def mean(self) -> dict:
        keys = self.per_seed[0].keys() if self.per_seed else ()
        return {key: float(np.mean([row[key] for row in self.per_seed])) for key in keys}

    def to_json(self):
        return {"name": self.name, "ks": list(self.ks), "seeds": list(self.seeds),
                "per_seed": self.per_seed, "mean": self.mean, "n_queries": self.n_queries}


def _validate_inputs(queries, candidates, qrels):
    for qid in queries:
        if not candidates.get(qid):
            raise ValidationError(f"query {qid!r} has no candidates")
        row = qrels.get(qid)
        if not row:
            raise ValidationError(f"query {qid!r} has no qrels row")
        if not any(g > 0 for g in row.values()):
            raise ValidationError(f"query {qid!r} has no relevant candidate in qrels")


def per_query_metrics(scorer, queries, candidates, qrels, ks=DEFAULT_KS, workers=1):
    """{qid: {"ndcg@k": .., "mrr@k": ..}} for one scorer."""
    _validate_inputs(queries, candidates, qrels)
    qids = sorted(queries)

    def one(qid):
        cids = list(candidates[qid])
        scores = np.asarray(scorer(queries[qid], cids), dtype=np.float64)
        if scores.shape != (len(cids),):
            raise ValidationError(f"scorer returned {scores.shape} scores for {len(cids)} candidates of {qid!r}")
        ranking = [cid for cid, _ in rank(cids, scores)]
        row = {}
        for k in ks:
            row[f"ndcg@{k}"] = ndcg_at_k(ranking, qrels[qid], k)
            row[f"mrr@{k}"] = mrr_at_k(ranking, qrels[qid], k)
        return row

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, qids))
    else:
        rows = [one(q) for q in qids]
    return dict(zip(qids, rows))


def evaluate(make_scorer: Callable, queries: dict, candidates: dict, qrels: dict, ks=DEFAULT_KS,
             seeds=(0, 1, 2), name="model", workers=1) -> MetricReport:
    """Macro-averaged NDCG@k / MRR@k per seed, plus their mean.

    ``make_scorer(seed)`` returns a callable ``(query_text, chunk_ids) ->
    scores`` (train or load whatever the seed selects).
    """
    ks = tuple(ks)
    report = MetricReport(name, ks, tuple(seeds), n_queries=len(queries))
    for seed in seeds:
        rows = per_query_metrics(make_scorer(seed), queries, candidates, qrels, ks, workers)
        keys = [f"{m}@{k}" for m in ("ndcg", "mrr") for k in ks]
        # sum in sorted-qid order so aggregation never depends on completion order
        report.per_seed.append({key: float(sum(rows[q][key] for q in sorted(rows)) / len(rows)) for key in keys})
    return report


def format_table(reports: Sequence[MetricReport], metric="ndcg") -> str:
    """Aligned text table: one row per model, one column per cutoff."""
    if not reports:
        return ""
    ks = reports[0].ks
    head = ["Model Name"] + [f"{metric.upper()}@{k}" for k in ks]
    rows = [[r.name] + [f"{r.mean[f'{metric}@{k}']:.4f}" for k in ks] for r in reports]
    widths = [max(len(row[i]) for row in [head] + rows) for i in range(len(head))]
    fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
    return "\n".join([fmt(head)] + [fmt(r) for r in rows]) + "\n"


def reports_to_json(reports) -> str:
    return json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True) + "\n"


def model_scorer(model: CrossEncoder, texts: dict, batch_size=64):
    """Scorer callable over chunk ids, backed by a cross-encoder."""
    from .model import score_pairs

    def scorer(query, cids):
        return score_pairs(model, [(query, texts[c]) for c in cids], batch_size)

    return scorer


# ---------------------------------------------------------------------- io


def read_qrels(source) -> dict:
    """``query_id<TAB>chunk_id<TAB>grade`` lines -> {qid: {cid: grade}}."""
    lines = Path(source).read_text(encoding="utf-8").splitlines() if isinstance(source, (str, Path)) else source
    out = {}
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        cols = line.rstrip("\n").split("\t")
        if len(cols) != 3:
            raise ParseError("expected query_id<TAB>chunk_id<TAB>grade", n)
        try:
            grade = int(cols[2])
        except ValueError:
            raise ParseError(f"grade {cols[2]!r} is not an integer", n) from None
        if grade < 0:
            raise ParseError("grades must be non-negative", n)
        out.setdefault(cols[0], {})[cols[1]] = grade
    return out


def write_qrels(qrels, path):
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(qrels):
            for cid in sorted(qrels[qid]):
                fh.write(f"{qid}\t{cid}\t{qrels[qid][cid]}\n")


def read_candidates(source):
    """JSON lines ``{query_id, query, candidates}`` -> (queries, candidates)."""
    lines = Path(source).read_text(encoding="utf-8").splitlines() if isinstance(source, (str, Path)) else source
    queries, cands = {}, {}
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            qid = str(obj["query_id"])
            queries[qid] = obj["query"]
            cands[qid] = [str(c) for c in obj["candidates"]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"bad candidate record: {exc}", n) from None
    return queries, cands


def write_candidates(queries, candidates, path):
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(queries):
            obj = {"query_id": qid, "query": queries[qid], "candidates": list(candidates[qid])}
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


# ------------------------------------------------------------------- bench

BENCH_HEADER = "Hardware,Batch,LatencyMs,PeakBytes,QPS"


@dataclass(frozen=True)
class BenchReport:
    hardware: str
    batch_size: int
    latency_ms: float
    peak_bytes: int
    qps: float

    @property
    def accounting_error(self) -> float:
        """Relative gap between measured QPS and batch * 1000 / batch latency."""
        implied = self.batch_size * 1000.0 / (self.latency_ms * self.batch_size)
        return abs(self.qps - implied) / implied

    def to_csv(self) -> str:
        row = f"{self.hardware},{self.batch_size},{self.latency_ms:.4f},{self.peak_bytes},{self.qps:.2f}"
        return f"{BENCH_HEADER}\n{row}\n"

    def to_table(self) -> str:
        head = ["Hardware", "Batch Size", "Latency/Query (ms)", "Peak Memory (bytes)", "Throughput (queries/sec)"]
        row = [self.hardware, str(self.batch_size), f"{self.latency_ms:.3f}", str(self.peak_bytes), f"{self.qps:,.1f}"]
        widths = [max(len(a), len(b)) for a, b in zip(head, row)]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in (head, row)) + "\n"

    def to_json(self):
        return {"hardware": self.hardware, "batch": self.batch_size, "latency_ms": self.latency_ms,
                "peak_bytes": self.peak_bytes, "qps": self.qps}


def synthetic_pairs(model: CrossEncoder, n, query_len=16, doc_len=96, seed=0):
    rng = np.random.default_rng(seed)
    doc_len = min(doc_len, model.config.attention.max_seq_len - query_len - 3)
    lo, hi = 4, model.config.vocab_size
    return [(list(rng.integers(lo, hi, query_len)), list(rng.integers(lo, hi, doc_len))) for _ in range(n)]


def bench(model: CrossEncoder, batch_size: int, n_queries: int, hardware_label: str, pairs=None,
          seed=0, clock=time.perf_counter_ns) -> BenchReport:
    """Median per-query latency over batched scoring, allocator peak and QPS.

    One warm-up batch is excluded. Peak memory is the tracemalloc high-water
    mark of a separate scoring pass over one batch.
    """
    if n_queries < 100:
        raise ContractError("bench needs n_queries >= 100 for stable statistics")
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if pairs is None:
        pairs = synthetic_pairs(model, n_queries, seed=seed)
    from .model import tokenize

    def ids(x):
        return tokenize(x, model.vocab) if isinstance(x, str) else list(x)

    packed = [model.pack_pair(ids(q), ids(d)) for q, d in pairs[:n_queries]]
    batches = [pad_batch(packed[s : s + batch_size]) for s in range(0, len(packed), batch_size)]

    with nx.no_grad():
        model.score_batch(*batches[0])
        samples, total_ns, total_q = [], 0, 0
        for ids_b, mask_b in batches:
            t0 = clock()
            model.score_batch(ids_b, mask_b)
            dt = clock() - t0
            samples.append(dt / len(ids_b))
            total_ns += dt
            total_q += len(ids_b)
        if total_ns == 0 or all(s == 0 for s in samples):
            raise MeasurementError("timer resolution too coarse: every sample was 0")
        tracemalloc.start()
        try:
            tracemalloc.reset_peak()
            model.score_batch(*batches[0])
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
    latency_ms = statistics.median(samples) / 1e6
    return BenchReport(hardware_label, batch_size, latency_ms, int(peak), total_q / (total_ns / 1e9))
