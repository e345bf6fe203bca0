"""Hybrid hard-negative mining: BM25 -> dense cosine rerank -> MMR."""

from __future__ import annotations

import json
import math
import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import ict_seed, normalize_text
from .errors import ContractError, EmbeddingFailure, FormatError, IngestionError, LookupFailure, ParseError, SchemaError
from .model import CrossEncoder, embed_texts, word_tokens
from .numerics import cosine_similarity

# ------------------------------------------------------------------- BM25


@dataclass
class Bm25Index:
    """Inverted index with Okapi BM25 scoring.

    ``postings[term]`` lists ``(doc_index, tf)`` in ascending chunk-id order;
    ``chunk_ids`` is sorted, so doc indices and ids order identically.
    """

    chunk_ids: list
    texts: list
    doc_lens: np.ndarray
    postings: dict
    k1: float = 1.2
    b: float = 0.75
    avgdl: float = field(init=False)
    N: int = field(init=False)

    def __post_init__(self):
        self.N = len(self.chunk_ids)
        self.avgdl = float(np.mean(self.doc_lens)) if self.N else 0.0
        self._pos = {cid: i for i, cid in enumerate(self.chunk_ids)}

    def df(self, term):
        return len(self.postings.get(term, ()))

    def idf(self, term):
        n = self.df(term)
        return math.log((self.N - n + 0.5) / (n + 0.5) + 1.0)

    def _term_weight(self, tf, dl):
        denom = tf + self.k1 * (1.0 - self.b + self.b * dl / self.avgdl)
        return tf * (self.k1 + 1.0) / denom

    def scores(self, query: str) -> np.ndarray:
        """BM25 of every indexed chunk; query tokens count with multiplicity."""
        out = np.zeros(self.N)
        for term in word_tokens(query):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for i, tf in plist:
                out[i] += idf * self._term_weight(tf, self.doc_lens[i])
        return out

    def score_text(self, query: str, text: str) -> float:
        """BM25 of arbitrary text under this index's statistics."""
        tf = Counter(word_tokens(text))
        dl = sum(tf.values())
        total = 0.0
        for term in word_tokens(query):
            if tf.get(term) and term in self.postings:
                total += self.idf(term) * self._term_weight(tf[term], dl)
        return total

    def text_of(self, chunk_id):
        return self.texts[self._pos[chunk_id]]


def bm25_build(chunks, k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    """Index chunk texts; idf(t) = ln((N - df + 0.5) / (df + 0.5) + 1)."""
    chunks = sorted(chunks, key=lambda c: c.id)
    if not chunks:
        raise IngestionError("cannot index an empty chunk stream")
    ids = [c.id for c in chunks]
    dup = [cid for cid, n in Counter(ids).items() if n > 1]
    if dup:
        raise IngestionError(f"duplicate chunk id {dup[0]!r}")
    postings = {}
    lens = np.zeros(len(chunks))
    texts = []
    for i, c in enumerate(chunks):
        texts.append(c.text)
        tf = Counter(word_tokens(c.text))
        lens[i] = sum(tf.values())
        for term in sorted(tf):
            postings.setdefault(term, []).append((i, tf[term]))
    if lens.sum() == 0:
        raise IngestionError("indexed chunks contain no tokens")
    return Bm25Index(ids, texts, lens, postings, k1, b)


@dataclass(frozen=True)
class Candidate:
    chunk_id: str
    bm25_score: float
    dense_score: float | None = None
    mmr_score: float | None = None


def bm25_search(index: Bm25Index, query: str, k: int = 20) -> list[Candidate]:
    """Top-k chunks containing at least one query term; ties by ascending id."""
    if k < 1:
        raise ContractError("k must be >= 1")
    scores = index.scores(query)
    matching = set()
    for term in word_tokens(query):
        matching.update(i for i, _ in index.postings.get(term, ()))
    ranked = sorted(matching, key=lambda i: (-scores[i], index.chunk_ids[i]))
    return [Candidate(index.chunk_ids[i], float(scores[i])) for i in ranked[:k]]


def _vector(chunk_embs, cid):
    try:
        return chunk_embs[cid]
    except KeyError:
        raise LookupFailure(f"no embedding for chunk {cid!r}") from None


def dense_rerank(candidates, query_emb, chunk_embs) -> list[Candidate]:
    """Sort by cosine(query, chunk) descending; stable among exact ties."""
    scored = [replace(c, dense_score=cosine_similarity(query_emb, _vector(chunk_embs, c.chunk_id))) for c in candidates]
    return sorted(scored, key=lambda c: -c.dense_score)


def mmr_select(candidates, query_emb, chunk_embs, lam: float = 0.5, m: int = 3) -> list[Candidate]:
    """Greedy maximal-marginal-relevance selection of ``m`` candidates.

    Each round picks the argmax of
    ``lam * cos(query, c) - (1 - lam) * max_{s in selected} cos(c, s)``
    (the penalty is 0 for the first pick); ties go to the smaller chunk id.
    """
    if not 0.0 <= lam <= 1.0:
        raise ContractError("lambda must lie in [0, 1]")
    candidates = list(candidates)
    if m > len(candidates):
        raise ContractError(f"cannot select {m} of {len(candidates)} candidates")
    vecs = {c.chunk_id: np.asarray(_vector(chunk_embs, c.chunk_id), dtype=np.float64) for c in candidates}
    rel = {c.chunk_id: cosine_similarity(query_emb, vecs[c.chunk_id]) for c in candidates}
    penalty = {c.chunk_id: 0.0 for c in candidates}
    remaining = sorted(candidates, key=lambda c: c.chunk_id)
    picked = []
    for _ in range(m):
        best, best_val = None, -math.inf
        for c in remaining:
            val = lam * rel[c.chunk_id] - (1.0 - lam) * penalty[c.chunk_id]
            if val > best_val:
                best, best_val = c, val
        remaining.remove(best)
        picked.append(replace(best, dense_score=rel[best.chunk_id], mmr_score=best_val))
        for c in remaining:
            sim = cosine_similarity(vecs[c.chunk_id], vecs[best.chunk_id])
            penalty[c.chunk_id] = sim if len(picked) == 1 else max(penalty[c.chunk_id], sim)
    return picked


# ---------------------------------------------------------------- triplets


@dataclass(frozen=True)
class TripletRecord:
    query: str
    pos: tuple
    neg: tuple
    source_id: str | None = field(default=None, compare=False)
    neg_ids: tuple | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "pos", tuple(self.pos))
        object.__setattr__(self, "neg", tuple(self.neg))

    def problems(self):
        """Names of violated invariants (empty when valid)."""
        issues = []
        if not isinstance(self.query, str) or not self.query.strip():
            issues.append("query")
        if not self.pos:
            issues.append("pos")
        if not self.neg:
            issues.append("neg")
        pos_norm = {_canon(p) for p in self.pos}
        if any(_canon(n) in pos_norm for n in self.neg):
            issues.append("neg")
        return issues

    def to_json(self):
        return {"query": self.query, "pos": list(self.pos), "neg": list(self.neg)}


def _canon(text):
    return " ".join(normalize_text(text).split())


class ModelEmbedder:
    """Embeds texts with a cross-encoder's mean-pooled encoder path."""

    def __init__(self, model: CrossEncoder, batch_size: int = 64):
        self.model = model
        self.batch_size = batch_size

    def __call__(self, texts):
        return embed_texts(self.model, list(texts), self.batch_size)


@dataclass(frozen=True)
class MiningConfig:
    k: int = 20
    lam: float = 0.5
    m: int = 3
    final_selector: str = "mmr"
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if self.final_selector not in ("mmr", "dense"):
            raise ContractError(f"final_selector must be 'mmr' or 'dense', not {self.final_selector!r}")
        if self.k < 1 or self.m < 1:
            raise ContractError("k and m must be >= 1")


def _select(cands, q_emb, embs, cfg):
    if cfg.final_selector == "mmr":
        return mmr_select(cands, q_emb, embs, cfg.lam, cfg.m)
    # diversify first with MMR over twice the budget, then keep the most similar
    pool = mmr_select(cands, q_emb, embs, cfg.lam, min(len(cands), 2 * cfg.m))
    return sorted(pool, key=lambda c: -c.dense_score)[: cfg.m]


def _embed_all(embedder, texts, ids):
    try:
        return embedder(texts)
    except Exception as exc:
        # locate the offending text so the error can name its chunk
        for cid, text in zip(ids, texts):
            try:
                embedder([text])
            except Exception as inner:
                raise EmbeddingFailure(f"embedding failed for chunk {cid!r}: {inner}", cid) from inner
        raise EmbeddingFailure(f"embedding failed: {exc}") from exc


def mine_triplets(chunks, index: Bm25Index, embedder, cfg: MiningConfig = MiningConfig(), seed: int = 0,
                  skip_log=None, chunk_embs=None, workers: int = 1) -> list[TripletRecord]:
    """ICT seed -> BM25 top-k -> drop source/duplicates -> dense rerank -> selection.

    Records are emitted in chunk-id order. Chunks with fewer than ``cfg.m``
    surviving candidates are skipped (appended to ``skip_log``).
    ``chunk_embs`` may supply precomputed chunk vectors (id -> vector).
    """
    chunks = sorted(chunks, key=lambda c: c.id)
    if not chunks:
        return []
    seeds = []
    for i, c in enumerate(chunks):
        seeds.append(ict_seed(c, np.random.default_rng([seed, i])))
    if chunk_embs is None:
        chunk_embs = dict(zip(index.chunk_ids, _embed_all(embedder, index.texts, index.chunk_ids)))
    q_vecs = _embed_all(embedder, [q for q, _ in seeds], [c.id for c in chunks])

    def mine_one(i):
        chunk = chunks[i]
        query, positive = seeds[i]
        pos_canon = _canon(positive)
        cands = [
            c for c in bm25_search(index, query, cfg.k)
            if c.chunk_id != chunk.id and _canon(index.text_of(c.chunk_id)) != pos_canon
        ]
        if len(cands) < cfg.m:
            return None, f"{chunk.id}\tinsufficient_candidates\t{len(cands)}"
        picked = _select(dense_rerank(cands, q_vecs[i], chunk_embs), q_vecs[i], chunk_embs, cfg)
        rec = TripletRecord(query, (positive,), tuple(index.text_of(c.chunk_id) for c in picked),
                            source_id=chunk.id, neg_ids=tuple(c.chunk_id for c in picked))
        return rec, None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(mine_one, range(len(chunks))))
    else:
        results = [mine_one(i) for i in range(len(chunks))]
    records = []
    for rec, skip in results:
        if rec is None:
            if skip_log is not None:
                skip_log.append(skip)
        else:
            records.append(rec)
    return records


# --------------------------------------------------------------------- I/O

_KEYS = ("query", "pos", "neg")


def dumps_triplets(records) -> str:
    return "".join(json.dumps(r.to_json(), ensure_ascii=False) + "\n" for r in records)


def write_triplets(records, path):
    Path(path).write_text(dumps_triplets(records), encoding="utf-8")


def parse_triplet_line(line: str, n: int) -> TripletRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", n) from None
    if not isinstance(obj, dict):
        raise SchemaError("record must be a JSON object", n)
    for key in _KEYS:
        if key not in obj:
            raise SchemaError(f"missing key {key!r}", n, key)
    extra = sorted(set(obj) - set(_KEYS))
    if extra:
        raise SchemaError(f"unexpected key {extra[0]!r}", n, extra[0])
    if not isinstance(obj["query"], str):
        raise SchemaError("'query' must be a string", n, "query")
    for key in ("pos", "neg"):
        if not isinstance(obj[key], list) or not all(isinstance(s, str) for s in obj[key]):
            raise SchemaError(f"{key!r} must be a list of strings", n, key)
    rec = TripletRecord(obj["query"], obj["pos"], obj["neg"])
    bad = rec.problems()
    if bad:
        raise SchemaError(f"invalid {bad[0]!r}", n, bad[0])
    return rec


def read_triplets(source) -> list[TripletRecord]:
    if isinstance(source, (str, Path)):
        lines = Path(source).read_text(encoding="utf-8").splitlines()
    else:
        lines = list(source)
    return [parse_triplet_line(line, n) for n, line in enumerate(lines, 1) if line.strip()]


_EMB_MAGIC = b"BPTREMB1"


def write_embedding_cache(embs: dict, path):
    """Binary {chunk_id, vector} pairs: magic, u32 count, u32 dim, then entries."""
    items = sorted(embs.items())
    dim = len(items[0][1]) if items else 0
    parts = [_EMB_MAGIC, struct.pack("<II", len(items), dim)]
    for cid, vec in items:
        raw = cid.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(np.asarray(vec, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_embedding_cache(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:8] != _EMB_MAGIC or len(buf) < 16:
        raise FormatError("not an embedding cache")
    count, dim = struct.unpack_from("<II", buf, 8)
    pos, out = 16, {}
    for _ in range(count):
        if pos + 2 > len(buf):
            raise FormatError("truncated embedding cache")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        end = pos + n + 8 * dim
        if end > len(buf):
            raise FormatError("truncated embedding cache")
        cid = buf[pos : pos + n].decode("utf-8")
        out[cid] = np.frombuffer(buf, dtype="<f8", count=dim, offset=pos + n).copy()
        pos = end
    if pos != len(buf):
        raise FormatError("trailing bytes in embedding cache")
    return out
