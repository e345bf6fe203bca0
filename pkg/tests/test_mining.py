import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bptrank.corpus import Chunk
from bptrank.errors import ContractError, EmbeddingFailure, FormatError, IngestionError, LookupFailure, ParseError, SchemaError
from bptrank.mining import (
    Candidate,
    MiningConfig,
    ModelEmbedder,
    TripletRecord,
    bm25_build,
    bm25_search,
    dense_rerank,
    dumps_triplets,
    mine_triplets,
    mmr_select,
    read_embedding_cache,
    read_triplets,
    write_embedding_cache,
    write_triplets,
)

WORDS = "mưa nắng gió sông núi biển lúa cá trâu đồng làng phố chợ cầu đường".split()


def fixture_chunks(n=20, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        s1 = " ".join(rng.choice(WORDS, size=rng.integers(3, 9)))
        s2 = " ".join(rng.choice(WORDS, size=rng.integers(3, 9)))
        out.append(Chunk(f"c{i:02d}", f"d{i:02d}", (s1, s2), 0))
    return out


class HashEmbedder:
    """Bag of words over fixed pseudo-random word vectors."""

    def __init__(self, dim=8, fail_on=None):
        self.dim = dim
        self.fail_on = fail_on

    def vec(self, word):
        return np.random.default_rng(zlib.crc32(word.encode())).normal(size=self.dim)

    def __call__(self, texts):
        out = []
        for t in texts:
            if self.fail_on and self.fail_on in t:
                raise RuntimeError("boom")
            out.append(sum((self.vec(w) for w in t.lower().replace(".", " ").split()), np.full(self.dim, 1e-3)))
        return np.array(out)


# -------------------------------------------------------------------- BM25


def brute_bm25(chunks, query, k1=1.2, b=0.75):
    docs = {c.id: " ".join(c.sentences).split() for c in chunks}
    n = len(docs)
    avgdl = sum(len(d) for d in docs.values()) / n
    out = {}
    for cid, toks in docs.items():
        s = 0.0
        for t in query.split():
            df = sum(t in d for d in docs.values())
            if df == 0:
                continue
            idf = math.log((n - df + 0.5) / (df + 0.5) + 1)
            tf = toks.count(t)
            s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(toks) / avgdl))
        out[cid] = s
    return out


def test_bm25_single_chunk():
    idx = bm25_build([Chunk("a", "d", ("mưa to", "gió lớn"), 4)])
    assert idx.N == 1 and idx.avgdl == 4
    assert idx.idf("mưa") == pytest.approx(math.log(1 + 0.5 / 1.5))


def test_bm25_df_idf_match_recount():
    chunks = fixture_chunks()
    idx = bm25_build(chunks)
    for w in WORDS:
        df = sum(w in " ".join(c.sentences).split() for c in chunks)
        assert idx.df(w) == df
        assert abs(idx.idf(w) - math.log((20 - df + 0.5) / (df + 0.5) + 1)) < 1e-12
        assert idx.idf(w) > 0
    assert idx.avgdl == pytest.approx(np.mean([len(" ".join(c.sentences).split()) for c in chunks]), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(WORDS + ["không"]), min_size=1, max_size=5))
def test_bm25_search_equals_brute_force(query_words):
    chunks = fixture_chunks()
    idx = bm25_build(chunks)
    query = " ".join(query_words)
    brute = brute_bm25(chunks, query)
    for cid, s in brute.items():
        assert abs(idx.scores(query)[idx.chunk_ids.index(cid)] - s) < 1e-12
    matching = [cid for cid in brute if any(w in " ".join(chunks[int(cid[1:])].sentences).split() for w in query_words)]
    order = sorted(matching, key=lambda c: (-brute[c], c))
    got = bm25_search(idx, query, k=20)
    assert [c.chunk_id for c in got] == order[:20]
    top5 = bm25_search(idx, query, k=5)
    assert [c.chunk_id for c in top5] == order[:5]


def test_bm25_search_cases():
    chunks = [Chunk("b", "d", ("mưa to", "x y"), 4), Chunk("a", "d", ("mưa to", "x y"), 4), Chunk("c", "d", ("hiếm có", "x"), 3)]
    idx = bm25_build(chunks)
    assert [c.chunk_id for c in bm25_search(idx, "hiếm")] == ["c"]
    res = bm25_search(idx, "mưa")
    assert [c.chunk_id for c in res] == ["a", "b"] and res[0].bm25_score == res[1].bm25_score
    assert bm25_search(idx, "zzz") == []
    with pytest.raises(IngestionError):
        bm25_build(chunks + [chunks[0]])
    with pytest.raises(IngestionError):
        bm25_build([])


# ----------------------------------------------------------- dense / MMR


def cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_dense_rerank_oracle():
    rng = np.random.default_rng(0)
    q = rng.normal(size=8)
    embs = {f"c{i:02d}": rng.normal(size=8) for i in range(20)}
    cands = [Candidate(cid, 0.0) for cid in embs]
    got = dense_rerank(cands, q, embs)
    expected = sorted(embs, key=lambda c: -cos(q, embs[c]))
    assert [c.chunk_id for c in got] == expected
    embs["c05"] = q.copy()
    top = dense_rerank(cands, q, embs)[0]
    assert top.chunk_id == "c05" and top.dense_score == pytest.approx(1.0)
    assert dense_rerank(cands[:1], q, embs)[0].chunk_id == "c00"
    with pytest.raises(LookupFailure):
        dense_rerank([Candidate("nope", 0.0)], q, embs)


def brute_mmr(ids, q, embs, lam, m):
    """Enumerate the recurrence directly: at each round evaluate every remaining id."""
    selected = []
    for _ in range(m):
        vals = {}
        for c in ids:
            if c in selected:
                continue
            pen = max((cos(embs[c], embs[s]) for s in selected), default=0.0)
            vals[c] = lam * cos(q, embs[c]) - (1 - lam) * pen
        best = max(vals.values())
        selected.append(min(c for c, v in vals.items() if v == best))
    return selected


def six_candidates(seed=1):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=6)
    embs = {f"c{i}": rng.normal(size=6) for i in range(6)}
    embs["c4"] = embs["c1"] + 0.05 * rng.normal(size=6)
    return q, embs


@pytest.mark.parametrize("lam", [1.0, 0.5, 0.0])
def test_mmr_matches_brute_force(lam):
    for seed in range(10):
        q, embs = six_candidates(seed)
        cands = [Candidate(c, 0.0) for c in embs]
        got = [c.chunk_id for c in mmr_select(cands, q, embs, lam, 3)]
        assert got == brute_mmr(sorted(embs), q, embs, lam, 3)
        if lam == 1.0:
            assert got == [c.chunk_id for c in dense_rerank(cands, q, embs)][:3]


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31))
def test_mmr_lambda_zero_maximizes_distance(n, seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    embs = {f"c{i}": rng.normal(size=4) for i in range(n)}
    picks = mmr_select([Candidate(c, 0.0) for c in embs], q, embs, 0.0, n)
    chosen = [picks[0].chunk_id]
    for p in picks[1:]:
        rest = [c for c in embs if c not in chosen]
        worst = {c: max(cos(embs[c], embs[s]) for s in chosen) for c in rest}
        assert worst[p.chunk_id] == min(worst.values())
        chosen.append(p.chunk_id)


def test_mmr_avoids_duplicates():
    q = np.array([1.0, 0.0, 0.0])
    embs = {"a": np.array([1.0, 0.1, 0.0]), "b": np.array([1.0, 0.1, 0.0]), "c": np.array([0.5, 0.0, 1.0])}
    picks = mmr_select([Candidate(c, 0.0) for c in embs], q, embs, 0.5, 2)
    assert [p.chunk_id for p in picks] == ["a", "c"]
    assert picks[0].mmr_score == pytest.approx(0.5 * cos(q, embs["a"]))


def test_mmr_contracts():
    q, embs = six_candidates()
    cands = [Candidate(c, 0.0) for c in embs]
    with pytest.raises(ContractError):
        mmr_select(cands, q, embs, 0.5, 7)
    with pytest.raises(ContractError):
        mmr_select(cands, q, embs, 1.5, 3)


# ----------------------------------------------------------------- mining


def test_mine_invariants():
    chunks = fixture_chunks(20)
    idx = bm25_build(chunks)
    skips = []
    recs = mine_triplets(chunks, idx, HashEmbedder(), MiningConfig(), 0, skips)
    assert len(recs) + len(skips) == 20 and recs
    for r in recs:
        assert len(r.neg) == 3 and r.problems() == []
        assert r.source_id not in r.neg_ids
        assert all(n != r.pos[0] for n in r.neg)


def test_mine_single_chunk():
    chunks = fixture_chunks(1)
    skips = []
    assert mine_triplets(chunks, bm25_build(chunks), HashEmbedder(), MiningConfig(), 0, skips) == []
    assert len(skips) == 1 and skips[0].startswith("c00\t")


def test_mine_dense_selector_and_workers():
    chunks = fixture_chunks(20)
    idx = bm25_build(chunks)
    a = mine_triplets(chunks, idx, HashEmbedder(), MiningConfig(final_selector="dense"), 0)
    b = mine_triplets(chunks, idx, HashEmbedder(), MiningConfig(final_selector="dense"), 0, workers=4)
    assert dumps_triplets(a) == dumps_triplets(b)
    for r in a:
        vals = [cos(HashEmbedder()([r.query])[0], HashEmbedder()([n])[0]) for n in r.neg]
        assert vals == sorted(vals, reverse=True)
    with pytest.raises(ContractError):
        MiningConfig(final_selector="bm25")


def test_mine_embedder_failure_names_chunk():
    chunks = fixture_chunks(5)
    bad = " ".join(chunks[3].sentences)
    with pytest.raises(EmbeddingFailure) as info:
        mine_triplets(chunks, bm25_build(chunks), HashEmbedder(fail_on=bad), MiningConfig(), 0)
    assert "c03" in str(info.value)


def test_toy_corpus_mining_is_byte_identical():
    from bptrank.config import PipelineConfig
    from bptrank.corpus import prepare_chunks
    from bptrank.model import CrossEncoder, build_vocab
    from bptrank.pipeline import load_documents

    cfg = PipelineConfig.preset("toy")
    chunks, _ = prepare_chunks(load_documents(), 32, 64)
    assert len(chunks) == 200
    vocab = build_vocab([c.text for c in chunks], 2000)
    idx = bm25_build(chunks)
    embedder = ModelEmbedder(CrossEncoder.initialize(cfg.model_config(vocab.size), vocab, 0))
    embs = dict(zip(idx.chunk_ids, embedder(idx.texts)))
    one = dumps_triplets(mine_triplets(chunks, idx, embedder, cfg.mining_config(), 0, chunk_embs=embs))
    two = dumps_triplets(mine_triplets(chunks, idx, embedder, cfg.mining_config(), 0, chunk_embs=embs))
    assert one == two and one.count("\n") == 200


# -------------------------------------------------------------------- I/O


def test_triplet_round_trip(tmp_path):
    recs = [TripletRecord(f"q{i}", (f"p{i}",), (f"n{i}a", f"n{i}b", f"n{i}c")) for i in range(100)]
    write_triplets(recs, tmp_path / "t.jsonl")
    assert read_triplets(tmp_path / "t.jsonl") == recs
    write_triplets([], tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_text() == "" and read_triplets(tmp_path / "e.jsonl") == []


def test_triplet_schema_errors():
    good = '{"query": "q", "pos": ["p"], "neg": ["n"]}'
    with pytest.raises(SchemaError) as info:
        read_triplets([good, '{"query": "q", "pos": ["p"]}'])
    assert info.value.line_number == 2 and "neg" in str(info.value)
    with pytest.raises(ParseError):
        read_triplets(["{oops"])
    with pytest.raises(SchemaError):
        read_triplets(['{"query": "q", "pos": ["p"], "neg": ["p"]}'])
    with pytest.raises(SchemaError):
        read_triplets(['{"query": "q", "pos": ["p"], "neg": ["n"], "extra": 1}'])


def test_embedding_cache(tmp_path):
    embs = {"a": np.arange(3.0), "bé": np.ones(3)}
    write_embedding_cache(embs, tmp_path / "e.bin")
    back = read_embedding_cache(tmp_path / "e.bin")
    assert set(back) == set(embs) and all(np.array_equal(back[k], embs[k]) for k in embs)
    (tmp_path / "bad.bin").write_bytes((tmp_path / "e.bin").read_bytes()[:-4])
    with pytest.raises(FormatError):
        read_embedding_cache(tmp_path / "bad.bin")
