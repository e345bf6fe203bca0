"""scikit-learn style estimators over the reranker and the BM25 index.

These wrap the functional API for use in sklearn tooling (``get_params``,
``clone``, ``Pipeline`` steps). Inputs are validated up front so malformed
rows fail before any training starts.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .attention import AttentionConfig
from .corpus import Chunk
from .errors import ValidationError
from .mining import TripletRecord, bm25_build, bm25_search
from .model import CrossEncoder, ModelConfig, build_vocab, embed_texts, score_pairs
from .training import TrainConfig, train


def check_texts(X, name="X"):
    """A non-empty list of strings."""
    if isinstance(X, str):
        raise ValidationError(f"{name} must be a sequence of strings, not a single string")
    texts = list(X)
    if not texts:
        raise ValidationError(f"{name} is empty")
    for i, t in enumerate(texts):
        if not isinstance(t, str):
            raise ValidationError(f"{name}[{i}] is {type(t).__name__}, expected str")
    return texts


def check_pairs(X):
    """A non-empty list of ``(query, document)`` string pairs."""
    pairs = list(X)
    if not pairs:
        raise ValidationError("no (query, document) pairs given")
    out = []
    for i, p in enumerate(pairs):
        if len(p) != 2 or not all(isinstance(s, str) for s in p):
            raise ValidationError(f"row {i} is not a (query, document) pair of strings")
        out.append((p[0], p[1]))
    return out


def check_triplets(X):
    """Triplet records or ``{query, pos, neg}`` mappings, validated."""
    rows = list(X)
    if not rows:
        raise ValidationError("no training triplets given")
    out = []
    for i, r in enumerate(rows):
        if isinstance(r, dict):
            try:
                r = TripletRecord(r["query"], tuple(r["pos"]), tuple(r["neg"]))
            except (KeyError, TypeError) as exc:
                raise ValidationError(f"row {i}: {exc}") from None
        if not isinstance(r, TripletRecord):
            raise ValidationError(f"row {i} is {type(r).__name__}, expected a triplet")
        bad = r.problems()
        if bad:
            raise ValidationError(f"row {i}: {bad[0]}")
        out.append(r)
    return out


def _check_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted; call fit first")


class CrossEncoderReranker(BaseEstimator):
    """Train on triplets, then score (query, document) pairs."""

    def __init__(self, d_model=64, n_heads=4, n_layers=2, chunk_size=32, max_seq_len=128, vocab_max=2000,
                 epochs=30, learning_rate=2e-3, batch_size=16, grad_accum_steps=2, margin=1.0,
                 memory_bank_weight=0.0, optimizer="adam", recompute=False, seed=0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.chunk_size = chunk_size
        self.max_seq_len = max_seq_len
        self.vocab_max = vocab_max
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.grad_accum_steps = grad_accum_steps
        self.margin = margin
        self.memory_bank_weight = memory_bank_weight
        self.optimizer = optimizer
        self.recompute = recompute
        self.seed = seed

    def _configs(self, vocab_size):
        attn = AttentionConfig(d_model=self.d_model, n_heads=self.n_heads, q_chunk=self.chunk_size,
                               kv_chunk=self.chunk_size, max_seq_len=self.max_seq_len)
        mcfg = ModelConfig(attention=attn, n_layers=self.n_layers, vocab_size=vocab_size)
        tcfg = TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
                           grad_accum_steps=self.grad_accum_steps, margin=self.margin,
                           memory_bank_weight=self.memory_bank_weight, optimizer=self.optimizer,
                           recompute_activations=self.recompute, seed=self.seed)
        return mcfg, tcfg

    def fit(self, X, y=None):
        records = check_triplets(X)
        vocab = build_vocab([t for r in records for t in (r.query, *r.pos, *r.neg)], self.vocab_max)
        mcfg, tcfg = self._configs(vocab.size)
        init = CrossEncoder.initialize(mcfg, vocab, self.seed)
        self.model_, self.trace_ = train(init, records, tcfg)
        self.n_features_in_ = 1
        return self

    @classmethod
    def from_model(cls, model: CrossEncoder):
        """Wrap an already trained model."""
        a = model.config.attention
        est = cls(d_model=a.d_model, n_heads=a.n_heads, n_layers=model.config.n_layers, chunk_size=a.q_chunk,
                  max_seq_len=a.max_seq_len)
        est.model_ = model
        return est

    def predict(self, X):
        """Relevance score per (query, document) pair."""
        _check_fitted(self, "model_")
        return score_pairs(self.model_, check_pairs(X))

    def transform(self, X):
        """Mean-pooled encoder embeddings of texts, shape (n, d_model)."""
        _check_fitted(self, "model_")
        return embed_texts(self.model_, check_texts(X))

    def rerank(self, query, documents):
        """Indices of ``documents`` sorted by descending score, with the scores."""
        docs = check_texts(documents, "documents")
        scores = self.predict([(query, d) for d in docs])
        order = sorted(range(len(docs)), key=lambda i: (-scores[i], i))
        return [(i, float(scores[i])) for i in order]


class BM25Retriever(BaseEstimator):
    """Okapi BM25 over a fixed passage collection."""

    def __init__(self, k1=1.2, b=0.75):
        self.k1 = k1
        self.b = b

    def fit(self, X, y=None):
        if X and all(isinstance(x, Chunk) for x in X):
            chunks = list(X)
        else:
            texts = check_texts(X)
            chunks = [Chunk(f"{i:06d}", "fit", (t,), 0) for i, t in enumerate(texts)]
        self.index_ = bm25_build(chunks, self.k1, self.b)
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        """BM25 score matrix, shape (n_queries, n_passages), columns in passage id order."""
        _check_fitted(self, "index_")
        return np.stack([self.index_.scores(q) for q in check_texts(X)])

    def search(self, query, k=20):
        _check_fitted(self, "index_")
        return bm25_search(self.index_, query, k)
