"""Cross-encoder: vocabulary, embeddings, stacked BPT layers, pooling, MLP head."""

from __future__ import annotations

import json
import math
import string
import struct
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .attention import (
    LAYER_PARAM_NAMES,
    AttentionConfig,
    RopeCache,
    bpt_layer,
    init_layer_params,
)
from .errors import ContractError, FormatError, IngestionError, LengthError
from .numerics import Tensor

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = range(4)

_STRIP = string.punctuation + "…“”‘’«»–—"


def word_tokens(text: str) -> list[str]:
    """Lowercase, split on whitespace, trim surrounding punctuation, drop empties."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_STRIP)
        if tok:
            out.append(tok)
    return out


def count_tokens(text: str) -> int:
    return len(word_tokens(text))


class Vocab:
    """Injective token -> id map with the four reserved ids first."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ContractError("vocab must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ContractError("vocab tokens must be unique")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token):
        return self.index.get(token, UNK_ID)

    @property
    def size(self):
        return len(self.tokens)


def _texts(corpus):
    for item in corpus:
        if isinstance(item, str):
            yield item
        elif hasattr(item, "sentences"):
            yield " ".join(item.sentences)
        else:
            yield str(item)


def build_vocab(corpus: Iterable, max_size: int) -> Vocab:
    """Keep the ``max_size`` most frequent tokens (ties broken lexicographically).

    ``max_size`` counts regular tokens; the reserved ids come on top.
    """
    counts = Counter()
    n = 0
    for text in _texts(corpus):
        n += 1
        counts.update(word_tokens(text))
    if n == 0 or not counts:
        raise IngestionError("cannot build a vocabulary from an empty corpus")
    ranked = sorted((t for t in counts if t not in RESERVED), key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + ranked[:max_size])


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab.id(t) for t in word_tokens(text)]


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class ModelConfig:
    attention: AttentionConfig
    n_layers: int = 2
    ffn_multiplier: int = 4
    vocab_size: int = 2004
    pooling: str = "mean"
    mlp_head_dims: tuple = ()
    dtype: str = "f32"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if not self.mlp_head_dims:
            object.__setattr__(self, "mlp_head_dims", (self.attention.d_model // 2, 1))
        object.__setattr__(self, "mlp_head_dims", tuple(int(d) for d in self.mlp_head_dims))
        if self.mlp_head_dims[-1] != 1:
            raise ContractError("mlp_head_dims must end in 1")
        if self.pooling != "mean":
            raise ContractError("only mean pooling is supported")
        if self.n_layers < 1 or self.ffn_multiplier < 1 or self.vocab_size <= len(RESERVED):
            raise ContractError("n_layers, ffn_multiplier and vocab_size must be positive")
        nx.as_dtype(self.dtype)

    @property
    def d_model(self):
        return self.attention.d_model

    @property
    def d_ff(self):
        return self.attention.d_model * self.ffn_multiplier

    def to_dict(self):
        d = asdict(self)
        d["mlp_head_dims"] = list(self.mlp_head_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["attention"] = AttentionConfig(**d["attention"])
        d["mlp_head_dims"] = tuple(d.get("mlp_head_dims", ()))
        return cls(**d)

    @classmethod
    def toy(cls, vocab_size=2004, **overrides):
        attn = AttentionConfig(d_model=64, n_heads=4, q_chunk=32, kv_chunk=32, max_seq_len=128)
        return cls(attention=attn, n_layers=2, vocab_size=vocab_size, **overrides)

    @classmethod
    def paper(cls, vocab_size=2004, **overrides):
        attn = AttentionConfig(d_model=1024, n_heads=32, q_chunk=32, kv_chunk=32, max_seq_len=1024)
        return cls(attention=attn, n_layers=24, vocab_size=vocab_size, **overrides)


# ------------------------------------------------------------------- model


def _head_shapes(cfg):
    dims = (cfg.d_model,) + cfg.mlp_head_dims
    return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]


def param_shapes(cfg: ModelConfig) -> dict:
    d, f = cfg.d_model, cfg.d_ff
    layer = {
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,), "wv": (d, d), "bv": (d,),
        "wo": (d, d), "bo": (d,), "ln1_g": (d,), "ln1_b": (d,), "w1": (d, f), "b1": (f,),
        "w2": (f, d), "b2": (d,), "ln2_g": (d,), "ln2_b": (d,),
    }
    shapes = {"embed": (cfg.vocab_size, d), "emb_ln_g": (d,), "emb_ln_b": (d,)}
    for i in range(cfg.n_layers):
        for n in LAYER_PARAM_NAMES:
            shapes[f"layers.{i}.{n}"] = layer[n]
    head = _head_shapes(cfg)
    for j, (a, b) in enumerate(head):
        shapes[f"head.{j}.w"] = (a, b)
        if j < len(head) - 1:
            shapes[f"head.{j}.b"] = (b,)
    return shapes


class CrossEncoder:
    """Parameters, config and vocabulary of one cross-encoder."""

    def __init__(self, config: ModelConfig, vocab: Vocab, params: dict):
        if len(vocab) != config.vocab_size:
            raise ContractError(f"vocab has {len(vocab)} entries, config says {config.vocab_size}")
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise ContractError("parameter names do not match the config")
        for name, t in params.items():
            if t.shape != expected[name]:
                raise ContractError(f"{name}: shape {t.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(t.data)):
                raise ContractError(f"{name}: non-finite values")
        self.config = config
        self.vocab = vocab
        self.params = params
        self._caches = {}

    @classmethod
    def initialize(cls, config: ModelConfig, vocab: Vocab, seed: int = 0):
        """Seeded init: uniform(+-1/sqrt(fan_in)) weights, unit norms, zero biases."""
        rng = np.random.default_rng(seed)
        dtype = nx.as_dtype(config.dtype)
        d = config.d_model
        a = 1.0 / math.sqrt(d)
        params = {
            "embed": Tensor(rng.uniform(-a, a, (config.vocab_size, d)), dtype, True, "embed"),
            "emb_ln_g": Tensor(np.ones(d), dtype, True, "emb_ln_g"),
            "emb_ln_b": Tensor(np.zeros(d), dtype, True, "emb_ln_b"),
        }
        for i in range(config.n_layers):
            layer = init_layer_params(rng, d, config.d_ff, dtype, prefix=f"layers.{i}.")
            params.update({f"layers.{i}.{n}": layer[n] for n in LAYER_PARAM_NAMES})
        head = _head_shapes(config)
        for j, (fan_in, fan_out) in enumerate(head):
            b = 1.0 / math.sqrt(fan_in)
            params[f"head.{j}.w"] = Tensor(rng.uniform(-b, b, (fan_in, fan_out)), dtype, True, f"head.{j}.w")
            # a bias on the scalar output shifts every score equally, so it is left out
            if j < len(head) - 1:
                params[f"head.{j}.b"] = Tensor(np.zeros(fan_out), dtype, True, f"head.{j}.b")
        return cls(config, vocab, params)

    @property
    def dtype(self):
        return nx.as_dtype(self.config.dtype)

    def parameters(self):
        return list(self.params.values())

    def copy(self):
        params = {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.params.items()}
        return CrossEncoder(self.config, self.vocab, params)

    def rope_cache(self):
        key = self.dtype
        if key not in self._caches:
            self._caches[key] = RopeCache.for_config(self.config.attention, self.dtype)
        return self._caches[key]

    def layer_params(self, i):
        return {n: self.params[f"layers.{i}.{n}"] for n in LAYER_PARAM_NAMES}

    # -- forward pieces ------------------------------------------------

    def hidden_states(self, ids, mask, recompute=False, meter=None):
        """Final hidden states (B, L, d) for padded ids with keep-mask (B, L)."""
        cfg = self.config
        h = nx.embedding(self.params["embed"], ids)
        h = nx.layer_norm(h, self.params["emb_ln_g"], self.params["emb_ln_b"], cfg.ln_eps)
        cache = self.rope_cache()
        for i in range(cfg.n_layers):
            h = bpt_layer(h, self.layer_params(i), cfg.attention, mask, recompute, cache, meter, eps=cfg.ln_eps)
        return h

    def pool(self, hidden, mask):
        """Mean over non-PAD positions."""
        m = np.asarray(mask, dtype=self.dtype)
        counts = m.sum(axis=1, keepdims=True)
        if np.any(counts == 0):
            raise LengthError("cannot pool an all-padding sequence")
        summed = nx.sum(nx.mul(hidden, Tensor(m[..., None])), axis=1)
        return nx.div(summed, Tensor(counts))

    def head(self, pooled):
        n = len(self.config.mlp_head_dims)
        h = pooled
        for j in range(n):
            h = nx.linear(h, self.params[f"head.{j}.w"], self.params.get(f"head.{j}.b"))
            if j < n - 1:
                h = nx.gelu(h)
        return nx.reshape(h, (h.shape[0],))

    def score_batch(self, ids, mask, recompute=False, meter=None):
        return self.head(self.pool(self.hidden_states(ids, mask, recompute, meter), mask))

    def embed_batch(self, ids, mask, recompute=False, meter=None):
        return self.pool(self.hidden_states(ids, mask, recompute, meter), mask)

    # -- packing -------------------------------------------------------

    def pack_pair(self, query_ids, doc_ids):
        """[CLS] query [SEP] doc [SEP], truncating the document to fit."""
        limit = self.config.attention.max_seq_len
        if len(query_ids) + 3 > limit:
            raise LengthError(f"query of {len(query_ids)} tokens does not fit max_seq_len={limit}")
        room = limit - len(query_ids) - 3
        return [CLS_ID, *query_ids, SEP_ID, *list(doc_ids)[:room], SEP_ID]

    def pack_single(self, ids):
        """[CLS] text [SEP], truncating the text to fit."""
        if len(ids) == 0:
            raise LengthError("cannot embed an empty sequence")
        room = self.config.attention.max_seq_len - 2
        return [CLS_ID, *list(ids)[:room], SEP_ID]


def pad_batch(seqs: Sequence[Sequence[int]]):
    """Right-pad to the longest sequence; returns (ids, keep_mask)."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def _ids(x, vocab):
    return tokenize(x, vocab) if isinstance(x, str) else list(x)


def score(model: CrossEncoder, query, doc) -> float:
    """Relevance of ``doc`` to ``query`` (token ids or raw text); higher is better."""
    return float(score_pairs(model, [(query, doc)])[0])


def score_pairs(model: CrossEncoder, pairs, batch_size: int = 64) -> np.ndarray:
    packed = [model.pack_pair(_ids(q, model.vocab), _ids(d, model.vocab)) for q, d in pairs]
    out = np.empty(len(packed), dtype=np.float64)
    with nx.no_grad():
        for s in range(0, len(packed), batch_size):
            ids, mask = pad_batch(packed[s : s + batch_size])
            out[s : s + len(ids)] = model.score_batch(ids, mask).data
    return out


def embed(model: CrossEncoder, text) -> np.ndarray:
    """Mean-pooled final hidden state of a single text."""
    return embed_texts(model, [text])[0]


def embed_texts(model: CrossEncoder, texts, batch_size: int = 64) -> np.ndarray:
    packed = [model.pack_single(_ids(t, model.vocab)) for t in texts]
    out = np.empty((len(packed), model.config.d_model), dtype=np.float64)
    with nx.no_grad():
        for s in range(0, len(packed), batch_size):
            ids, mask = pad_batch(packed[s : s + batch_size])
            out[s : s + len(ids)] = model.embed_batch(ids, mask).data
    return out


# -------------------------------------------------------------- checkpoint

MAGIC = b"BPTRCKPT"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(model: CrossEncoder) -> bytes:
    """Serialize to the versioned binary format.

    Layout: magic, u16 version, u32 header length, UTF-8 JSON header
    {config, vocab, n_tensors}, then per tensor: u16 name length, name,
    u8 dtype code, u8 ndim, u32 dims, u64 byte length, little-endian values.
    """
    header = json.dumps(
        {"config": model.config.to_dict(), "vocab": model.vocab.tokens, "n_tensors": len(model.params)},
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(header)), header]
    for name, t in model.params.items():
        nb = name.encode("utf-8")
        raw = t.data.astype(t.dtype.newbyteorder("<"), copy=False).tobytes()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", _DTYPE_CODES[t.dtype], t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(struct.pack("<Q", len(raw)) + raw)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n):
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint at byte {self.pos} (wanted {n} bytes)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(payload: bytes) -> CrossEncoder:
    r = _Reader(payload)
    if bytes(r.take(len(MAGIC))) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, header_len = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(bytes(r.take(header_len)).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        vocab = Vocab(header["vocab"])
        n_tensors = int(header["n_tensors"])
    except FormatError:
        raise
    except Exception as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    params = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = bytes(r.take(name_len)).decode("utf-8", errors="strict")
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        dt = _CODE_DTYPES[code]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise FormatError(f"{name}: byte length {nbytes} disagrees with shape {shape}")
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        params[name] = Tensor(arr, requires_grad=True, name=name)
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after the last tensor")
    try:
        return CrossEncoder(config, vocab, params)
    except ContractError as exc:
        raise FormatError(f"checkpoint does not describe a valid model: {exc}") from None
