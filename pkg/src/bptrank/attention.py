"""Rotary position embedding and blockwise-parallel attention.

The blockwise kernel streams key/value blocks past each query block while
keeping a running row max, running denominator and running weighted value sum
(online softmax), so no full L x L score matrix is ever alive. Its backward
pass re-derives probabilities block by block from the saved log-sum-exp.

:func:`vanilla_attention` materializes the full score matrix and serves as
the reference kernel.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError, DegenerateRowError, DimensionError, RangeError
from .numerics import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    q_chunk: int = 32
    kv_chunk: int = 32
    rope_base: float = 10000.0
    max_seq_len: int = 1024

    def __post_init__(self):
        for name in ("d_model", "n_heads", "q_chunk", "kv_chunk", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.rope_base <= 0:
            raise ContractError("rope_base must be positive")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ContractError(f"head_dim={self.head_dim} must be even for rotary embedding")
        if self.q_chunk > self.max_seq_len or self.kv_chunk > self.max_seq_len:
            raise ContractError("chunk sizes cannot exceed max_seq_len")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads


class RopeCache:
    """cos/sin tables of shape (max_seq_len, head_dim // 2).

    angle(m, i) = m * base ** (-2 i / head_dim), applied to the feature pair
    (2i, 2i + 1).
    """

    def __init__(self, max_seq_len, head_dim, base=10000.0, dtype=np.float64):
        if head_dim % 2:
            raise ContractError("head_dim must be even")
        self.max_seq_len = max_seq_len
        self.head_dim = head_dim
        self.base = base
        inv_freq = base ** (-2.0 * np.arange(head_dim // 2, dtype=np.float64) / head_dim)
        angles = np.outer(np.arange(max_seq_len, dtype=np.float64), inv_freq)
        self.cos = np.cos(angles).astype(dtype)
        self.sin = np.sin(angles).astype(dtype)

    @classmethod
    def for_config(cls, cfg: AttentionConfig, dtype=np.float64):
        return cls(cfg.max_seq_len, cfg.head_dim, cfg.rope_base, dtype)


class AttnScratchMeter:
    """High-water mark of live attention intermediates, counted per head.

    Kernels report allocations of per-head slices (an array of shape
    ``(batch, heads, rows, cols)`` counts ``rows * cols``).
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.live = 0
        self.peak = 0

    def reset(self):
        with self._lock:
            self.live = 0
            self.peak = 0

    def alloc(self, n):
        with self._lock:
            self.live += int(n)
            self.peak = max(self.peak, self.live)

    def free(self, n):
        with self._lock:
            self.live -= int(n)


class _NullMeter:
    def alloc(self, n):
        pass

    def free(self, n):
        pass

    def reset(self):
        pass


_NULL_METER = _NullMeter()


# ---------------------------------------------------------------------- RoPE


def rope_apply(x: Tensor, positions, cache: RopeCache) -> Tensor:
    """Rotate feature pairs of ``x`` (shape ``(..., L, head_dim)``) by position."""
    positions = np.asarray(positions, dtype=np.int64)
    if x.shape[-1] != cache.head_dim:
        raise DimensionError(f"rope: head_dim {x.shape[-1]} vs cache {cache.head_dim}")
    if positions.shape != (x.shape[-2],):
        raise DimensionError(f"rope: {positions.shape[0] if positions.ndim else 0} positions for length {x.shape[-2]}")
    if positions.size and (positions.min() < 0 or positions.max() >= cache.max_seq_len):
        raise RangeError(f"rope: position outside [0, {cache.max_seq_len})")
    cos = cache.cos[positions].astype(x.dtype, copy=False)
    sin = cache.sin[positions].astype(x.dtype, copy=False)
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def bwd(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return nx._emit(out, (x,), bwd, "rope")


# ------------------------------------------------------------------ kernels


def _check_qkv(q, k, v):
    for t in (k, v):
        if t.dtype != q.dtype:
            raise DimensionError("attention: Q, K, V dtypes differ")
    if q.ndim < 2 or k.shape != v.shape or q.shape[:-2] != k.shape[:-2] or q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention: incompatible Q{q.shape} K{k.shape} V{v.shape}")


def _mask_array(mask, lq, lk, lead):
    """Broadcast a boolean keep-mask to ``lead + (lq, lk)``; None stays None."""
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    try:
        m = np.broadcast_to(m, tuple(lead) + (lq, lk))
    except ValueError:
        raise DimensionError(f"attention mask {np.shape(mask)} does not fit {tuple(lead) + (lq, lk)}") from None
    if not np.all(m.any(axis=-1)):
        raise DegenerateRowError("attention row with every key masked")
    return m


def vanilla_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, meter=None) -> Tensor:
    """softmax(Q K^T / sqrt(d) + mask) V with the full score matrix.

    ``mask`` is a boolean keep-mask broadcastable to ``(..., Lq, Lk)``; False
    entries receive -inf before the softmax.
    """
    _check_qkv(q, k, v)
    meter = meter or _NULL_METER
    lq, lk, d = q.shape[-2], k.shape[-2], q.shape[-1]
    keep = _mask_array(mask, lq, lk, q.shape[:-2])
    scale = 1.0 / math.sqrt(d)
    s = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * q.dtype.type(scale)
    meter.alloc(lq * lk)
    if keep is not None:
        s = np.where(keep, s, -np.inf)
    s_max = s.max(axis=-1, keepdims=True)
    e = np.exp(s - s_max)
    p = e / e.sum(axis=-1, keepdims=True)
    meter.alloc(lq * lk)
    out = np.matmul(p, v.data)
    meter.free(2 * lq * lk)

    def bwd(g):
        gv = np.matmul(np.swapaxes(p, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = p * (gp - np.sum(gp * p, axis=-1, keepdims=True)) * scale
        gq = np.matmul(gs, k.data)
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data)
        return gq, gk, gv

    return nx._emit(out.astype(q.dtype, copy=False), (q, k, v), bwd, "vanilla_attention")


def _blocks(n, size):
    return [(s, min(s + size, n)) for s in range(0, n, size)]


def _forward_query_block(qb, k, v, keep_b, kv_spans, scale, meter):
    """Online-softmax pass of one query block over all key/value blocks."""
    lead = qb.shape[:-2]
    rows = qb.shape[-2]
    d = v.shape[-1]
    dtype = qb.dtype
    m = np.full(lead + (rows,), -np.inf, dtype=dtype)
    l = np.zeros(lead + (rows,), dtype=dtype)
    acc = np.zeros(lead + (rows, d), dtype=dtype)
    meter.alloc(rows * d + 2 * rows)
    for ks, ke in kv_spans:
        s = np.matmul(qb, np.swapaxes(k[..., ks:ke, :], -1, -2)) * scale
        meter.alloc(rows * (ke - ks))
        if keep_b is not None:
            s = np.where(keep_b[..., ks:ke], s, -np.inf)
        m_new = np.maximum(m, s.max(axis=-1))
        m_safe = np.where(np.isfinite(m_new), m_new, 0).astype(dtype, copy=False)
        p = np.exp(s - m_safe[..., None])
        meter.alloc(rows * (ke - ks))
        alpha = np.exp(m - m_safe)
        l = alpha * l + p.sum(axis=-1)
        acc = alpha[..., None] * acc + np.matmul(p, v[..., ks:ke, :])
        m = m_new
        meter.free(2 * rows * (ke - ks))
    meter.free(rows * d + 2 * rows)
    if np.any(l == 0):
        raise DegenerateRowError("attention row with every key masked")
    out = acc / l[..., None]
    lse = m + np.log(l)
    return out, lse


def blockwise_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask=None,
    q_chunk: int = 32,
    kv_chunk: int = 32,
    meter: AttnScratchMeter | None = None,
    workers: int = 1,
) -> Tensor:
    """Exact attention computed block by block with an online softmax.

    Equivalent to :func:`vanilla_attention` up to floating-point
    reassociation. Ragged tails are handled by a shorter last block.
    ``workers > 1`` processes query blocks on a thread pool; the result does
    not depend on the worker count.
    """
    _check_qkv(q, k, v)
    lq, lk, d = q.shape[-2], k.shape[-2], q.shape[-1]
    if q_chunk < 1 or kv_chunk < 1:
        raise ContractError("chunk sizes must be at least 1")
    meter = meter or _NULL_METER
    keep = _mask_array(mask, lq, lk, q.shape[:-2])
    scale = q.dtype.type(1.0 / math.sqrt(d))
    q_spans = _blocks(lq, q_chunk)
    kv_spans = _blocks(lk, kv_chunk)

    def run(span):
        qs, qe = span
        keep_b = None if keep is None else keep[..., qs:qe, :]
        return _forward_query_block(q.data[..., qs:qe, :], k.data, v.data, keep_b, kv_spans, scale, meter)

    if workers > 1 and len(q_spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, q_spans))
    else:
        parts = [run(span) for span in q_spans]
    out = np.concatenate([p[0] for p in parts], axis=-2)
    lse = np.concatenate([p[1] for p in parts], axis=-1)

    def bwd(g):
        delta = np.sum(g * out, axis=-1)
        gq = np.zeros_like(q.data)
        gk = np.zeros_like(k.data)
        gv = np.zeros_like(v.data)
        for qs, qe in q_spans:
            qb = q.data[..., qs:qe, :]
            gb = g[..., qs:qe, :]
            lse_b = lse[..., qs:qe, None]
            delta_b = delta[..., qs:qe, None]
            for ks, ke in kv_spans:
                kb = k.data[..., ks:ke, :]
                vb = v.data[..., ks:ke, :]
                s = np.matmul(qb, np.swapaxes(kb, -1, -2)) * scale
                if keep is not None:
                    s = np.where(keep[..., qs:qe, ks:ke], s, -np.inf)
                p = np.exp(s - lse_b)
                gv[..., ks:ke, :] += np.matmul(np.swapaxes(p, -1, -2), gb)
                gp = np.matmul(gb, np.swapaxes(vb, -1, -2))
                gs = p * (gp - delta_b) * scale
                gq[..., qs:qe, :] += np.matmul(gs, kb)
                gk[..., ks:ke, :] += np.matmul(np.swapaxes(gs, -1, -2), qb)
        return gq, gk, gv

    return nx._emit(out.astype(q.dtype, copy=False), (q, k, v), bwd, "blockwise_attention")


# --------------------------------------------------------------- BPT layer


LAYER_PARAM_NAMES = (
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b",
)


def init_layer_params(rng, d_model, d_ff, dtype=np.float64, prefix=""):
    """Seeded parameters for one layer: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights."""

    def uni(fan_in, shape):
        a = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-a, a, size=shape)

    raw = {
        "wq": uni(d_model, (d_model, d_model)), "bq": np.zeros(d_model),
        "wk": uni(d_model, (d_model, d_model)), "bk": np.zeros(d_model),
        "wv": uni(d_model, (d_model, d_model)), "bv": np.zeros(d_model),
        "wo": uni(d_model, (d_model, d_model)), "bo": np.zeros(d_model),
        "ln1_g": np.ones(d_model), "ln1_b": np.zeros(d_model),
        "w1": uni(d_model, (d_model, d_ff)), "b1": np.zeros(d_ff),
        "w2": uni(d_ff, (d_ff, d_model)), "b2": np.zeros(d_model),
        "ln2_g": np.ones(d_model), "ln2_b": np.zeros(d_model),
    }
    return {
        name: Tensor(raw[name], dtype=dtype, requires_grad=True, name=prefix + name)
        for name in LAYER_PARAM_NAMES
    }


def _split_heads(x, n_heads):
    b, L, d = x.shape
    return nx.transpose(nx.reshape(x, (b, L, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, L, hd = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (b, L, h * hd))


def _qkv(x, p, cfg, cache):
    L = x.shape[1]
    pos = np.arange(L)
    q = rope_apply(_split_heads(nx.linear(x, p["wq"], p["bq"]), cfg.n_heads), pos, cache)
    k = rope_apply(_split_heads(nx.linear(x, p["wk"], p["bk"]), cfg.n_heads), pos, cache)
    v = _split_heads(nx.linear(x, p["wv"], p["bv"]), cfg.n_heads)
    return q, k, v


def _ffn(h, p):
    return nx.linear(nx.gelu(nx.linear(h, p["w1"], p["b1"])), p["w2"], p["b2"])


def _as_batch(x, key_mask):
    squeeze = x.ndim == 2
    if squeeze:
        x = nx.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise DimensionError(f"layer input must be (L, d) or (B, L, d), got {x.shape}")
    km = None
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool).reshape(x.shape[0], x.shape[1])
    return x, km, squeeze


def _bpt_forward(x, p, cfg, cache, key_mask, meter, workers, eps):
    q, k, v = _qkv(x, p, cfg, cache)
    mask = None if key_mask is None else key_mask[:, None, None, :]
    blocks = []
    for qs, qe in _blocks(x.shape[1], cfg.q_chunk):
        qb = nx.getitem(q, (slice(None), slice(None), slice(qs, qe)))
        attn = blockwise_attention(qb, k, v, mask, qe - qs, cfg.kv_chunk, meter, workers)
        attn = nx.linear(_merge_heads(attn), p["wo"], p["bo"])
        xb = nx.getitem(x, (slice(None), slice(qs, qe)))
        h = nx.layer_norm(nx.add(xb, attn), p["ln1_g"], p["ln1_b"], eps)
        blocks.append(nx.layer_norm(nx.add(h, _ffn(h, p)), p["ln2_g"], p["ln2_b"], eps))
    return blocks[0] if len(blocks) == 1 else nx.concat(blocks, axis=1)


def bpt_layer(
    x: Tensor,
    params: dict,
    cfg: AttentionConfig,
    key_mask=None,
    recompute: bool = False,
    cache: RopeCache | None = None,
    meter: AttnScratchMeter | None = None,
    workers: int = 1,
    eps: float = 1e-5,
) -> Tensor:
    """One post-norm transformer layer evaluated query block by query block.

    For every query block: rotary multi-head blockwise attention, residual,
    layer norm, feed-forward on that block only, residual, layer norm.
    ``key_mask`` (B, L) marks real (non-padding) positions. With
    ``recompute`` the layer's intermediates are dropped after the forward
    pass and regenerated during backward.
    """
    x, km, squeeze = _as_batch(x, key_mask)
    if x.shape[-1] != cfg.d_model:
        raise DimensionError(f"layer input width {x.shape[-1]} != d_model {cfg.d_model}")
    if cache is None:
        cache = RopeCache.for_config(cfg, x.dtype)
    names = list(LAYER_PARAM_NAMES)
    tensors = [params[n] for n in names]

    def fn(xi, *ps):
        return _bpt_forward(xi, dict(zip(names, ps)), cfg, cache, km, meter, workers, eps)

    out = nx.checkpoint(fn, x, *tensors) if recompute else fn(x, *tensors)
    return nx.reshape(out, out.shape[1:]) if squeeze else out


def reference_layer(x, params, cfg, key_mask=None, cache=None, eps=1e-5):
    """Unblocked counterpart of :func:`bpt_layer` using vanilla attention."""
    x, km, squeeze = _as_batch(x, key_mask)
    if cache is None:
        cache = RopeCache.for_config(cfg, x.dtype)
    q, k, v = _qkv(x, params, cfg, cache)
    mask = None if km is None else km[:, None, None, :]
    attn = nx.linear(_merge_heads(vanilla_attention(q, k, v, mask)), params["wo"], params["bo"])
    h = nx.layer_norm(nx.add(x, attn), params["ln1_g"], params["ln1_b"], eps)
    out = nx.layer_norm(nx.add(h, _ffn(h, params)), params["ln2_g"], params["ln2_b"], eps)
    return nx.reshape(out, out.shape[1:]) if squeeze else out
