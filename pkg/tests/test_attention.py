import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bptrank import numerics as nx
from bptrank.attention import (
    AttentionConfig,
    AttnScratchMeter,
    RopeCache,
    blockwise_attention,
    bpt_layer,
    init_layer_params,
    reference_layer,
    rope_apply,
    vanilla_attention,
)
from bptrank.errors import ContractError, DegenerateRowError, DimensionError, RangeError


def T(a, dtype=np.float64, grad=False):
    return nx.Tensor(np.asarray(a, dtype=dtype), requires_grad=grad)


def qkv(rng, L, d=16, dtype=np.float64, lead=()):
    return [T(rng.normal(size=lead + (L, d)), dtype) for _ in range(3)]


# ------------------------------------------------------------------ RoPE


def test_rope_position_zero_is_identity():
    cache = RopeCache(8, 4)
    x = T(np.random.default_rng(0).normal(size=(1, 4)))
    assert np.array_equal(rope_apply(x, [0], cache).data, x.data)
    assert np.all(cache.cos[0] == 1) and np.all(cache.sin[0] == 0)


def test_rope_unit_angle():
    out = rope_apply(T([[1.0, 0.0]]), [1], RopeCache(4, 2, base=10000.0)).data[0]
    np.testing.assert_allclose(out, [math.cos(1.0), math.sin(1.0)], atol=1e-15)


def test_rope_preserves_norm():
    rng = np.random.default_rng(1)
    cache = RopeCache(64, 16)
    x = T(rng.normal(size=(10, 16)))
    pos = rng.integers(0, 64, size=10)
    out = rope_apply(x, pos, cache).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x.data, axis=-1), atol=1e-6)


def test_rope_relative_position_property():
    rng = np.random.default_rng(2)
    cache = RopeCache(256, 16)
    worst = 0.0
    for _ in range(1000):
        q, k = T(rng.normal(size=(1, 16))), T(rng.normal(size=(1, 16)))
        m, n, t = (int(v) for v in rng.integers(0, 80, size=3))
        a = float(np.sum(rope_apply(q, [m], cache).data * rope_apply(k, [n], cache).data))
        b = float(np.sum(rope_apply(q, [m + t], cache).data * rope_apply(k, [n + t], cache).data))
        worst = max(worst, abs(a - b))
    assert worst < 1e-6


def test_rope_out_of_range():
    with pytest.raises(RangeError):
        rope_apply(T(np.ones((1, 4))), [8], RopeCache(8, 4))
    with pytest.raises(ContractError):
        RopeCache(8, 3)


def test_rope_gradient():
    rng = np.random.default_rng(3)
    cache = RopeCache(16, 8)
    x = T(rng.normal(size=(5, 8)), grad=True)
    w = rng.normal(size=(5, 8))
    rep = nx.finite_diff_check(lambda: nx.sum(nx.mul(rope_apply(x, np.arange(5) + 3, cache), w)), [x])
    assert rep.worst < 1e-4


# ------------------------------------------------------------ vanilla kernel


def test_vanilla_single_key_returns_v():
    rng = np.random.default_rng(4)
    q, k, v = qkv(rng, 1)
    np.testing.assert_allclose(vanilla_attention(q, k, v).data, v.data)


def test_vanilla_identical_keys_average_values():
    rng = np.random.default_rng(5)
    q = T(rng.normal(size=(3, 4)))
    k = T(np.tile(rng.normal(size=(1, 4)), (5, 1)))
    v = T(rng.normal(size=(5, 4)))
    np.testing.assert_allclose(vanilla_attention(q, k, v).data, np.tile(v.data.mean(0), (3, 1)), atol=1e-12)


def test_vanilla_engineered_scores():
    # q.k / sqrt(d) with d=1 gives scores [0, ln 3]
    q, k = T([[1.0]]), T([[0.0], [math.log(3.0)]])
    v = T([[2.0], [6.0]])
    np.testing.assert_allclose(vanilla_attention(q, k, v).data, [[0.25 * 2 + 0.75 * 6]], atol=1e-12)


def test_fully_masked_row_rejected():
    rng = np.random.default_rng(6)
    q, k, v = qkv(rng, 4)
    mask = np.ones((4, 4), dtype=bool)
    mask[2] = False
    with pytest.raises(DegenerateRowError):
        vanilla_attention(q, k, v, mask)
    with pytest.raises(DegenerateRowError):
        blockwise_attention(q, k, v, mask, 2, 2)


def test_shape_mismatch():
    rng = np.random.default_rng(7)
    q, k, _ = qkv(rng, 4)
    with pytest.raises(DimensionError):
        vanilla_attention(q, k, T(np.ones((3, 16))))


# --------------------------------------------------------- blockwise kernel


@pytest.mark.parametrize("L", [8, 33, 64])
@pytest.mark.parametrize("chunk", [1, 8, 32])
def test_blockwise_equals_vanilla(L, chunk):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for dtype, tol in ((np.float64, 1e-10), (np.float32, 1e-5)):
            q, k, v = qkv(rng, L, 16, dtype)
            diff = np.abs(blockwise_attention(q, k, v, None, chunk, chunk).data - vanilla_attention(q, k, v).data).max()
            assert diff < tol, (L, chunk, seed, dtype)


def test_blockwise_single_block_and_unit_blocks():
    rng = np.random.default_rng(8)
    q, k, v = qkv(rng, 8)
    ref = vanilla_attention(q, k, v).data
    assert np.abs(blockwise_attention(q, k, v, None, 8, 8).data - ref).max() < 1e-10
    assert np.abs(blockwise_attention(q, k, v, None, 1, 1).data - ref).max() < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31))
def test_blockwise_with_padding_mask(lq, lk, qc, kc, seed):
    rng = np.random.default_rng(seed)
    q = T(rng.normal(size=(2, lq, 8)))
    k, v = T(rng.normal(size=(2, lk, 8))), T(rng.normal(size=(2, lk, 8)))
    keep = rng.random((2, 1, lk)) < 0.7
    keep[:, :, 0] = True
    out = blockwise_attention(q, k, v, keep, qc, kc).data
    assert np.abs(out - vanilla_attention(q, k, v, keep).data).max() < 1e-10


def test_blockwise_gradient_matches_vanilla():
    rng = np.random.default_rng(9)
    q, k, v = (T(rng.normal(size=(2, 11, 8)), grad=True) for _ in range(3))
    keep = np.ones((2, 1, 11), dtype=bool)
    keep[1, :, 7:] = False
    w = rng.normal(size=(2, 11, 8))
    grads = []
    for fn in (lambda: blockwise_attention(q, k, v, keep, 4, 3), lambda: vanilla_attention(q, k, v, keep)):
        with nx.Tape() as tape:
            loss = nx.sum(nx.mul(fn(), w))
        g = nx.backward(tape, loss)
        grads.append([g[q], g[k], g[v]])
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, atol=1e-10)
    rep = nx.finite_diff_check(lambda: nx.sum(nx.mul(blockwise_attention(q, k, v, keep, 4, 3), w)), [q, k, v])
    assert rep.worst < 1e-4


def test_worker_count_does_not_change_output():
    rng = np.random.default_rng(10)
    q, k, v = qkv(rng, 70, lead=(2, 3))
    one = blockwise_attention(q, k, v, None, 8, 8, workers=1).data
    four = blockwise_attention(q, k, v, None, 8, 8, workers=4).data
    assert np.array_equal(one, four)


def test_bad_chunk_sizes():
    rng = np.random.default_rng(11)
    q, k, v = qkv(rng, 4)
    with pytest.raises(ContractError):
        blockwise_attention(q, k, v, None, 0, 2)


# ------------------------------------------------------------- scratch meter


@pytest.mark.parametrize("L", [256, 512, 1024])
def test_scratch_ratio(L):
    d = 16
    rng = np.random.default_rng(12)
    q, k, v = qkv(rng, L, d, np.float32)
    mv, mb = AttnScratchMeter(), AttnScratchMeter()
    with nx.no_grad():
        vanilla_attention(q, k, v, meter=mv)
        blockwise_attention(q, k, v, None, 32, 32, meter=mb)
    assert mv.peak / mb.peak >= 0.5 * L * L / (32 * (32 + d))
    assert mb.peak <= 4 * 32 * (32 + d)
    assert mv.live == 0 and mb.live == 0


def test_meter_reset():
    m = AttnScratchMeter()
    m.alloc(10)
    m.free(10)
    assert m.peak == 10
    m.reset()
    assert m.peak == 0 and m.live == 0


# ---------------------------------------------------------------- BPT layer


def layer_setup(seed=0, dtype=np.float64, L=13, d=16, heads=2, chunk=4):
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(d_model=d, n_heads=heads, q_chunk=chunk, kv_chunk=chunk, max_seq_len=64)
    params = init_layer_params(rng, d, 4 * d, dtype)
    x = nx.Tensor(rng.normal(size=(L, d)).astype(dtype), requires_grad=True)
    return cfg, params, x, rng


def test_layer_matches_unblocked_reference():
    for dtype, tol in ((np.float32, 1e-5), (np.float64, 1e-10)):
        cfg, params, x, _ = layer_setup(dtype=dtype)
        diff = np.abs(bpt_layer(x, params, cfg).data - reference_layer(x, params, cfg).data).max()
        assert diff < tol


def test_layer_with_padding_matches_reference():
    cfg, params, _, rng = layer_setup()
    x = T(rng.normal(size=(3, 13, 16)))
    km = np.ones((3, 13), dtype=bool)
    km[1, 9:] = False
    km[2, 4:] = False
    diff = np.abs(bpt_layer(x, params, cfg, km).data - reference_layer(x, params, cfg, km).data).max()
    assert diff < 1e-10


def test_recompute_is_bit_identical():
    cfg, params, x, rng = layer_setup()
    w = rng.normal(size=x.shape)
    out = {}
    for flag in (False, True):
        with nx.Tape() as tape:
            loss = nx.sum(nx.mul(bpt_layer(x, params, cfg, recompute=flag), w))
        g = nx.backward(tape, loss)
        out[flag] = (loss.item(), g[x], [g[p] for p in params.values()], tape.saved_elements)
    assert out[False][0] == out[True][0]
    assert np.array_equal(out[False][1], out[True][1])
    assert all(np.array_equal(a, b) for a, b in zip(out[False][2], out[True][2]))
    assert out[True][3] < out[False][3]


@pytest.mark.parametrize("recompute", [False, True])
def test_layer_gradient(recompute):
    cfg, params, x, rng = layer_setup(L=9)
    w = rng.normal(size=x.shape)

    def f():
        return nx.sum(nx.mul(bpt_layer(x, params, cfg, recompute=recompute), w))

    rep = nx.finite_diff_check(f, [x, *params.values()], max_probes=64)
    assert rep.worst < 1e-4, rep.max_rel_error


def test_attention_config_validation():
    with pytest.raises(ContractError):
        AttentionConfig(d_model=10, n_heads=3)
    with pytest.raises(ContractError):
        AttentionConfig(d_model=12, n_heads=4)  # odd head_dim
    with pytest.raises(ContractError):
        AttentionConfig(d_model=16, n_heads=2, q_chunk=64, max_seq_len=32)
