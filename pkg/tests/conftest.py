import pytest

from bptrank.attention import AttentionConfig
from bptrank.config import PipelineConfig
from bptrank.model import CrossEncoder, ModelConfig, build_vocab

TINY_TEXTS = [
    "Hà Nội là thủ đô của Việt Nam.",
    "Thành phố có nhiều hồ nước đẹp.",
    "Phở là món ăn nổi tiếng.",
    "Sông Hồng chảy qua thành phố.",
]


def tiny_model(dtype="f64", d_model=16, n_layers=2, seed=0, max_seq_len=64, chunk=4):
    vocab = build_vocab(TINY_TEXTS, 100)
    attn = AttentionConfig(d_model=d_model, n_heads=2, q_chunk=chunk, kv_chunk=chunk, max_seq_len=max_seq_len)
    cfg = ModelConfig(attention=attn, n_layers=n_layers, vocab_size=vocab.size, dtype=dtype)
    return CrossEncoder.initialize(cfg, vocab, seed)


@pytest.fixture(scope="session")
def toy_run():
    """One seed of the bundled toy end-to-end run (trained and untrained models, metrics)."""
    from bptrank.pipeline import run_toy

    cfg = PipelineConfig.preset("toy").with_overrides(["eval.seeds=0"])
    return run_toy(cfg)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        title, ok, elapsed, note = RESULTS[n]
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title} ({elapsed:.1f}s)"
        terminalreporter.write_line(line + (f" -- {note}" if note else ""))
