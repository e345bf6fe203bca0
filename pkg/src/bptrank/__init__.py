"""Blockwise-attention cross-encoder reranking: mining, training and evaluation."""

from .attention import AttentionConfig, blockwise_attention, bpt_layer, rope_apply, vanilla_attention
from .config import PipelineConfig
from .corpus import Chunk, RawDocument, chunk_segments, ict_seed, normalize_text, segment_sentences
from .errors import BptRankError
from .evalbench import BenchReport, MetricReport, bench, evaluate, mrr_at_k, ndcg_at_k
from .mining import TripletRecord, bm25_build, bm25_search, dense_rerank, mine_triplets, mmr_select
from .model import CrossEncoder, ModelConfig, build_vocab, load_checkpoint, save_checkpoint, score, tokenize
from .training import MemoryBank, TrainConfig, memory_bank_step, train, triplet_loss

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "BenchReport", "BptRankError", "Chunk", "CrossEncoder", "MemoryBank", "MetricReport",
    "ModelConfig", "PipelineConfig", "RawDocument", "TrainConfig", "TripletRecord", "bench", "blockwise_attention",
    "bm25_build", "bm25_search", "bpt_layer", "build_vocab", "chunk_segments", "dense_rerank", "evaluate",
    "ict_seed", "load_checkpoint", "memory_bank_step", "mine_triplets", "mmr_select", "mrr_at_k", "ndcg_at_k",
    "normalize_text", "rope_apply", "save_checkpoint", "score", "segment_sentences", "tokenize", "train",
    "triplet_loss", "vanilla_attention",
]
