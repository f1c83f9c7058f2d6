"""Cache-augmented generation toolkit.

A self-contained byte-level transformer plus the machinery to preload a
knowledge corpus into a reusable KV cache, answer queries against it with
session resets, compare against retrieve-then-read baselines, and benchmark
quality and latency.
"""

from .config import ModelConfig, TrainConfig, config_hash
from .corpus import Corpus, Document, QAPair, load_corpus, load_qa
from .errors import (CagError, CapacityError, CorruptionError, FormatError,
                     IncompatibilityError, InvalidMarkError,
                     MalformedSequenceError, ParseError, TrainingDivergedError,
                     ValidationError)
from .harness import (ExperimentReport, QualityConfig, ReportRow,
                      build_testset, run_quality, run_timing)
from .kvcache import (CacheMark, KVCache, cache_file_size, kv_encode,
                      load_cache, new_cache, read_cache_header, save_cache,
                      snapshot_mark, truncate_to, verify_cache)
from .metrics import exact_match, normalize_text, token_f1
from .model import (GenerationResult, forward_extend, greedy_generate,
                    hidden_states, recompute_prompt_tokens)
from .retrieval import (Bm25Index, DenseIndex, RetrievedPassages, bm25_build,
                        bm25_idf, bm25_topk, dense_build, dense_topk,
                        embed_text, rag_generate)
from .rng import SplitMix64
from .tokenizer import (BOS, EOS, SEP, VOCAB_SIZE, decode_bytes, detokenize,
                        tokenize)
from .training import (AdamState, adam_step, evaluate_lookup_em,
                       loss_and_grads, make_lookup_task, task_to_corpus,
                       task_to_qa, train_lookup)
from .weights import Weights, init_weights, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "AdamState", "BOS", "Bm25Index", "CacheMark", "CagError", "CapacityError",
    "Corpus", "CorruptionError", "DenseIndex", "Document", "EOS",
    "ExperimentReport", "FormatError", "GenerationResult",
    "IncompatibilityError", "InvalidMarkError", "KVCache",
    "MalformedSequenceError", "ModelConfig", "ParseError", "QAPair",
    "QualityConfig", "ReportRow", "RetrievedPassages", "SEP", "SplitMix64",
    "TrainConfig", "TrainingDivergedError", "VOCAB_SIZE", "ValidationError",
    "Weights", "adam_step", "bm25_build", "bm25_idf", "bm25_topk",
    "build_testset", "cache_file_size", "config_hash", "decode_bytes",
    "dense_build", "dense_topk", "detokenize", "embed_text",
    "evaluate_lookup_em", "exact_match", "forward_extend", "greedy_generate",
    "hidden_states", "init_weights", "kv_encode", "load_cache", "load_corpus",
    "load_qa", "load_weights", "loss_and_grads", "make_lookup_task",
    "new_cache", "normalize_text", "rag_generate", "read_cache_header",
    "recompute_prompt_tokens",
    "run_quality", "run_timing", "save_cache", "save_weights",
    "snapshot_mark", "task_to_corpus", "task_to_qa", "token_f1", "tokenize",
    "train_lookup", "truncate_to", "verify_cache",
]
