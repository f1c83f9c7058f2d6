"""Benchmark harness: test-set sampling, quality runs, and the timing ladder.

Quality runs compare one preloaded-cache system against retrieve-then-read
baselines at several k, scoring exact match and token F1. Timing runs
compare cached generation against full in-context recompute across a ladder
of context sizes. Both emit an ExperimentReport serializable to JSON.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import config_hash
from .corpus import Corpus, Document, QAPair
from .errors import CapacityError, ValidationError
from .kvcache import (corpus_prefix_tokens, kv_encode, load_cache, save_cache,
                      truncate_to)
from .metrics import exact_match, token_f1
from .model import greedy_generate, recompute_prompt_tokens
from .kvcache import new_cache
from .retrieval import bm25_build, bm25_topk, dense_build, dense_topk, \
    rag_generate
from .rng import SplitMix64
from .tokenizer import tokenize
from .weights import Weights

SUBSTITUTION_NOTICE = (
    "metrics are exact-match and token-F1 (external-encoder similarity "
    "scoring is out of scope); the generator is a self-contained byte-level "
    "model, so absolute scores and seconds are not comparable to "
    "production-scale systems")

_SIZE_LABELS = ("small", "medium", "large")


@dataclass(frozen=True)
class ReportRow:
    system: str
    size_label: str
    top_k: int | None
    exact_match: float
    token_f1: float
    mean_generation_time_s: float
    n_questions: int

    def __post_init__(self):
        if not 0.0 <= self.exact_match <= 1.0:
            raise ValidationError("exact_match must lie in [0, 1]")
        if not 0.0 <= self.token_f1 <= 1.0:
            raise ValidationError("token_f1 must lie in [0, 1]")
        if self.mean_generation_time_s < 0:
            raise ValidationError("times must be non-negative")


@dataclass
class ExperimentReport:
    metadata: dict
    rows: list[ReportRow]

    def to_dict(self) -> dict:
        return {"metadata": dict(self.metadata),
                "rows": [asdict(r) for r in self.rows]}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ExperimentReport":
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls(metadata=obj["metadata"],
                   rows=[ReportRow(**r) for r in obj["rows"]])


def build_testset(corpus: Corpus, qa, n_docs: int,
                  seed: int) -> tuple[Corpus, list[QAPair]]:
    """Uniform document sample (original order kept) plus the QA pairs whose
    supporting documents all fall inside the sample."""
    if n_docs > len(corpus):
        raise ValidationError(
            f"cannot sample {n_docs} docs from a corpus of {len(corpus)}")
    rng = SplitMix64(seed)
    idx = rng.sample_indices(len(corpus), n_docs)
    sample = Corpus(tuple(corpus[i] for i in idx))
    ids = {d.id for d in sample}
    kept = [q for q in qa if q.doc_ids and all(d in ids for d in q.doc_ids)]
    return sample, kept


@dataclass(frozen=True)
class QualityConfig:
    systems: tuple[str, ...] = ("CAG", "sparse-RAG", "dense-RAG")
    ks: tuple[int, ...] = (1, 3, 5, 10)
    max_new_tokens: int = 16
    size_label: str = "small"
    extra_metadata: dict = field(default_factory=dict)


def _score(prediction: str, qa: QAPair) -> tuple[float, float]:
    return exact_match(prediction, qa.answers), token_f1(prediction,
                                                         qa.answers)


def run_quality(corpus: Corpus, qa, weights: Weights,
                config: QualityConfig = QualityConfig()) -> ExperimentReport:
    """Score each system on the same questions; capacity failures score 0.

    The cached system encodes the corpus once and resets to the knowledge
    boundary after every question; retrieval systems retrieve and encode
    fresh per question, at every k. Per-question time covers the whole
    query-conditioned path (retrieval, passage encoding, decoding) but
    never corpus preloading.
    """
    qa = list(qa)
    if not qa:
        raise ValidationError("no QA pairs to evaluate")
    for pair in qa:
        for d in pair.doc_ids:
            corpus.by_id(d)  # raises on unknown id
    rows: list[ReportRow] = []
    meta: dict = {
        "config_hash": f"{config_hash(weights.config):016x}",
        "model": asdict(weights.config),
        "bm25": {"k1": 1.2, "b": 0.75},
        "ks": list(config.ks),
        "max_new_tokens": config.max_new_tokens,
        "n_documents": len(corpus),
        "n_questions": len(qa),
        "substitution_notice": SUBSTITUTION_NOTICE,
    }
    meta.update(config.extra_metadata)

    if "CAG" in config.systems:
        t0 = time.perf_counter()
        cache = kv_encode(weights, corpus)
        meta["cache_encode_s"] = time.perf_counter() - t0
        mark = cache.doc_mark
        em = f1 = spent = 0.0
        for pair in qa:
            t0 = time.perf_counter()
            try:
                res = greedy_generate(weights, cache, tokenize(pair.question),
                                      max_new_tokens=config.max_new_tokens)
                prediction = res.text
            except CapacityError:
                prediction = ""
            finally:
                if cache.n_tokens > mark.position:
                    truncate_to(cache, mark)
            spent += time.perf_counter() - t0
            e, f = _score(prediction, pair)
            em += e
            f1 += f
        rows.append(ReportRow(
            system="CAG", size_label=config.size_label, top_k=None,
            exact_match=em / len(qa), token_f1=f1 / len(qa),
            mean_generation_time_s=spent / len(qa), n_questions=len(qa)))

    retrievers = {}
    if "sparse-RAG" in config.systems:
        index = bm25_build(corpus)
        retrievers["sparse-RAG"] = \
            lambda question, k: bm25_topk(index, question, k)
    if "dense-RAG" in config.systems:
        t0 = time.perf_counter()
        dindex = dense_build(weights, corpus)
        meta["dense_index_build_s"] = time.perf_counter() - t0
        retrievers["dense-RAG"] = \
            lambda question, k: dense_topk(dindex, weights, question, k)

    for system, retrieve in retrievers.items():
        for k in config.ks:
            em = f1 = spent = 0.0
            for pair in qa:
                t0 = time.perf_counter()
                try:
                    passages = retrieve(pair.question, k)
                    res = rag_generate(weights, passages, corpus,
                                       pair.question,
                                       max_new_tokens=config.max_new_tokens)
                    prediction = res.text
                except CapacityError:
                    prediction = ""
                spent += time.perf_counter() - t0
                e, f = _score(prediction, pair)
                em += e
                f1 += f
            rows.append(ReportRow(
                system=system, size_label=config.size_label, top_k=k,
                exact_match=em / len(qa), token_f1=f1 / len(qa),
                mean_generation_time_s=spent / len(qa),
                n_questions=len(qa)))
    return ExperimentReport(metadata=meta, rows=rows)


def _filler_text(rng: SplitMix64, length: int) -> str:
    words = [rng.letters(5) for _ in range(length // 6 + 1)]
    return " ".join(words)[:length]


def _filler_corpus(rng: SplitMix64, total_tokens: int) -> Corpus:
    """Documents whose rendered prefix (BOS included) is total_tokens long.

    Each standard document renders to 64 tokens: 4-byte title, newline,
    58-byte text, separator; the final document absorbs the remainder.
    """
    if total_tokens < 8:
        raise ValidationError("context size must be at least 8 tokens")
    remaining = total_tokens - 1
    docs = []
    i = 0
    # keep remainders representable: min document is title(4)+nl+text(1)+SEP
    while remaining >= 64 + 7:
        docs.append(Document(id=f"f{i:04d}", title=f"{i:04d}",
                             text=_filler_text(rng, 58)))
        remaining -= 64
        i += 1
    docs.append(Document(id=f"f{i:04d}", title=f"{i:04d}",
                         text=_filler_text(rng, remaining - 6)))
    return Corpus(tuple(docs))


def run_timing(weights: Weights, context_sizes=(512, 2048, 6144),
               n_queries: int = 4, query_len: int = 32,
               max_new_tokens: int = 32, seed: int = 0) -> ExperimentReport:
    """Cached generation vs full recompute across the context ladder.

    Per size, the cached path encodes once, round-trips the cache through
    disk (encode/save/load seconds go to metadata, not rows), then times
    only per-query decoding with a reset between queries. The recompute
    path re-feeds the whole prefix with every query. Quality fields are 0:
    queries are random bytes with no gold answers.
    """
    import tempfile

    sizes = sorted(context_sizes)
    if len(sizes) > len(_SIZE_LABELS):
        raise ValidationError("at most three context sizes are supported")
    rng = SplitMix64(seed)
    rows: list[ReportRow] = []
    meta: dict = {
        "config_hash": f"{config_hash(weights.config):016x}",
        "model": asdict(weights.config),
        "context_sizes": {},
        "n_queries": n_queries,
        "query_len": query_len,
        "max_new_tokens": max_new_tokens,
        "seed": seed,
        "substitution_notice": SUBSTITUTION_NOTICE,
    }

    for label, size in zip(_SIZE_LABELS, sizes):
        corpus = _filler_corpus(rng, size)
        prefix = corpus_prefix_tokens(corpus)
        queries = []
        for _ in range(n_queries):
            words = [rng.letters(5) for _ in range(query_len // 6 + 1)]
            qtext = " ".join(words)
            queries.append(tokenize(qtext)[:query_len])

        t0 = time.perf_counter()
        cache = kv_encode(weights, corpus)
        encode_s = time.perf_counter() - t0
        mark = cache.doc_mark
        with tempfile.NamedTemporaryFile(suffix=".cagc") as tmp:
            t0 = time.perf_counter()
            save_cache(cache, tmp.name)
            save_s = time.perf_counter() - t0
            t0 = time.perf_counter()
            cache = load_cache(tmp.name, config_hash(weights.config))
            load_s = time.perf_counter() - t0

        # fixed-length decoding so both paths emit the same token count
        cag_times = []
        for qtok in queries:
            t0 = time.perf_counter()
            greedy_generate(weights, cache, qtok,
                            max_new_tokens=max_new_tokens, stop_at_eos=False)
            cag_times.append(time.perf_counter() - t0)
            truncate_to(cache, mark)

        rec_times = []
        for qtok in queries:
            fresh = new_cache(weights.config)
            full_query = recompute_prompt_tokens(prefix, qtok)[1:]
            t0 = time.perf_counter()
            greedy_generate(weights, fresh, full_query,
                            max_new_tokens=max_new_tokens, stop_at_eos=False)
            rec_times.append(time.perf_counter() - t0)

        cag_mean = float(np.mean(cag_times))
        rec_mean = float(np.mean(rec_times))
        meta["context_sizes"][label] = {
            "tokens": size,
            "n_documents": len(corpus),
            "cache_encode_s": encode_s,
            "cache_save_s": save_s,
            "cache_load_s": load_s,
            "speedup": rec_mean / cag_mean if cag_mean > 0 else float("inf"),
        }
        rows.append(ReportRow(
            system="CAG", size_label=label, top_k=None, exact_match=0.0,
            token_f1=0.0, mean_generation_time_s=cag_mean,
            n_questions=n_queries))
        rows.append(ReportRow(
            system="in-context-recompute", size_label=label, top_k=None,
            exact_match=0.0, token_f1=0.0, mean_generation_time_s=rec_mean,
            n_questions=n_queries))
    return ExperimentReport(metadata=meta, rows=rows)
