"""Retrieval baselines: BM25 sparse index, embedding-based dense index,
and retrieve-then-generate over a fresh cache.

Documents are indexed as "title\\ntext", the same rendering the generator
sees. Term extraction lowercases and takes maximal alphanumeric runs
(underscore excluded); repeated query terms count once.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .config import config_hash
from .corpus import Corpus
from .errors import CapacityError, IncompatibilityError, ValidationError
from .model import GenerationResult, greedy_generate, hidden_states
from .tokenizer import BOS, tokenize
from .weights import Weights

_TERM_RE = re.compile(r"[^\W_]+", re.UNICODE)


def terms(text: str) -> list[str]:
    return _TERM_RE.findall(text.lower())


def _doc_content(doc) -> str:
    return f"{doc.title}\n{doc.text}"


@dataclass(frozen=True)
class RetrievedPassages:
    """Ranked (doc_id, score) pairs, scores non-increasing, ids distinct."""

    items: tuple[tuple[str, float], ...]

    def __post_init__(self):
        ids = [d for d, _ in self.items]
        if len(ids) != len(set(ids)):
            raise ValidationError("duplicate doc_id in retrieved passages")
        scores = [s for _, s in self.items]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValidationError("passage scores must be non-increasing")

    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.items]

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class Bm25Index:
    k1: float
    b: float
    n_docs: int
    avg_doc_length: float
    doc_lengths: dict
    postings: dict


def bm25_idf(n_docs: int, df: int) -> float:
    return math.log((n_docs - df + 1) / (df + 0.5) + 1.0)


def bm25_build(corpus: Corpus, k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    if len(corpus) == 0:
        raise ValidationError("cannot index an empty corpus")
    postings: dict[str, list[tuple[str, int]]] = {}
    doc_lengths: dict[str, int] = {}
    for doc in corpus:
        doc_terms = terms(_doc_content(doc))
        doc_lengths[doc.id] = len(doc_terms)
        counts: dict[str, int] = {}
        for t in doc_terms:
            counts[t] = counts.get(t, 0) + 1
        for t, tf in counts.items():
            postings.setdefault(t, []).append((doc.id, tf))
    avg = sum(doc_lengths.values()) / len(doc_lengths)
    return Bm25Index(k1=k1, b=b, n_docs=len(doc_lengths),
                     avg_doc_length=avg, doc_lengths=doc_lengths,
                     postings=postings)


def bm25_topk(index: Bm25Index, query: str, k: int) -> RetrievedPassages:
    """Top-k documents by BM25; ties break toward ascending doc_id.

    Only documents with a positive score are returned, so fewer than k
    results is possible.
    """
    if k < 1:
        raise ValidationError("k must be at least 1")
    scores: dict[str, float] = {}
    for t in sorted(set(terms(query))):
        plist = index.postings.get(t)
        if not plist:
            continue
        idf = bm25_idf(index.n_docs, len(plist))
        for doc_id, tf in plist:
            if index.avg_doc_length > 0:
                norm = 1 - index.b + index.b * \
                    index.doc_lengths[doc_id] / index.avg_doc_length
            else:
                norm = 1.0
            contrib = idf * tf * (index.k1 + 1) / (tf + index.k1 * norm)
            scores[doc_id] = scores.get(doc_id, 0.0) + contrib
    ranked = sorted(((s, d) for d, s in scores.items() if s > 0),
                    key=lambda p: (-p[0], p[1]))
    return RetrievedPassages(tuple((d, s) for s, d in ranked[:k]))


def embed_text(weights: Weights, text: str) -> np.ndarray:
    """Unit-norm mean of the pre-head hidden states over all positions.

    A BOS token leads the sequence so the empty string still embeds.
    """
    tok = [BOS] + tokenize(text)
    if len(tok) > weights.config.max_context:
        raise CapacityError(
            f"text needs {len(tok)} tokens but the context window holds "
            f"{weights.config.max_context}", required=len(tok),
            available=weights.config.max_context)
    hidden = hidden_states(weights, tok).astype(np.float64)
    pooled = hidden.mean(axis=0)
    norm = float(np.linalg.norm(pooled))
    if norm > 0:
        pooled = pooled / norm
    return pooled.astype(np.float32)


@dataclass(frozen=True)
class DenseIndex:
    doc_ids: tuple[str, ...]
    vectors: np.ndarray
    source_config_hash: int


def dense_build(weights: Weights, corpus: Corpus) -> DenseIndex:
    vecs = [embed_text(weights, _doc_content(doc)) for doc in corpus]
    mat = np.stack(vecs) if vecs else np.zeros(
        (0, weights.config.d_model), dtype=np.float32)
    return DenseIndex(doc_ids=tuple(d.id for d in corpus), vectors=mat,
                      source_config_hash=config_hash(weights.config))


def dense_topk(index: DenseIndex, weights: Weights, query: str,
               k: int) -> RetrievedPassages:
    """Top-k by cosine similarity (vectors are unit-norm, so dot product)."""
    if k < 1:
        raise ValidationError("k must be at least 1")
    if index.source_config_hash != config_hash(weights.config):
        raise IncompatibilityError(
            "dense index was built with a different model configuration")
    qv = embed_text(weights, query).astype(np.float64)
    sims = index.vectors.astype(np.float64) @ qv
    ranked = sorted(((float(s), d) for s, d in zip(sims, index.doc_ids)),
                    key=lambda p: (-p[0], p[1]))
    return RetrievedPassages(tuple((d, s) for s, d in ranked[:k]))


def rag_generate(weights: Weights, passages: RetrievedPassages,
                 corpus: Corpus, query: str,
                 max_new_tokens: int = 64) -> GenerationResult:
    """Encode the retrieved passages fresh, then decode the query.

    Empty passages degrade to generation conditioned on the query alone.
    """
    from .kvcache import kv_encode

    sub = Corpus(tuple(corpus.by_id(d) for d in passages.doc_ids()))
    cache = kv_encode(weights, sub)
    return greedy_generate(weights, cache, tokenize(query),
                           max_new_tokens=max_new_tokens)
