"""Append-only per-layer key/value cache with snapshot/truncate reset.

Rows live in preallocated buffers grown geometrically; ``n_tokens`` marks the
filled prefix, so truncation is O(1) bookkeeping and never rewrites rows.
A cache belongs to one generation session at a time; use ``clone`` for
concurrent sessions over the same prefix.

On-disk format (little-endian), header 52 bytes then payload:

    magic       4s   "CAGC"
    version     u32  1
    config_hash u64
    n_layers    u32
    n_heads     u32
    head_dim    u32
    n_tokens    u64
    doc_mark    u64
    checksum    u64  FNV-1a over the payload
    payload          per layer: K rows then V rows,
                     each row-major [n_tokens, n_heads, head_dim] float32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig, config_hash
from .corpus import Corpus, Document
from .errors import (CapacityError, CorruptionError, FormatError,
                     IncompatibilityError, InvalidMarkError)
from .rng import MASK64
from .tokenizer import BOS, SEP, tokenize

CACHE_MAGIC = b"CAGC"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIQIIIQQQ")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


@dataclass(frozen=True)
class CacheMark:
    """Token count captured at a reset point."""

    position: int


class KVCache:
    """Key/value rows for a token prefix of one model configuration."""

    __slots__ = ("config_hash", "n_layers", "n_heads", "head_dim",
                 "n_tokens", "doc_mark", "_k", "_v", "_capacity")

    def __init__(self, cfg_hash: int, n_layers: int, n_heads: int,
                 head_dim: int):
        self.config_hash = cfg_hash
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.n_tokens = 0
        # position 0 means "no knowledge preload recorded"
        self.doc_mark = CacheMark(0)
        self._capacity = 0
        self._k = [None] * n_layers
        self._v = [None] * n_layers

    def _grow(self, needed: int) -> None:
        if needed <= self._capacity:
            return
        new_cap = max(64, needed, 2 * self._capacity)
        shape = (new_cap, self.n_heads, self.head_dim)
        for i in range(self.n_layers):
            k = np.zeros(shape, dtype=np.float32)
            v = np.zeros(shape, dtype=np.float32)
            if self._capacity:
                k[:self.n_tokens] = self._k[i][:self.n_tokens]
                v[:self.n_tokens] = self._v[i][:self.n_tokens]
            self._k[i] = k
            self._v[i] = v
        self._capacity = new_cap

    def append(self, ks, vs) -> None:
        """Append [T, n_heads, head_dim] rows for every layer at once."""
        t = ks[0].shape[0]
        self._grow(self.n_tokens + t)
        lo, hi = self.n_tokens, self.n_tokens + t
        for i in range(self.n_layers):
            self._k[i][lo:hi] = ks[i]
            self._v[i][lo:hi] = vs[i]
        self.n_tokens = hi

    def k_rows(self, layer: int) -> np.ndarray:
        """View of the filled K rows for one layer; do not mutate."""
        if self._k[layer] is None:
            return np.zeros((0, self.n_heads, self.head_dim), dtype=np.float32)
        return self._k[layer][:self.n_tokens]

    def v_rows(self, layer: int) -> np.ndarray:
        if self._v[layer] is None:
            return np.zeros((0, self.n_heads, self.head_dim), dtype=np.float32)
        return self._v[layer][:self.n_tokens]

    def clone(self) -> "KVCache":
        out = KVCache(self.config_hash, self.n_layers, self.n_heads,
                      self.head_dim)
        out.n_tokens = self.n_tokens
        out.doc_mark = self.doc_mark
        if self.n_tokens:
            out._grow(self.n_tokens)
            for i in range(self.n_layers):
                out._k[i][:self.n_tokens] = self._k[i][:self.n_tokens]
                out._v[i][:self.n_tokens] = self._v[i][:self.n_tokens]
        return out


def new_cache(config: ModelConfig) -> KVCache:
    return KVCache(config_hash(config), config.n_layers, config.n_heads,
                   config.head_dim)


def snapshot_mark(cache: KVCache) -> CacheMark:
    return CacheMark(cache.n_tokens)


def truncate_to(cache: KVCache, mark: CacheMark) -> KVCache:
    """Drop every row at or past the mark, in place; returns the cache.

    Position 0 is never a valid target: the BOS row is permanent.
    """
    pos = mark.position
    if not 1 <= pos <= cache.n_tokens:
        raise InvalidMarkError(
            f"mark position {pos} outside valid range [1, {cache.n_tokens}]")
    cache.n_tokens = pos
    if cache.doc_mark.position > pos:
        cache.doc_mark = CacheMark(pos)
    return cache


def document_tokens(doc: Document) -> list[int]:
    """One document rendered for the knowledge prefix: title, newline, text, SEP."""
    return tokenize(doc.title) + tokenize("\n") + tokenize(doc.text) + [SEP]


def corpus_prefix_tokens(corpus: Corpus) -> list[int]:
    """BOS followed by every document in corpus order."""
    tokens = [BOS]
    for doc in corpus:
        tokens.extend(document_tokens(doc))
    return tokens


def kv_encode(weights, corpus: Corpus) -> KVCache:
    """Precompute the cache for a document collection.

    Runs one forward pass over BOS plus the rendered documents and marks the
    resulting length as the knowledge boundary for later resets.
    """
    from .model import forward_extend

    tokens = corpus_prefix_tokens(corpus)
    limit = weights.config.max_context
    if len(tokens) > limit:
        raise CapacityError(
            f"corpus needs {len(tokens)} tokens but the context window "
            f"holds {limit}", required=len(tokens), available=limit)
    cache = new_cache(weights.config)
    forward_extend(weights, cache, tokens)
    cache.doc_mark = CacheMark(cache.n_tokens)
    return cache


def cache_file_size(n_layers: int, n_heads: int, head_dim: int,
                    n_tokens: int) -> int:
    """Exact byte size of a saved cache."""
    return _CACHE_HEADER.size + 4 * 2 * n_layers * n_tokens * n_heads * head_dim


def save_cache(cache: KVCache, path) -> int:
    """Write the cache; returns bytes written."""
    parts = []
    for i in range(cache.n_layers):
        parts.append(np.ascontiguousarray(cache.k_rows(i), dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(cache.v_rows(i), dtype="<f4").tobytes())
    payload = b"".join(parts)
    header = _CACHE_HEADER.pack(
        CACHE_MAGIC, CACHE_VERSION, cache.config_hash, cache.n_layers,
        cache.n_heads, cache.head_dim, cache.n_tokens,
        cache.doc_mark.position, fnv1a64(payload))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    return len(header) + len(payload)


def read_cache_header(path) -> dict:
    """Parse just the header fields; no checksum verification."""
    with open(path, "rb") as fh:
        head = fh.read(_CACHE_HEADER.size)
    if len(head) < _CACHE_HEADER.size:
        raise CorruptionError(f"{path}: file shorter than the header")
    magic, version, cfg_hash, n_layers, n_heads, head_dim, n_tokens, \
        doc_mark, checksum = _CACHE_HEADER.unpack(head)
    if magic != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return {"config_hash": cfg_hash, "n_layers": n_layers, "n_heads": n_heads,
            "head_dim": head_dim, "n_tokens": n_tokens, "doc_mark": doc_mark,
            "checksum": checksum}


def verify_cache(path) -> dict:
    """Header fields of a structurally valid cache file.

    Runs every integrity check load_cache performs except the model-hash
    match, without materializing the cache. Raises FormatError or
    CorruptionError on any failure.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CACHE_HEADER.size:
        raise CorruptionError(f"{path}: file shorter than the header")
    magic, version, cfg_hash, n_layers, n_heads, head_dim, n_tokens, \
        doc_mark, checksum = _CACHE_HEADER.unpack_from(blob)
    if magic != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = blob[_CACHE_HEADER.size:]
    expected = 4 * 2 * n_layers * n_tokens * n_heads * head_dim
    if len(payload) != expected:
        raise CorruptionError(
            f"{path}: expected {expected} payload bytes, found {len(payload)}")
    if fnv1a64(payload) != checksum:
        raise CorruptionError(f"{path}: checksum mismatch")
    if doc_mark > n_tokens:
        raise CorruptionError(f"{path}: doc_mark {doc_mark} exceeds "
                              f"n_tokens {n_tokens}")
    return {"config_hash": cfg_hash, "n_layers": n_layers, "n_heads": n_heads,
            "head_dim": head_dim, "n_tokens": n_tokens, "doc_mark": doc_mark,
            "checksum": checksum}


def load_cache(path, expected_config_hash: int) -> KVCache:
    """Read a cache written for the model identified by the expected hash."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CACHE_HEADER.size:
        raise CorruptionError(f"{path}: file shorter than the header")
    magic, version, cfg_hash, n_layers, n_heads, head_dim, n_tokens, \
        doc_mark, checksum = _CACHE_HEADER.unpack_from(blob)
    if magic != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if cfg_hash != expected_config_hash:
        raise IncompatibilityError(
            f"{path}: cache was written for a different model config")

    payload = blob[_CACHE_HEADER.size:]
    expected = 4 * 2 * n_layers * n_tokens * n_heads * head_dim
    if len(payload) != expected:
        raise CorruptionError(
            f"{path}: expected {expected} payload bytes, found {len(payload)}")
    if fnv1a64(payload) != checksum:
        raise CorruptionError(f"{path}: checksum mismatch")
    if doc_mark > n_tokens:
        raise CorruptionError(f"{path}: doc_mark {doc_mark} exceeds "
                              f"n_tokens {n_tokens}")

    cache = KVCache(cfg_hash, n_layers, n_heads, head_dim)
    if n_tokens:
        cache._grow(n_tokens)
        row = n_tokens * n_heads * head_dim
        off = 0
        flat = np.frombuffer(payload, dtype="<f4")
        for i in range(n_layers):
            cache._k[i][:n_tokens] = flat[off:off + row].reshape(
                n_tokens, n_heads, head_dim)
            off += row
            cache._v[i][:n_tokens] = flat[off:off + row].reshape(
                n_tokens, n_heads, head_dim)
            off += row
    cache.n_tokens = n_tokens
    cache.doc_mark = CacheMark(doc_mark)
    return cache
