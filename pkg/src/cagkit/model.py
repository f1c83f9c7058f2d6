"""Decoder-only transformer forward passes over an explicit KV cache.

Architecture per block: pre-norm RMSNorm, rotary multi-head attention,
residual add, pre-norm RMSNorm, SiLU feed-forward (two matrices, no gating),
residual add; final RMSNorm; logits through the transposed token embedding.
No biases anywhere.

Precision: parameters, activations between ops, and cache rows are float32;
every dot product accumulates in float64 and rounds once per op. That makes
incremental decoding agree with full-prompt forwards to float32 resolution
regardless of how the token stream is blocked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, IncompatibilityError, ValidationError
from .kvcache import KVCache
from .tokenizer import BOS, EOS, SEP, decode_bytes
from .weights import Weights

RMS_EPS = 1e-5

# rows per incremental block; bounds the attention score workspace
DEFAULT_BLOCK = 256


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, rounded to float32."""
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    ms = np.mean(x64 * x64, axis=-1, keepdims=True)
    return (x64 / np.sqrt(ms + RMS_EPS) * gain.astype(np.float64)).astype(
        np.float32)


def silu(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    pos = x64 >= 0
    sig = np.where(pos, 1.0 / (1.0 + np.exp(-np.abs(x64))),
                   np.exp(-np.abs(x64)) / (1.0 + np.exp(-np.abs(x64))))
    return (x64 * sig).astype(np.float32)


def rope_tables(positions: np.ndarray, head_dim: int,
                theta: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables [T, head_dim/2] for absolute positions."""
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate dimension pairs (2i, 2i+1) of [T, n_heads, head_dim] rows."""
    x64 = x.astype(np.float64)
    even, odd = x64[..., 0::2], x64[..., 1::2]
    c, s = cos[:, None, :], sin[:, None, :]
    out = np.empty_like(x64)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out.astype(np.float32)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x64 = x.astype(np.float64)
    x64 = x64 - x64.max(axis=axis, keepdims=True)
    e = np.exp(x64)
    return e / e.sum(axis=axis, keepdims=True)


def _attention(q: np.ndarray, k_all: np.ndarray, v_all: np.ndarray,
               start: int) -> np.ndarray:
    """Causal attention of [T, H, hd] queries over [S, H, hd] cache rows.

    Query row t sits at absolute position start + t and may attend to key
    indices <= start + t.
    """
    t, h, hd = q.shape
    s = k_all.shape[0]
    q64 = q.transpose(1, 0, 2).astype(np.float64)
    k64 = k_all.transpose(1, 2, 0).astype(np.float64)
    scores = (q64 @ k64) / np.sqrt(float(hd))
    key_idx = np.arange(s)[None, None, :]
    qpos = (start + np.arange(t))[None, :, None]
    scores = np.where(key_idx > qpos, -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = probs @ v_all.transpose(1, 0, 2).astype(np.float64)
    return ctx.transpose(1, 0, 2).reshape(t, h * hd).astype(np.float32)


def _extend_block(weights: Weights, cache: KVCache,
                  toks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cfg = weights.config
    t = toks.shape[0]
    start = cache.n_tokens
    x = weights.token_embedding[toks]
    cos, sin = rope_tables(start + np.arange(t), cfg.head_dim, cfg.rope_theta)

    ks, vs = [], []
    for li, layer in enumerate(weights.layers):
        h = rmsnorm(x, layer.attn_gain)
        q = apply_rope(_mm(h, layer.wq).reshape(t, cfg.n_heads, cfg.head_dim),
                       cos, sin)
        k = apply_rope(_mm(h, layer.wk).reshape(t, cfg.n_heads, cfg.head_dim),
                       cos, sin)
        v = _mm(h, layer.wv).reshape(t, cfg.n_heads, cfg.head_dim)
        ks.append(k)
        vs.append(v)
        k_all = np.concatenate([cache.k_rows(li), k], axis=0)
        v_all = np.concatenate([cache.v_rows(li), v], axis=0)
        ctx = _attention(q, k_all, v_all, start)
        x = x + _mm(ctx, layer.wo)
        h2 = rmsnorm(x, layer.ffn_gain)
        x = x + _mm(silu(_mm(h2, layer.w1)), layer.w2)

    hidden = rmsnorm(x, weights.final_gain)
    logits = _mm(hidden, weights.token_embedding.T)
    # rows enter the cache only after the whole block succeeded
    cache.append(ks, vs)
    return logits, hidden


def forward_extend(weights: Weights, cache: KVCache, new_tokens,
                   return_hidden: bool = False,
                   block_size: int = DEFAULT_BLOCK):
    """Append tokens to the cache; returns their logits [T, vocab_size].

    Splitting into blocks changes nothing observable: positions continue
    from cache.n_tokens and attention sees every earlier row.
    """
    cfg = weights.config
    if cache.config_hash != weights.hash:
        raise IncompatibilityError(
            "cache belongs to a different model configuration")
    toks = np.asarray(new_tokens, dtype=np.int64).ravel()
    if toks.size and (toks.min() < 0 or toks.max() >= cfg.vocab_size):
        raise ValidationError("token id outside the vocabulary")
    needed = cache.n_tokens + toks.size
    if needed > cfg.max_context:
        raise CapacityError(
            f"extend needs {needed} cache rows but the context window "
            f"holds {cfg.max_context}", required=int(needed),
            available=cfg.max_context)

    logits_parts, hidden_parts = [], []
    for lo in range(0, toks.size, block_size):
        logits, hidden = _extend_block(weights, cache, toks[lo:lo + block_size])
        logits_parts.append(logits)
        hidden_parts.append(hidden)

    if logits_parts:
        all_logits = np.concatenate(logits_parts, axis=0)
        all_hidden = np.concatenate(hidden_parts, axis=0)
    else:
        all_logits = np.zeros((0, cfg.vocab_size), dtype=np.float32)
        all_hidden = np.zeros((0, cfg.d_model), dtype=np.float32)
    if return_hidden:
        return all_logits, all_hidden
    return all_logits


def hidden_states(weights: Weights, tokens) -> np.ndarray:
    """Post-final-norm hidden rows [T, d_model] for a standalone sequence."""
    from .kvcache import new_cache

    cache = new_cache(weights.config)
    _, hidden = forward_extend(weights, cache, tokens, return_hidden=True)
    return hidden


@dataclass(frozen=True)
class GenerationResult:
    tokens: tuple[int, ...]
    text: str
    n_cached_tokens: int
    n_new_tokens: int
    wall_time_s: float


def greedy_generate(weights: Weights, cache: KVCache, query_tokens,
                    max_new_tokens: int = 64,
                    stop_at_eos: bool = True) -> GenerationResult:
    """Greedy decoding of a query against the cached prefix.

    Prompt assembly: BOS if the cache is empty, SEP if the cache holds
    content beyond BOS, then the query tokens. Each emitted token is the
    lowest-id argmax of the last logits and is appended to the cache;
    generation stops after EOS or max_new_tokens. Fixed-length timing
    runs pass stop_at_eos=False to always emit max_new_tokens. Context
    overflow during generation raises CapacityError carrying the partial
    result.
    """
    t0 = time.perf_counter()
    n0 = cache.n_tokens
    prompt: list[int] = []
    if n0 == 0:
        prompt.append(BOS)
    elif n0 >= 2:
        prompt.append(SEP)
    prompt.extend(int(t) for t in query_tokens)
    if not prompt:
        raise ValidationError("empty query against a BOS-only cache leaves "
                              "nothing to condition on")
    if max_new_tokens < 0:
        raise ValidationError("max_new_tokens must be non-negative")

    last_logits = forward_extend(weights, cache, prompt)[-1]

    emitted: list[int] = []

    def result() -> GenerationResult:
        return GenerationResult(
            tokens=tuple(emitted), text=decode_bytes(emitted),
            n_cached_tokens=n0, n_new_tokens=len(emitted),
            wall_time_s=time.perf_counter() - t0)

    for _ in range(max_new_tokens):
        tok = int(np.argmax(last_logits))
        try:
            out = forward_extend(weights, cache, [tok])
        except CapacityError as exc:
            raise CapacityError(
                f"context overflow after {len(emitted)} generated tokens",
                required=exc.required, available=exc.available,
                partial=result()) from None
        emitted.append(tok)
        last_logits = out[-1]
        if stop_at_eos and tok == EOS:
            break
    return result()


def recompute_prompt_tokens(prefix_tokens, query_tokens) -> list[int]:
    """Full-prompt layout equivalent to cache reuse: prefix, SEP, query.

    ``prefix_tokens`` is the BOS-led knowledge prefix; feeding the returned
    sequence minus BOS as a query to an empty cache reproduces cached
    generation exactly.
    """
    return list(prefix_tokens) + [SEP] + [int(t) for t in query_tokens]
