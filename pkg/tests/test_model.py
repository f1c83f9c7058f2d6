import numpy as np
import pytest

from cagkit.config import ModelConfig
from cagkit.corpus import Corpus, Document
from cagkit.errors import CapacityError, IncompatibilityError, ValidationError
from cagkit.kvcache import (corpus_prefix_tokens, kv_encode, new_cache,
                            snapshot_mark, truncate_to)
from cagkit.model import (apply_rope, forward_extend, greedy_generate,
                          hidden_states, recompute_prompt_tokens, rmsnorm,
                          rope_tables, silu)
from cagkit.tokenizer import BOS, EOS, SEP, tokenize
from cagkit.weights import init_weights


def docs(n=2):
    return Corpus(tuple(
        Document(id=f"d{i}", title=f"t{i}", text=f"alpha beta {i}")
        for i in range(n)))


# ---------------------------------------------------------------------------
# primitive oracles


def test_rmsnorm_formula(rng):
    x = rng.normal(size=(3, 8)).astype(np.float32)
    g = rng.normal(size=8).astype(np.float32)
    got = rmsnorm(x, g)
    want = x / np.sqrt((x ** 2).mean(-1, keepdims=True) + 1e-5) * g
    assert np.allclose(got, want, atol=1e-6)


def test_rmsnorm_scale_invariant_direction(rng):
    x = rng.normal(size=(4, 8)).astype(np.float32)
    g = np.ones(8, dtype=np.float32)
    a, b = rmsnorm(x, g), rmsnorm(x * 1000.0, g)
    assert np.allclose(a, b, atol=1e-3)


def test_silu_formula(rng):
    x = rng.normal(size=100).astype(np.float32)
    want = x / (1.0 + np.exp(-x.astype(np.float64)))
    assert np.allclose(silu(x), want, atol=1e-6)


def test_silu_extreme_inputs_finite():
    x = np.array([-1e4, -100.0, 0.0, 100.0, 1e4], dtype=np.float32)
    out = silu(x)
    assert np.all(np.isfinite(out))
    assert out[0] == 0.0
    assert out[-1] == x[-1]


def test_rope_rotates_pairs():
    # at position p, pair (2i, 2i+1) rotates by angle p * theta^(-2i/hd)
    hd = 8
    cos, sin = rope_tables(np.arange(4), hd, 10000.0)
    x = np.zeros((4, 1, hd), dtype=np.float32)
    x[:, 0, 0] = 1.0
    out = apply_rope(x, cos, sin)
    for p in range(4):
        assert np.isclose(out[p, 0, 0], np.cos(p), atol=1e-6)
        assert np.isclose(out[p, 0, 1], np.sin(p), atol=1e-6)


def test_rope_position_zero_is_identity(rng):
    hd = 8
    cos, sin = rope_tables(np.arange(1), hd, 10000.0)
    x = rng.normal(size=(1, 2, hd)).astype(np.float32)
    assert np.allclose(apply_rope(x, cos, sin), x, atol=1e-7)


def test_rope_preserves_norm(rng):
    hd = 16
    cos, sin = rope_tables(np.arange(10), hd, 10000.0)
    x = rng.normal(size=(10, 3, hd)).astype(np.float32)
    out = apply_rope(x, cos, sin)
    assert np.allclose(np.linalg.norm(out, axis=-1),
                       np.linalg.norm(x, axis=-1), atol=1e-4)


def test_argmax_breaks_ties_toward_lowest_id():
    # greedy decoding relies on first-max semantics
    assert int(np.argmax(np.array([1.0, 2.0, 2.0]))) == 1


# ---------------------------------------------------------------------------
# forward_extend


def test_logits_shape_and_dtype(small_weights):
    cache = new_cache(small_weights.config)
    logits = forward_extend(small_weights, cache, [BOS, 104, 105])
    assert logits.shape == (3, 259)
    assert logits.dtype == np.float32
    assert cache.n_tokens == 3


def test_block_size_independence(small_weights):
    toks = corpus_prefix_tokens(docs(3))
    c1 = new_cache(small_weights.config)
    out1 = forward_extend(small_weights, c1, toks)
    c2 = new_cache(small_weights.config)
    parts = [forward_extend(small_weights, c2, toks[i:i + 7])
             for i in range(0, len(toks), 7)]
    out2 = np.concatenate(parts)
    assert np.array_equal(out1, out2)
    for li in range(small_weights.config.n_layers):
        assert np.array_equal(c1.k_rows(li), c2.k_rows(li))


def test_position_continuity(small_weights):
    # cached rows after incremental extends match a from-scratch encode
    toks = corpus_prefix_tokens(docs(2))
    split = len(toks) // 2
    inc = new_cache(small_weights.config)
    forward_extend(small_weights, inc, toks[:split])
    forward_extend(small_weights, inc, toks[split:])
    fresh = new_cache(small_weights.config)
    forward_extend(small_weights, fresh, toks)
    for li in range(small_weights.config.n_layers):
        assert np.array_equal(inc.k_rows(li), fresh.k_rows(li))
        assert np.array_equal(inc.v_rows(li), fresh.v_rows(li))


def test_empty_token_list(small_weights):
    cache = new_cache(small_weights.config)
    out = forward_extend(small_weights, cache, [])
    assert out.shape == (0, 259)
    assert cache.n_tokens == 0


def test_token_range_validated(small_weights):
    cache = new_cache(small_weights.config)
    with pytest.raises(ValidationError):
        forward_extend(small_weights, cache, [300])
    with pytest.raises(ValidationError):
        forward_extend(small_weights, cache, [-1])


def test_capacity_precheck_leaves_cache_intact(small_config):
    tiny = ModelConfig(**{**small_config.__dict__, "max_context": 8})
    w = init_weights(tiny)
    cache = new_cache(tiny)
    forward_extend(w, cache, [BOS, 97, 98])
    with pytest.raises(CapacityError) as e:
        forward_extend(w, cache, list(range(97, 107)))
    assert cache.n_tokens == 3
    assert e.value.required > e.value.available


def test_config_hash_mismatch_rejected(small_weights, micro_config):
    cache = new_cache(micro_config)
    with pytest.raises(IncompatibilityError):
        forward_extend(small_weights, cache, [BOS])


def test_hidden_states_shape(small_weights):
    h = hidden_states(small_weights, [BOS, 104, 105])
    assert h.shape == (3, small_weights.config.d_model)


# ---------------------------------------------------------------------------
# greedy generation


def test_generate_prepends_bos_on_empty_cache(small_weights):
    cache = new_cache(small_weights.config)
    res = greedy_generate(small_weights, cache, tokenize("hi"),
                          max_new_tokens=2)
    # BOS + "hi" + emitted tokens
    assert cache.n_tokens == 3 + res.n_new_tokens
    assert res.n_cached_tokens == 0


def test_generate_seps_after_knowledge(small_weights):
    cache = kv_encode(small_weights, docs(1))
    n0 = cache.n_tokens
    res = greedy_generate(small_weights, cache, tokenize("q"),
                          max_new_tokens=1)
    # SEP + "q" + one emitted token
    assert cache.n_tokens == n0 + 3
    assert res.n_cached_tokens == n0


def test_generate_deterministic(small_weights):
    c1 = kv_encode(small_weights, docs(2))
    c2 = kv_encode(small_weights, docs(2))
    r1 = greedy_generate(small_weights, c1, tokenize("q?"), max_new_tokens=8)
    r2 = greedy_generate(small_weights, c2, tokenize("q?"), max_new_tokens=8)
    assert r1.tokens == r2.tokens
    assert r1.text == r2.text


def test_generate_respects_max_new(small_weights):
    cache = kv_encode(small_weights, docs(1))
    res = greedy_generate(small_weights, cache, tokenize("q"),
                          max_new_tokens=3)
    assert res.n_new_tokens <= 3


def test_generate_without_eos_stop_emits_full_budget(small_weights):
    cache = kv_encode(small_weights, docs(1))
    res = greedy_generate(small_weights, cache, tokenize("q"),
                          max_new_tokens=12, stop_at_eos=False)
    assert res.n_new_tokens == 12


def test_generate_appends_emitted_tokens(small_weights):
    cache = kv_encode(small_weights, docs(1))
    n0 = cache.n_tokens
    res = greedy_generate(small_weights, cache, tokenize("ab"),
                          max_new_tokens=5)
    assert cache.n_tokens == n0 + 1 + 2 + res.n_new_tokens


def test_generate_empty_query_on_empty_cache_rejected(small_weights):
    cache = new_cache(small_weights.config)
    greedy_generate(small_weights, cache, [], max_new_tokens=0)
    # cache holds only BOS; an empty query would add nothing to attend to
    with pytest.raises(ValidationError):
        greedy_generate(small_weights, cache, [], max_new_tokens=1)


def test_capacity_error_carries_partial(small_config):
    tiny = ModelConfig(**{**small_config.__dict__, "max_context": 12})
    w = init_weights(tiny)
    cache = new_cache(tiny)
    with pytest.raises(CapacityError) as e:
        greedy_generate(w, cache, tokenize("abcde"), max_new_tokens=50)
    partial = e.value.partial
    assert partial is not None
    # prompt BOS+5 chars fills 6 rows; 6 more emissions reach max_context
    assert partial.n_new_tokens == 6


def test_prefix_equivalence_small(small_weights):
    corpus = docs(3)
    query = tokenize("beta?")
    cached = kv_encode(small_weights, corpus)
    r_cag = greedy_generate(small_weights, cached, query, max_new_tokens=12)

    prefix = corpus_prefix_tokens(corpus)
    fresh = new_cache(small_weights.config)
    full = recompute_prompt_tokens(prefix, query)
    r_full = greedy_generate(small_weights, fresh, full[1:],
                             max_new_tokens=12)
    assert r_cag.tokens == r_full.tokens


def test_reset_equivalence_small(small_weights):
    corpus = docs(3)
    q1, q2 = tokenize("one?"), tokenize("two?")
    cache = kv_encode(small_weights, corpus)
    mark = cache.doc_mark
    greedy_generate(small_weights, cache, q1, max_new_tokens=8)
    truncate_to(cache, mark)
    r_reset = greedy_generate(small_weights, cache, q2, max_new_tokens=8)

    fresh = kv_encode(small_weights, corpus)
    r_fresh = greedy_generate(small_weights, fresh, q2, max_new_tokens=8)
    assert r_reset.tokens == r_fresh.tokens
