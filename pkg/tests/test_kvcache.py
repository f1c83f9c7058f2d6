import struct

import numpy as np
import pytest

from cagkit.config import ModelConfig, config_hash
from cagkit.corpus import Corpus, Document
from cagkit.errors import (CapacityError, CorruptionError, FormatError,
                           IncompatibilityError, InvalidMarkError)
from cagkit.kvcache import (CacheMark, KVCache, cache_file_size,
                            corpus_prefix_tokens, document_tokens, fnv1a64,
                            kv_encode, load_cache, new_cache, save_cache,
                            snapshot_mark, truncate_to, verify_cache)
from cagkit.model import forward_extend
from cagkit.tokenizer import BOS, SEP


def small_docs(n=3):
    return Corpus(tuple(
        Document(id=f"d{i}", title=f"t{i}", text=f"text number {i}")
        for i in range(n)))


# ---------------------------------------------------------------------------
# cache mechanics


def test_new_cache_empty(small_config):
    cache = new_cache(small_config)
    assert cache.n_tokens == 0
    assert cache.doc_mark.position == 0
    assert cache.k_rows(0).shape == (0, small_config.n_heads,
                                     small_config.head_dim)


def test_append_grows_all_layers(small_config):
    cache = new_cache(small_config)
    h, hd = small_config.n_heads, small_config.head_dim
    ks = [np.ones((2, h, hd), np.float32)] * small_config.n_layers
    vs = [np.full((2, h, hd), 2.0, np.float32)] * small_config.n_layers
    cache.append(ks, vs)
    assert cache.n_tokens == 2
    for li in range(small_config.n_layers):
        assert np.all(cache.k_rows(li) == 1.0)
        assert np.all(cache.v_rows(li) == 2.0)


def test_truncate_restores_rows(small_config, small_weights):
    cache = kv_encode(small_weights, small_docs())
    before = cache.k_rows(0).copy()
    mark = snapshot_mark(cache)
    forward_extend(small_weights, cache, [SEP, 104, 105])
    truncate_to(cache, mark)
    assert cache.n_tokens == mark.position
    assert np.array_equal(cache.k_rows(0), before)


def test_truncate_validates_range(small_config):
    cache = new_cache(small_config)
    with pytest.raises(InvalidMarkError):
        truncate_to(cache, CacheMark(1))


def test_truncate_to_zero_rejected(small_weights):
    cache = kv_encode(small_weights, small_docs())
    with pytest.raises(InvalidMarkError):
        truncate_to(cache, CacheMark(0))


def test_truncate_clamps_doc_mark(small_weights):
    cache = kv_encode(small_weights, small_docs())
    truncate_to(cache, CacheMark(1))
    assert cache.doc_mark.position == 1


def test_clone_is_independent(small_weights):
    cache = kv_encode(small_weights, small_docs())
    twin = cache.clone()
    forward_extend(small_weights, cache, [SEP, 120])
    assert twin.n_tokens != cache.n_tokens


# ---------------------------------------------------------------------------
# prefix layout


def test_document_tokens_layout():
    doc = Document(id="d", title="T", text="ab")
    toks = document_tokens(doc)
    assert toks == [84, 10, 97, 98, SEP]


def test_corpus_prefix_starts_with_bos():
    toks = corpus_prefix_tokens(small_docs(2))
    assert toks[0] == BOS
    assert toks.count(SEP) == 2


def test_kv_encode_sets_doc_mark(small_weights):
    corpus = small_docs()
    cache = kv_encode(small_weights, corpus)
    assert cache.n_tokens == len(corpus_prefix_tokens(corpus))
    assert cache.doc_mark.position == cache.n_tokens


def test_kv_encode_capacity(small_config):
    from cagkit.weights import init_weights
    tiny = ModelConfig(**{**small_config.__dict__, "max_context": 16})
    w = init_weights(tiny)
    with pytest.raises(CapacityError):
        kv_encode(w, small_docs(4))


# ---------------------------------------------------------------------------
# serialization


def test_fnv1a64_reference_values():
    # classic FNV-1a test vectors
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_file_size_formula():
    assert cache_file_size(2, 2, 16, 10) == 52 + 4 * 2 * 2 * 10 * 2 * 16


def test_save_matches_formula(tmp_path, small_config, small_weights):
    cache = kv_encode(small_weights, small_docs())
    p = tmp_path / "c.cagc"
    n = save_cache(cache, p)
    assert n == p.stat().st_size
    assert n == cache_file_size(small_config.n_layers, small_config.n_heads,
                                small_config.head_dim, cache.n_tokens)


def test_header_fields_byte_exact(tmp_path, small_config, small_weights):
    cache = kv_encode(small_weights, small_docs())
    p = tmp_path / "c.cagc"
    save_cache(cache, p)
    blob = p.read_bytes()
    magic, version, cfg, nl, nh, hd, nt, dm, ck = struct.unpack_from(
        "<4sIQIIIQQQ", blob)
    assert magic == b"CAGC"
    assert version == 1
    assert cfg == config_hash(small_config)
    assert (nl, nh, hd) == (small_config.n_layers, small_config.n_heads,
                            small_config.head_dim)
    assert nt == cache.n_tokens
    assert dm == cache.doc_mark.position
    assert ck == fnv1a64(blob[52:])


def test_payload_row_order(tmp_path, small_config, small_weights):
    cache = kv_encode(small_weights, small_docs(1))
    p = tmp_path / "c.cagc"
    save_cache(cache, p)
    payload = np.frombuffer(p.read_bytes()[52:], dtype="<f4")
    nt = cache.n_tokens
    h, hd = small_config.n_heads, small_config.head_dim
    per = nt * h * hd
    off = 0
    for li in range(small_config.n_layers):
        k = payload[off:off + per].reshape(nt, h, hd)
        off += per
        v = payload[off:off + per].reshape(nt, h, hd)
        off += per
        assert np.array_equal(k, cache.k_rows(li))
        assert np.array_equal(v, cache.v_rows(li))
    assert off == payload.size


def test_round_trip_bitwise(tmp_path, small_config, small_weights):
    cache = kv_encode(small_weights, small_docs())
    p = tmp_path / "c.cagc"
    save_cache(cache, p)
    back = load_cache(p, config_hash(small_config))
    assert back.n_tokens == cache.n_tokens
    assert back.doc_mark.position == cache.doc_mark.position
    for li in range(small_config.n_layers):
        assert back.k_rows(li).tobytes() == cache.k_rows(li).tobytes()
        assert back.v_rows(li).tobytes() == cache.v_rows(li).tobytes()
    # and the reloaded cache saves to identical bytes
    p2 = tmp_path / "c2.cagc"
    save_cache(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_load_rejects_wrong_model(tmp_path, small_config, small_weights):
    cache = kv_encode(small_weights, small_docs())
    p = tmp_path / "c.cagc"
    save_cache(cache, p)
    with pytest.raises(IncompatibilityError):
        load_cache(p, config_hash(small_config) ^ 1)


def test_single_byte_corruption_detected(tmp_path, small_config,
                                         small_weights):
    cache = kv_encode(small_weights, small_docs(1))
    p = tmp_path / "c.cagc"
    save_cache(cache, p)
    blob = bytearray(p.read_bytes())
    for pos in (52, 60, 100, len(blob) - 1):
        mutated = bytearray(blob)
        mutated[pos] ^= 0xFF
        p.write_bytes(bytes(mutated))
        with pytest.raises(CorruptionError):
            load_cache(p, config_hash(small_config))


def test_corrupt_magic_is_format_error(tmp_path, small_weights,
                                       small_config):
    cache = kv_encode(small_weights, small_docs(1))
    p = tmp_path / "c.cagc"
    save_cache(cache, p)
    blob = bytearray(p.read_bytes())
    blob[0] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_cache(p, config_hash(small_config))


def test_truncated_file_detected(tmp_path, small_config, small_weights):
    cache = kv_encode(small_weights, small_docs(1))
    p = tmp_path / "c.cagc"
    save_cache(cache, p)
    p.write_bytes(p.read_bytes()[:30])
    with pytest.raises(CorruptionError):
        load_cache(p, config_hash(small_config))


def test_verify_cache_reports_fields(tmp_path, small_config, small_weights):
    cache = kv_encode(small_weights, small_docs())
    p = tmp_path / "c.cagc"
    save_cache(cache, p)
    info = verify_cache(p)
    assert info["n_tokens"] == cache.n_tokens
    assert info["config_hash"] == config_hash(small_config)


def test_empty_cache_round_trip(tmp_path, small_config):
    cache = new_cache(small_config)
    p = tmp_path / "c.cagc"
    n = save_cache(cache, p)
    assert n == 52
    back = load_cache(p, config_hash(small_config))
    assert back.n_tokens == 0
    assert back.doc_mark.position == 0
