import json

import pytest

from cagkit.config import ModelConfig
from cagkit.corpus import Corpus, Document, QAPair
from cagkit.errors import ValidationError
from cagkit.harness import (ExperimentReport, QualityConfig, ReportRow,
                            build_testset, run_quality, run_timing)
from cagkit.training import make_lookup_task, task_to_corpus, task_to_qa
from cagkit.weights import init_weights


def lookup_fixture(n_pairs=6, seed=21):
    task = make_lookup_task(n_pairs, 0.5, seed=seed)
    return task_to_corpus(task), task_to_qa(task)


def quick_config(**kw):
    defaults = dict(max_new_tokens=4, ks=(1, 3))
    defaults.update(kw)
    return QualityConfig(**defaults)


# ---------------------------------------------------------------------------
# rows and reports


def test_row_validates_ranges():
    with pytest.raises(ValidationError):
        ReportRow(system="CAG", size_label="small", top_k=None,
                  exact_match=1.5, token_f1=0.0,
                  mean_generation_time_s=0.0, n_questions=1)
    with pytest.raises(ValidationError):
        ReportRow(system="CAG", size_label="small", top_k=None,
                  exact_match=0.0, token_f1=0.0,
                  mean_generation_time_s=-1.0, n_questions=1)


def test_report_round_trip(tmp_path):
    rows = [ReportRow(system="CAG", size_label="small", top_k=None,
                      exact_match=0.5, token_f1=0.75,
                      mean_generation_time_s=0.01, n_questions=4)]
    rep = ExperimentReport(metadata={"seed": 1}, rows=rows)
    p = tmp_path / "r.json"
    rep.save(p)
    back = ExperimentReport.load(p)
    assert back.to_dict() == rep.to_dict()
    obj = json.loads(p.read_text())
    assert set(obj) == {"metadata", "rows"}
    assert obj["rows"][0]["system"] == "CAG"


# ---------------------------------------------------------------------------
# test-set sampling


def test_build_testset_sizes():
    corpus, qa = lookup_fixture(8)
    sample, kept = build_testset(corpus, qa, 4, seed=3)
    assert len(sample) == 4
    ids = {d.id for d in sample}
    for pair in kept:
        assert all(d in ids for d in pair.doc_ids)


def test_build_testset_deterministic():
    corpus, qa = lookup_fixture(8)
    a, _ = build_testset(corpus, qa, 5, seed=9)
    b, _ = build_testset(corpus, qa, 5, seed=9)
    assert [d.id for d in a] == [d.id for d in b]


def test_build_testset_too_many():
    corpus, qa = lookup_fixture(4)
    with pytest.raises(ValidationError):
        build_testset(corpus, qa, 9, seed=0)


def test_build_testset_preserves_order():
    corpus, qa = lookup_fixture(8)
    sample, _ = build_testset(corpus, qa, 6, seed=1)
    ids = [d.id for d in sample]
    assert ids == sorted(ids)


# ---------------------------------------------------------------------------
# quality runs


def test_quality_row_layout(small_weights):
    corpus, qa = lookup_fixture()
    rep = run_quality(corpus, qa, small_weights, quick_config())
    systems = [(r.system, r.top_k) for r in rep.rows]
    assert systems == [("CAG", None), ("sparse-RAG", 1), ("sparse-RAG", 3),
                       ("dense-RAG", 1), ("dense-RAG", 3)]
    for r in rep.rows:
        assert r.n_questions == len(qa)
        assert r.size_label == "small"
        assert r.token_f1 >= r.exact_match - 1e-12


def test_quality_default_k_ladder(small_weights):
    corpus, qa = lookup_fixture(4, seed=5)
    rep = run_quality(corpus, qa, small_weights,
                      QualityConfig(max_new_tokens=2))
    ks = [r.top_k for r in rep.rows if r.system == "sparse-RAG"]
    assert ks == [1, 3, 5, 10]
    assert len(rep.rows) == 1 + 4 + 4


def test_quality_deterministic_scores(small_weights):
    corpus, qa = lookup_fixture()
    a = run_quality(corpus, qa, small_weights, quick_config())
    b = run_quality(corpus, qa, small_weights, quick_config())
    for ra, rb in zip(a.rows, b.rows):
        assert (ra.system, ra.top_k) == (rb.system, rb.top_k)
        assert ra.exact_match == rb.exact_match
        assert ra.token_f1 == rb.token_f1


def test_quality_question_order_invariance(small_weights):
    corpus, qa = lookup_fixture()
    a = run_quality(corpus, qa, small_weights, quick_config())
    b = run_quality(corpus, list(reversed(qa)), small_weights,
                    quick_config())
    for ra, rb in zip(a.rows, b.rows):
        assert ra.exact_match == rb.exact_match
        assert ra.token_f1 == rb.token_f1


def test_quality_metadata_contents(small_weights):
    corpus, qa = lookup_fixture()
    rep = run_quality(corpus, qa, small_weights, quick_config())
    meta = rep.metadata
    assert meta["bm25"] == {"k1": 1.2, "b": 0.75}
    assert "config_hash" in meta
    assert "substitution_notice" in meta
    assert meta["n_questions"] == len(qa)


def test_quality_rejects_unknown_doc_ids(small_weights):
    corpus, _ = lookup_fixture()
    bad = [QAPair(question="q?", answers=("a",), doc_ids=("missing",))]
    with pytest.raises(ValidationError):
        run_quality(corpus, bad, small_weights, quick_config())


def test_quality_rejects_empty_qa(small_weights):
    corpus, _ = lookup_fixture()
    with pytest.raises(ValidationError):
        run_quality(corpus, [], small_weights, quick_config())


def test_quality_capacity_scores_zero():
    # corpus larger than the context: the cached system can't even encode;
    # retrieval systems still work on small k
    cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, head_dim=8,
                      d_ffn=32, max_context=64)
    w = init_weights(cfg)
    corpus, qa = lookup_fixture(8, seed=2)
    rep = run_quality(corpus, qa, w, QualityConfig(
        systems=("sparse-RAG",), ks=(1, 10), max_new_tokens=2))
    rows = {r.top_k: r for r in rep.rows}
    # k=10 passages exceed 64 tokens, every question fails to 0
    assert rows[10].exact_match == 0.0
    assert rows[10].token_f1 == 0.0


def test_quality_cag_survives_capacity_failures():
    cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, head_dim=8,
                      d_ffn=32, max_context=96)
    w = init_weights(cfg)
    corpus, qa = lookup_fixture(4, seed=3)
    # 4 docs ~ 85 tokens fit, but generation may overflow; the run completes
    rep = run_quality(corpus, qa, w, QualityConfig(
        systems=("CAG",), max_new_tokens=50))
    (row,) = rep.rows
    assert row.n_questions == len(qa)
    assert 0.0 <= row.exact_match <= 1.0


# ---------------------------------------------------------------------------
# timing runs


def test_timing_rows_and_labels(micro_weights):
    rep = run_timing(micro_weights, context_sizes=(64, 128, 256),
                     n_queries=2, query_len=8, max_new_tokens=2)
    got = [(r.system, r.size_label) for r in rep.rows]
    assert got == [("CAG", "small"), ("in-context-recompute", "small"),
                   ("CAG", "medium"), ("in-context-recompute", "medium"),
                   ("CAG", "large"), ("in-context-recompute", "large")]
    for r in rep.rows:
        assert r.top_k is None
        assert r.exact_match == 0.0 and r.token_f1 == 0.0
        assert r.mean_generation_time_s > 0


def test_timing_metadata_ratios(micro_weights):
    rep = run_timing(micro_weights, context_sizes=(64, 128), n_queries=2,
                     query_len=8, max_new_tokens=2)
    times = {(r.system, r.size_label): r.mean_generation_time_s
             for r in rep.rows}
    for label in ("small", "medium"):
        want = times[("in-context-recompute", label)] / times[("CAG", label)]
        got = rep.metadata["context_sizes"][label]["speedup"]
        assert abs(got - want) < 1e-9
        assert rep.metadata["context_sizes"][label]["cache_encode_s"] > 0


def test_timing_too_many_sizes(micro_weights):
    with pytest.raises(ValidationError):
        run_timing(micro_weights, context_sizes=(8, 16, 32, 64))
