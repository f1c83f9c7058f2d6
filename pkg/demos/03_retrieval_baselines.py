"""Rank passages with the two retrieval baselines.

The sparse ranker scores lexical overlap with BM25; the dense ranker
embeds text with the model itself (mean pooled hidden states) and ranks
by cosine. Both feed the same generator, so retrieval quality is the
only difference between a RAG answer and a full-cache answer.
"""

from pathlib import Path

from cagkit import (ModelConfig, bm25_build, bm25_topk, dense_build,
                    dense_topk, init_weights, load_corpus, rag_generate)

config = ModelConfig(d_model=32, n_layers=2, n_heads=2, head_dim=16,
                     d_ffn=64, max_context=2048, init_seed=5)
weights = init_weights(config)
corpus = load_corpus(Path(__file__).parent.parent / "data" / "corpus.jsonl")

query = "metal used in blue pigments and battery cathodes"

sparse = bm25_build(corpus)
print("BM25 ranking:")
for doc_id, score in bm25_topk(sparse, query, k=3).items:
    print(f"  {doc_id}  {score:7.4f}  {corpus.by_id(doc_id).title}")

dense = dense_build(weights, corpus)
print("dense cosine ranking:")
for doc_id, score in dense_topk(dense, weights, query, k=3).items:
    print(f"  {doc_id}  {score:7.4f}  {corpus.by_id(doc_id).title}")

# a RAG answer conditions only on the retrieved slice of the corpus
passages = bm25_topk(sparse, query, k=2)
result = rag_generate(weights, passages, corpus, query, max_new_tokens=10)
print(f"generated {result.n_new_tokens} tokens against "
      f"{len(passages)} retrieved passages")
