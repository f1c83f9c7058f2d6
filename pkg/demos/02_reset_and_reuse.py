"""Serve many questions from one cache with truncation resets.

Each answered question appends its tokens to the cache. Truncating back
to the knowledge boundary discards the conversation while keeping the
encoded corpus, so the next question starts clean without re-encoding.
The reset is exact: answers match a freshly built cache token for token.
"""

from pathlib import Path

from cagkit import (ModelConfig, greedy_generate, init_weights, kv_encode,
                    load_corpus, tokenize, truncate_to)

config = ModelConfig(d_model=32, n_layers=2, n_heads=2, head_dim=16,
                     d_ffn=64, max_context=2048, init_seed=5)
weights = init_weights(config)
corpus = load_corpus(Path(__file__).parent.parent / "data" / "corpus.jsonl")

cache = kv_encode(weights, corpus)
boundary = cache.doc_mark
print(f"one-time encode: {cache.n_tokens} tokens")

questions = [
    "which noble gas makes up about one percent of air?",
    "what rock forms from rapidly cooled lava?",
    "where does river water mix with seawater?",
]
for q in questions:
    result = greedy_generate(weights, cache, tokenize(q), max_new_tokens=10)
    print(f"  {cache.n_tokens:4d} tokens in cache after: {q[:40]}...")
    truncate_to(cache, boundary)

print(f"after resets the cache is back to {cache.n_tokens} tokens")

# the reset session answers exactly like a cache that never saw question 1
replay = greedy_generate(weights, cache, tokenize(questions[2]),
                         max_new_tokens=10)
fresh = kv_encode(weights, corpus)
baseline = greedy_generate(weights, fresh, tokenize(questions[2]),
                           max_new_tokens=10)
assert replay.tokens == baseline.tokens
print("reset session matches a fresh encode exactly")
