"""Run the benchmark harness end to end at desk scale.

The quality run scores cache-augmented generation against both RAG
baselines on the same questions; the timing run walks a context ladder
and compares per-query decoding cost against full-prompt recompute.
Reports are plain JSON with a metadata block and one row per system.
"""

import json
import tempfile
from pathlib import Path

from cagkit import (ModelConfig, QualityConfig, init_weights,
                    make_lookup_task, run_quality, run_timing,
                    task_to_corpus, task_to_qa)

config = ModelConfig(d_model=32, n_layers=2, n_heads=2, head_dim=16,
                     d_ffn=64, max_context=2048, init_seed=5)
weights = init_weights(config)

# quality: a seeded lookup task gives corpus, questions, and gold answers
task = make_lookup_task(n_pairs=8, distractor_rate=0.5, seed=11)
report = run_quality(task_to_corpus(task), task_to_qa(task), weights,
                     QualityConfig(ks=(1, 3), max_new_tokens=8))
print(f"quality rows ({report.metadata['n_questions']} questions):")
for row in report.rows:
    k = f"k={row.top_k}" if row.top_k else "full cache"
    print(f"  {row.system:<12} {k:<10} EM {row.exact_match:.2f}  "
          f"F1 {row.token_f1:.2f}")
print("(untrained weights score near zero; the point is the protocol)")

# timing: cached decoding vs recompute across growing contexts
report = run_timing(weights, context_sizes=(256, 512, 1024), n_queries=3,
                    query_len=16, max_new_tokens=16, seed=0)
print("\ntiming ladder:")
for label, info in report.metadata["context_sizes"].items():
    print(f"  {label:<7} {info['tokens']:>5} tokens  "
          f"speedup {info['speedup']:.1f}x")

with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp) / "report.json"
    report.save(out)
    obj = json.loads(out.read_text())
    print(f"\nreport JSON sections: {sorted(obj)}, {len(obj['rows'])} rows")
