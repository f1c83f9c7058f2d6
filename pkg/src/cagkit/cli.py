"""One-shot command-line front end: encode, query, train, bench, inspect.

Each subcommand is a thin wrapper over the library; outputs match the
corresponding library calls exactly. Exit codes: 0 success, 2 capacity,
3 incompatibility, 4 training failure, 5 corruption or bad format,
1 anything else.
"""

from __future__ import annotations

import argparse
import sys
import time

from .config import ModelConfig, TrainConfig, config_hash
from .corpus import load_corpus, load_qa
from .errors import CagError
from .harness import QualityConfig, run_quality, run_timing
from .kvcache import (cache_file_size, kv_encode, load_cache, save_cache,
                      verify_cache)
from .model import greedy_generate
from .tokenizer import tokenize
from .training import evaluate_lookup_em, train_lookup
from .weights import init_weights, load_weights, save_weights

# held-out gate settings printed by `train`; tests re-evaluate with the same
EVAL_TASKS = 5
EVAL_PAIRS = 8
EVAL_QUERIES = 4
EVAL_SEED = 7000


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model overrides")
    g.add_argument("--d-model", type=int, default=64)
    g.add_argument("--n-layers", type=int, default=4)
    g.add_argument("--n-heads", type=int, default=4)
    g.add_argument("--head-dim", type=int, default=16)
    g.add_argument("--d-ffn", type=int, default=256)
    g.add_argument("--max-context", type=int, default=8192)
    g.add_argument("--init-seed", type=int, default=0)


def _model_config(args) -> ModelConfig:
    return ModelConfig(d_model=args.d_model, n_layers=args.n_layers,
                       n_heads=args.n_heads, head_dim=args.head_dim,
                       d_ffn=args.d_ffn, max_context=args.max_context,
                       init_seed=args.init_seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cagkit",
        description="cache-augmented generation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="precompute a knowledge cache")
    p.add_argument("--corpus", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)

    p = sub.add_parser("query", help="answer one question against a cache")
    p.add_argument("--cache", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--max-new", type=int, default=64)
    _add_model_flags(p)

    p = sub.add_parser("train", help="train lookup weights from scratch")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=16)
    _add_model_flags(p)

    p = sub.add_parser("bench", help="run a benchmark and write a report")
    p.add_argument("--mode", required=True, choices=("quality", "timing"))
    p.add_argument("--corpus", help="required for quality mode")
    p.add_argument("--qa", help="required for quality mode")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-new", type=int, default=16)
    _add_model_flags(p)

    p = sub.add_parser("inspect", help="print cache header and verify it")
    p.add_argument("--cache", required=True)
    return parser


def cmd_encode(args) -> int:
    config = _model_config(args)
    weights = load_weights(args.weights, config)
    corpus = load_corpus(args.corpus)
    t0 = time.perf_counter()
    cache = kv_encode(weights, corpus)
    n_bytes = save_cache(cache, args.out)
    elapsed = time.perf_counter() - t0
    print(f"n_tokens={cache.n_tokens}")
    print(f"bytes={n_bytes}")
    print(f"seconds={elapsed:.3f}")
    return 0


def cmd_query(args) -> int:
    config = _model_config(args)
    weights = load_weights(args.weights, config)
    # in-memory copy only; the file is never written back
    cache = load_cache(args.cache, config_hash(config))
    result = greedy_generate(weights, cache, tokenize(args.question),
                             max_new_tokens=args.max_new)
    print(result.text)
    print(f"seconds={result.wall_time_s:.3f}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    config = _model_config(args)
    train_config = TrainConfig(learning_rate=args.lr, steps=args.steps,
                               batch_size=args.batch_size, seed=args.seed)
    last = {"loss": float("nan")}

    def log(msg):
        print(msg, file=sys.stderr)
        last["loss"] = float(msg.rsplit("loss ", 1)[1].split()[0])

    weights = train_lookup(config, train_config, log_fn=log)
    save_weights(weights, args.out)
    em = evaluate_lookup_em(weights, n_tasks=EVAL_TASKS, n_pairs=EVAL_PAIRS,
                            queries_per_task=EVAL_QUERIES, seed=EVAL_SEED)
    print(f"final_loss={last['loss']:.4f}")
    print(f"held_out_em={em:.4f}")
    return 0


def cmd_bench(args) -> int:
    config = _model_config(args)
    weights = load_weights(args.weights, config)
    if args.mode == "quality":
        if not args.corpus or not args.qa:
            raise CagError("quality mode needs --corpus and --qa")
        corpus = load_corpus(args.corpus)
        qa = load_qa(args.qa)
        report = run_quality(corpus, qa, weights,
                             QualityConfig(max_new_tokens=args.max_new))
    else:
        report = run_timing(weights, seed=args.seed)
    report.save(args.out)
    print(f"rows={len(report.rows)}")
    print(f"out={args.out}")
    return 0


def cmd_inspect(args) -> int:
    info = verify_cache(args.cache)
    expected = cache_file_size(info["n_layers"], info["n_heads"],
                               info["head_dim"], info["n_tokens"])
    print(f"config_hash={info['config_hash']:016x}")
    print(f"n_layers={info['n_layers']}")
    print(f"n_heads={info['n_heads']}")
    print(f"head_dim={info['head_dim']}")
    print(f"n_tokens={info['n_tokens']}")
    print(f"doc_mark={info['doc_mark']}")
    print(f"checksum={info['checksum']:016x}")
    print(f"file_bytes={expected}")
    print("checksum_ok=true")
    return 0


_COMMANDS = {
    "encode": cmd_encode,
    "query": cmd_query,
    "train": cmd_train,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
