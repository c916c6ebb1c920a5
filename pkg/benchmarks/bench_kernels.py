"""Compare the compiled kernels against the pure-numpy fallback.

Micro section times each kernel on both backends in-process. The end-to-end
section scores a candidate pool twice in subprocesses, once per backend,
because the backend is chosen when the package is imported.

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --rows 4096 --cols 256 --repeats 30
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from prunesearch import kernels
from prunesearch.kernels import pure


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def micro_cases(rows, cols):
    rng = np.random.default_rng(0)
    x32 = rng.standard_normal((rows, cols)).astype(np.float32)
    g32 = rng.standard_normal((rows, cols)).astype(np.float32)
    w32 = rng.standard_normal(cols).astype(np.float32)
    probs = pure.softmax_rows_fwd(x32)
    _, inv = pure.rmsnorm_fwd(x32, w32, 1e-6)
    targets = rng.integers(0, cols, size=rows, dtype=np.int64)
    _, ce_probs = pure.cross_entropy_fwd(x32, targets)
    return [
        ("softmax_fwd", lambda k: k.softmax_rows_fwd(x32)),
        ("softmax_bwd", lambda k: k.softmax_rows_bwd(probs, g32)),
        ("rmsnorm_fwd", lambda k: k.rmsnorm_fwd(x32, w32, 1e-6)),
        ("rmsnorm_bwd", lambda k: k.rmsnorm_bwd(x32, w32, inv, g32)),
        ("silu_fwd", lambda k: k.silu_fwd(x32)),
        ("silu_bwd", lambda k: k.silu_bwd(x32, g32)),
        ("cross_entropy_fwd", lambda k: k.cross_entropy_fwd(x32, targets)),
        ("cross_entropy_bwd", lambda k: k.cross_entropy_bwd(ce_probs, targets, 1.0)),
        ("abs_colsum", lambda k: k.abs_colsum(x32)),
        ("sq_colsum", lambda k: k.sq_colsum(x32)),
    ]


def run_micro(rows, cols, repeats):
    if not kernels.has_fast():
        print("compiled backend unavailable; micro comparison skipped")
        return
    from prunesearch.kernels import _ckernels

    print(f"kernel microbenchmarks, [{rows} x {cols}] float32, best of {repeats}")
    print(f"{'kernel':20s} {'pure (us)':>12s} {'compiled (us)':>14s} {'speedup':>8s}  dispatch")
    for name, call in micro_cases(rows, cols):
        t_pure = best_of(lambda: call(pure), repeats)
        t_fast = best_of(lambda: call(_ckernels), repeats)
        routed = "compiled" if name in kernels.COMPILED_ROUTES else "pure"
        print(f"{name:20s} {t_pure * 1e6:12.1f} {t_fast * 1e6:14.1f}"
              f" {t_pure / t_fast:7.2f}x  {routed}")


def end_to_end():
    """Score 40 candidates on a small model; prints a JSON timing record."""
    from prunesearch.corpus import eval_sequences, load_corpus, split_corpus
    from prunesearch.masks import ArchEncoding, compute_saliency
    from prunesearch.model import (attach_adapters, collect_activation_stats,
                                   init_supernetwork, parameter_count,
                                   ModelConfig)
    from prunesearch import proxy
    from prunesearch.search import (SearchConfig, compute_importance_prior,
                                    sample_random_encoding)

    config = ModelConfig(n_layers=4, d_model=64, n_heads=4, n_kv_heads=2,
                         d_head=16, d_ff=128, vocab_size=256,
                         context_length=64, rounding_multiple=4)
    net = init_supernetwork(config, seed=0)
    _, _, calib_split = split_corpus(load_corpus(None, seed=0, size=1 << 19))
    calib = proxy.CalibrationBatch(eval_sequences(calib_split, 8, 64))
    stats = collect_activation_stats(net, calib.tokens)
    saliency = compute_saliency(net, stats)
    prior = compute_importance_prior(net, stats)
    dense = parameter_count(net, ArchEncoding.identity(4))
    cfg = SearchConfig(budget=int(0.6 * dense), min_depth=2, seed=0)
    attach_adapters(net, 4, seed=7)
    anchor = proxy.compute_anchor(net, calib)
    rng = np.random.default_rng(1)
    encodings = [sample_random_encoding(rng, net, prior, cfg) for _ in range(40)]
    t0 = time.perf_counter()
    for enc in encodings:
        proxy.score(net, enc, saliency, calib, anchor)
    elapsed = time.perf_counter() - t0
    print(json.dumps({"backend": kernels.BACKEND, "candidates": 40,
                      "seconds": round(elapsed, 3)}))


def run_end_to_end():
    print("\nend-to-end: proxy-scoring 40 candidates on a 4-layer model")
    results = {}
    for backend in ("pure", "fast"):
        env = dict(os.environ, PRUNESEARCH_KERNELS=backend)
        out = subprocess.run([sys.executable, os.path.abspath(__file__),
                              "--end-to-end"], env=env, capture_output=True,
                             text=True, check=True)
        record = json.loads(out.stdout.strip().splitlines()[-1])
        results[record["backend"]] = record["seconds"]
        print(f"  {record['backend']:5s} {record['seconds']:7.3f}s")
    if {"pure", "fast"} <= results.keys():
        print(f"  speedup {results['pure'] / results['fast']:.2f}x")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=2048)
    parser.add_argument("--cols", type=int, default=256)
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--end-to-end", action="store_true",
                        help="internal: run one scoring pass and print JSON")
    args = parser.parse_args(argv)
    if args.end_to_end:
        end_to_end()
        return 0
    run_micro(args.rows, args.cols, args.repeats)
    run_end_to_end()
    return 0


if __name__ == "__main__":
    sys.exit(main())
