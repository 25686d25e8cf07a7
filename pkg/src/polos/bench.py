"""Benchmark the compiled kernels against the numpy/Python fallbacks.

Run as `python -m polos.bench`. Measures end-to-end head scoring throughput
(samples/second) and rank-inversion counting on both paths; results should
be bit-identical, only speed differs.
"""

from __future__ import annotations

import argparse
import importlib
import time
from contextlib import nullcontext

import numpy as np

import polos.head as head_mod
import polos.kernels as kernels_mod
from polos.bundle import synth_samples
from polos.head import HeadConfig, init_params


def _thread_limit(threads):
    if threads is None:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        print("threadpoolctl not installed; --threads ignored")
        return nullcontext()
    return threadpool_limits(limits=threads)


def _swap_kernels(native: bool) -> bool:
    """Re-point polos.kernels at the requested implementation. The head
    resolves kernel functions through the module object at call time, so a
    reload is enough. Returns the effective nativeness (the extension may
    be unavailable)."""
    import os

    if native:
        os.environ.pop("POLOS_NO_NATIVE", None)
    else:
        os.environ["POLOS_NO_NATIVE"] = "1"
    importlib.reload(kernels_mod)
    return kernels_mod.HAVE_NATIVE


def bench_scoring(n_samples: int, n_refs: int, d_clip: int, d_rb: int, seed: int) -> dict:
    samples = synth_samples(n_samples, d_clip=d_clip, d_rb=d_rb, n_refs=n_refs,
                            with_scores=False, seed=seed)
    config = HeadConfig(seed=seed)
    params = init_params(config, d_clip, d_rb)

    results = {}
    for label, want_native in (("fallback", False), ("native", True)):
        is_native = _swap_kernels(want_native)
        if want_native and not is_native:
            results[label] = None
            continue
        head_mod.score_samples(samples[:64], params, config)  # warm up
        start = time.perf_counter()
        y_hat, _ = head_mod.score_samples(samples, params, config)
        elapsed = time.perf_counter() - start
        results[label] = {
            "samples_per_s": n_samples / elapsed,
            "elapsed_s": elapsed,
            "checksum": float(np.sum(y_hat)),
        }
    _swap_kernels(True)
    return results


def bench_inversions(n: int, seed: int) -> dict:
    rng = np.random.Generator(np.random.PCG64(seed))
    values = rng.integers(0, n // 4, size=n).astype(np.float64)
    results = {}
    for label, want_native in (("fallback", False), ("native", True)):
        is_native = _swap_kernels(want_native)
        if want_native and not is_native:
            results[label] = None
            continue
        start = time.perf_counter()
        count = kernels_mod.count_inversions(values)
        elapsed = time.perf_counter() - start
        results[label] = {"elapsed_s": elapsed, "count": int(count)}
    _swap_kernels(True)
    return results


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--samples", type=int, default=2000)
    parser.add_argument("--refs", type=int, default=5)
    parser.add_argument("--d-clip", type=int, default=512)
    parser.add_argument("--d-rb", type=int, default=1024)
    parser.add_argument("--inversions-n", type=int, default=200_000)
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS thread cap (default 1 for a single-core figure)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    print(f"native extension available: {kernels_mod.HAVE_NATIVE}")
    with _thread_limit(args.threads):
        print(
            f"\nscoring ({args.samples} samples, N={args.refs}, "
            f"d_clip={args.d_clip}, d_rb={args.d_rb}, {args.threads} thread(s)):"
        )
        scoring = bench_scoring(args.samples, args.refs, args.d_clip, args.d_rb, args.seed)
        for label, r in scoring.items():
            if r is None:
                print(f"  {label:9s} unavailable")
            else:
                print(f"  {label:9s} {r['samples_per_s']:10.1f} samples/s   ({r['elapsed_s']:.3f} s)")
        both = [r for r in scoring.values() if r]
        if len(both) == 2 and scoring["fallback"] and scoring["native"]:
            agree = scoring["fallback"]["checksum"] == scoring["native"]["checksum"]
            speedup = scoring["native"]["samples_per_s"] / scoring["fallback"]["samples_per_s"]
            print(f"  results bit-identical: {agree};  native speedup: {speedup:.2f}x")

        print(f"\ninversion counting (n={args.inversions_n}):")
        inversions = bench_inversions(args.inversions_n, args.seed)
        for label, r in inversions.items():
            if r is None:
                print(f"  {label:9s} unavailable")
            else:
                print(f"  {label:9s} {r['elapsed_s']*1e3:10.2f} ms   (count={r['count']})")
        if inversions["fallback"] and inversions["native"]:
            agree = inversions["fallback"]["count"] == inversions["native"]["count"]
            speedup = inversions["fallback"]["elapsed_s"] / inversions["native"]["elapsed_s"]
            print(f"  counts equal: {agree};  native speedup: {speedup:.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
