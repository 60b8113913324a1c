"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both backends are imported directly, so one run compares them side by side
and checks that they agree before timing.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from adaptive_lm._kernels import _pure

try:
    from adaptive_lm._kernels import _ext
except ImportError:
    _ext = None


def scatter_case(rows=20_000, dim=256, n=8192, seed=0):
    r = np.random.default_rng(seed)
    # heavy duplication, as with frequent words in an embedding gradient
    index = np.minimum(r.zipf(1.3, size=n) - 1, rows - 1).astype(np.int64)
    src = r.normal(size=(n, dim))
    return (rows, dim), index, src


def bpe_case(n_symbols=60, n_merges=4000, n_words=5000, seed=0):
    r = np.random.default_rng(seed)
    merges = []
    pool = list(range(n_symbols))
    for k in range(n_merges):
        a, b = r.choice(pool, size=2)
        new = n_symbols + k
        merges.append((int(a), int(b), new))
        pool.append(new)
    words = [r.integers(0, n_symbols, size=r.integers(2, 14)) for _ in range(n_words)]
    return merges, words


def bench_scatter(impl, case, repeat):
    shape, index, src = case

    def run():
        target = np.zeros(shape)
        impl.scatter_add_rows(target, index, src)
        return target

    return min(timeit.repeat(run, number=1, repeat=repeat)), run()


def bench_bpe(impl, case, repeat):
    merges, words = case
    seg = impl.BpeSegmenter(merges)

    def run():
        return [seg.segment(w) for w in words]

    return min(timeit.repeat(run, number=1, repeat=repeat)), run()


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if _ext is None:
        print("compiled kernels are not built; only the fallback can be timed")
    cases = [
        ("scatter_add_rows (8192 rows of 256 into 20000)", bench_scatter, scatter_case()),
        ("BpeSegmenter.segment (5000 words, 4000 merges)", bench_bpe, bpe_case()),
    ]
    print(f"{'kernel':<50} {'python':>10} {'cython':>10} {'speedup':>8}")
    for name, bench, case in cases:
        t_pure, out_pure = bench(_pure, case, args.repeat)
        if _ext is None:
            print(f"{name:<50} {t_pure * 1e3:>8.2f}ms {'-':>10} {'-':>8}")
            continue
        t_ext, out_ext = bench(_ext, case, args.repeat)
        if isinstance(out_pure, list):
            assert all(np.array_equal(a, b) for a, b in zip(out_pure, out_ext)), name
        else:
            np.testing.assert_allclose(out_ext, out_pure, rtol=1e-12, atol=1e-12)
        print(f"{name:<50} {t_pure * 1e3:>8.2f}ms {t_ext * 1e3:>8.2f}ms {t_pure / t_ext:>7.1f}x")


if __name__ == "__main__":
    main()
