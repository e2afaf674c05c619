"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Times row top-k and gathered sparse attention at a few sizes and checks
that both backends agree before timing.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from lasformer import kernels
from lasformer.attention import kept_counts


def _time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(n: int, k_ratio: float, heads: int, dh: int, batch: int, repeat: int) -> list[tuple]:
    rng = np.random.default_rng(n)
    scores = rng.random((batch * n, n))
    adm = np.ones_like(scores, dtype=bool)
    kept = kept_counts(adm.sum(axis=1), k_ratio, 10)
    q = rng.normal(size=(batch * heads, n, dh))
    k = rng.normal(size=(batch * heads, n, dh))
    v = rng.normal(size=(batch * heads, n, dh))
    mask = kernels.topk_rows(scores, adm, kept).reshape(batch, n, n)

    backends = kernels.available_backends()
    ref = kernels.sparse_attention(q, k, v, mask, heads, backend="python")[0]
    for b in backends:
        out = kernels.sparse_attention(q, k, v, mask, heads, backend=b)[0]
        np.testing.assert_allclose(out, ref, atol=1e-12)
        assert np.array_equal(kernels.topk_rows(scores, adm, kept, backend=b), mask.reshape(-1, n))

    rows = []
    for b in backends:
        t_topk = _time(lambda: kernels.topk_rows(scores, adm, kept, backend=b), repeat)
        t_attn = _time(lambda: kernels.sparse_attention(q, k, v, mask, heads, backend=b), repeat)
        rows.append((n, k_ratio, b, t_topk * 1e3, t_attn * 1e3))
    return rows


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    print(f"{'N':>6} {'k':>5} {'backend':>8} {'topk ms':>9} {'sparse ms':>10}")
    for n, k_ratio in [(64, 0.25), (256, 0.1), (512, 0.05)]:
        for row in bench(n, k_ratio, heads=4, dh=16, batch=4, repeat=args.repeat):
            print(f"{row[0]:>6} {row[1]:>5} {row[2]:>8} {row[3]:>9.3f} {row[4]:>10.3f}")


if __name__ == "__main__":
    main()
