"""Compiled kernels vs the numpy fallback on the two hot loops.

Run: python3 benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from vinfer import _fallback, pipeline

try:
    from vinfer import _kernels
except ImportError:
    _kernels = None


def _mix_args(n: int, d: int):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, d)).astype(np.float32)
    w = (rng.standard_normal((d, d)) * 0.1).astype(np.float32)
    u = (rng.standard_normal((d, d)) * 0.1).astype(np.float32)
    b = np.zeros(d, dtype=np.float32)
    return x, w, u, b


def _dist(n: int):
    pts = np.random.default_rng(1).random((n, 4))
    return np.ascontiguousarray(np.abs(pts[:, None] - pts[None]).mean(axis=2))


def bench(repeat: int) -> list[tuple[str, float, float | None]]:
    cases = []
    for n, d in [(16, 32), (128, 64), (512, 128)]:
        x, w, u, b = _mix_args(n, d)
        cases.append((f"causal_mix n={n} d={d}",
                      lambda m, x=x, w=w, u=u, b=b: m.causal_mix(x, np.zeros(x.shape[1], np.float32), 0, w, u, b)))
    for n in (6, 12, 64):
        dist = _dist(n)
        cases.append((f"threshold_components n={n}", lambda m, dist=dist: m.threshold_components(dist, 0.3)))
    out = []
    for name, fn in cases:
        py = min(timeit.repeat(lambda: fn(_fallback), number=repeat, repeat=3)) / repeat
        cy = min(timeit.repeat(lambda: fn(_kernels), number=repeat, repeat=3)) / repeat if _kernels else None
        out.append((name, py, cy))
    return out


def bench_generate(repeat: int) -> float:
    mc = pipeline.ModelConfig()
    t = timeit.repeat(lambda: pipeline.generate(mc, [1, 2, 3, 4, 5, 6, 7, 8], 16, pipeline.DEFAULT_NOISE),
                      number=repeat, repeat=3)
    return min(t) / repeat


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    print(f"{'case':34s} {'fallback':>12s} {'compiled':>12s} {'speedup':>8s}")
    for name, py, cy in bench(args.repeat):
        cy_s = f"{cy * 1e6:10.1f}us" if cy else "      n/a"
        sp = f"{py / cy:7.1f}x" if cy else "     -"
        print(f"{name:34s} {py * 1e6:10.1f}us {cy_s} {sp}")
    from vinfer import kernels

    print(f"generate 16 tokens ({kernels.BACKEND} backend): {bench_generate(max(1, args.repeat // 20)) * 1e3:.2f}ms")


if __name__ == "__main__":
    main()
