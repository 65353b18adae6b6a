"""Pure-numpy twins of the compiled kernels in ``_kernels.pyx``.

The arithmetic is ordered exactly like the C loops so both backends agree
bit for bit: float32 multiply, round, float32 add, round, input dimension
ascending.
"""

from __future__ import annotations

import numpy as np

_ONE = np.float32(1.0)


def causal_mix(x, csum, t0, w, u, b):
    x = np.ascontiguousarray(x, dtype=np.float32)
    n, d = x.shape
    ctx = np.empty((n, d), dtype=np.float32)
    for r in range(n):
        csum += x[r]
        ctx[r] = csum / np.float32(t0 + r + 1)
    out = np.empty((n, d), dtype=np.float32)
    out[:] = b
    for k in range(d):
        out += x[:, k : k + 1] * w[k]
    for k in range(d):
        out += ctx[:, k : k + 1] * u[k]
    return x + out / (_ONE + np.abs(out))


def threshold_components(dist, threshold):
    n = dist.shape[0]
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if dist[i, j] <= threshold:
                ri, rj = find(i), find(j)
                if ri < rj:
                    parent[rj] = ri
                elif rj < ri:
                    parent[ri] = rj
    return np.array([find(i) for i in range(n)], dtype=np.int64)
