# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.

Every routine here has a twin in :mod:`vinfer._fallback` that must produce
bit-identical results. Accumulation order is fixed (input dimension, ascending)
and the extension is built with ``-ffp-contract=off`` so no fused multiply-add
is emitted.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def causal_mix(const float[:, ::1] x, float[::1] csum, long t0,
               const float[:, ::1] w, const float[:, ::1] u,
               const float[::1] b):
    """One causal mixing layer over rows ``t0 .. t0 + len(x) - 1``.

    ``csum`` holds the running sum of all earlier input rows and is updated
    in place.
    """
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t r, j, k
    cdef float acc, xk, ck, inv_pos
    out_arr = np.empty((n, d), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef float[::1] ctx = np.empty(d, dtype=np.float32)
    cdef float pos
    for r in range(n):
        pos = <float>(t0 + r + 1)
        for k in range(d):
            csum[k] = csum[k] + x[r, k]
            ctx[k] = csum[k] / pos
        for j in range(d):
            out[r, j] = b[j]
        for k in range(d):
            xk = x[r, k]
            for j in range(d):
                out[r, j] = out[r, j] + xk * w[k, j]
        for k in range(d):
            ck = ctx[k]
            for j in range(d):
                out[r, j] = out[r, j] + ck * u[k, j]
        for j in range(d):
            acc = out[r, j]
            out[r, j] = x[r, j] + acc / (<float>1.0 + (acc if acc >= 0 else -acc))
    return out_arr


def threshold_components(const double[:, ::1] dist, double threshold):
    """Connected components of the graph with edges ``dist[i, j] <= threshold``.

    Labels are the smallest member index of each component.
    """
    cdef Py_ssize_t n = dist.shape[0]
    cdef Py_ssize_t i, j, ri, rj
    labels_arr = np.arange(n, dtype=np.int64)
    cdef long long[::1] parent = labels_arr
    for i in range(n):
        for j in range(i + 1, n):
            if dist[i, j] <= threshold:
                ri = i
                while parent[ri] != ri:
                    ri = parent[ri]
                rj = j
                while parent[rj] != rj:
                    rj = parent[rj]
                if ri < rj:
                    parent[rj] = ri
                elif rj < ri:
                    parent[ri] = rj
    for i in range(n):
        ri = i
        while parent[ri] != ri:
            ri = parent[ri]
        parent[i] = ri
    return labels_arr
