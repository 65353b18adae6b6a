"""Independent reference implementations used to check the library."""

from __future__ import annotations

import hashlib
import math
import struct
from itertools import product

LEAF_TAG = b"vinfer.leaf.v1\x00"
NODE_TAG = b"vinfer.node.v1\x00"


def float_fields(x: float) -> tuple[int, int, int]:
    """(sign, biased exponent, fraction) via struct, no numpy."""
    (u,) = struct.unpack("<I", struct.pack("<f", x))
    return u >> 31, (u >> 23) & 0xFF, u & 0x7FFFFF


def merkle_root_straight(leaves: list[bytes]) -> bytes:
    """Straight-line root: pad odd levels by duplicating the last digest."""
    level = [hashlib.sha256(LEAF_TAG + x).digest() for x in leaves]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [hashlib.sha256(NODE_TAG + level[i] + level[i + 1]).digest() for i in range(0, len(level), 2)]
    return level[0]


def components(dist, threshold) -> list[frozenset[int]]:
    """Connected components of the threshold graph by depth-first search."""
    n = len(dist)
    seen: set[int] = set()
    out = []
    for s in range(n):
        if s in seen:
            continue
        comp, stack = set(), [s]
        while stack:
            i = stack.pop()
            if i in comp:
                continue
            comp.add(i)
            stack.extend(j for j in range(n) if j not in comp and dist[i][j] <= threshold)
        seen |= comp
        out.append(frozenset(comp))
    return out


def honest_bound_enumerated(n: int, q: int, eps1: float, r: float) -> float:
    p = (1 - eps1) * r
    total = 0.0
    for pattern in product((0, 1), repeat=n - 1):
        k = sum(pattern)
        if k >= q - 1:
            total += p ** k * (1 - p) ** (n - 1 - k)
    return (1 - eps1) * total


def binom_tail_le(n: int, k_max: int, p: float) -> float:
    return sum(math.comb(n, k) * p ** k * (1 - p) ** (n - k) for k in range(0, k_max + 1))
