"""Agreement clustering over verifier reports and the acceptance-probability bounds.

Reports are points in a metric space. Two reports agree when their distance is
at most ``2 * delta``; clusters are the connected components of that graph, and
a component holding at least ``q > n/2`` reports is the (unique) proper cluster.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import DimensionMismatch

Distance = Callable[[np.ndarray, np.ndarray], float]


@dataclass(frozen=True)
class GameParams:
    n: int = 6
    q: int = 4
    delta: float = 1.0
    eps1: float = 0.01
    eps2: float = 0.01
    r: float = 0.8
    c: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("committee size must be positive")
        if not (2 * self.q > self.n and self.q <= self.n):
            raise ValueError(f"quorum q={self.q} must satisfy n/2 < q <= n (n={self.n})")
        for name in ("eps1", "eps2", "r"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.delta <= 0:
            raise ValueError("delta must be positive")

    @property
    def p_in(self) -> float:
        return (1.0 - self.eps1) * self.r


REFERENCE_PARAMS = GameParams(n=6, q=4, eps1=0.01, eps2=0.01, r=0.8)


@dataclass(frozen=True)
class Report:
    verifier_id: str
    point: np.ndarray
    honest: bool = True  # simulation metadata, never read by the algorithm


@dataclass(frozen=True)
class ClusterOutcome:
    clusters: tuple[tuple[int, ...], ...]
    proper_cluster: tuple[int, ...] | None
    inferencer_accepted: bool

    @property
    def consensus(self) -> bool:
        return self.proper_cluster is not None

    @property
    def accepted(self) -> tuple[int, ...]:
        return self.proper_cluster or ()


def mean_abs_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def _points(reports) -> np.ndarray:
    pts = [np.atleast_1d(np.asarray(getattr(r, "point", r), dtype=np.float64)) for r in reports]
    dims = {p.shape for p in pts}
    if len(dims) > 1:
        raise DimensionMismatch(f"reports have differing shapes {sorted(dims)}")
    return np.stack(pts) if pts else np.empty((0, 1))


def distance_matrix(points: np.ndarray, distance: Distance | None = None) -> np.ndarray:
    n = len(points)
    if distance is None:
        flat = points.reshape(n, -1)
        return np.abs(flat[:, None, :] - flat[None, :, :]).mean(axis=2)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = distance(points[i], points[j])
    return out


def cluster(reports: Sequence, delta: float, q: int | None = None,
            distance: Distance | None = None, inferencer=None) -> ClusterOutcome:
    """Threshold components at radius ``2 * delta``; ``q`` defaults to a strict majority."""
    if len(reports) == 0:
        raise ValueError("need at least one report")
    pts = _points(reports)
    n = len(pts)
    q = n // 2 + 1 if q is None else q
    dist = np.ascontiguousarray(distance_matrix(pts, distance), dtype=np.float64)
    labels = kernels.threshold_components(dist, 2.0 * delta)
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(i)
    clusters = tuple(sorted((tuple(g) for g in groups.values()), key=lambda g: g[0]))
    proper = [c for c in clusters if len(c) >= q]
    assert len(proper) <= 1 or 2 * q <= n, "two proper clusters with q > n/2"
    proper_cluster = proper[0] if proper else None
    inf_ok = False
    if proper_cluster is not None and inferencer is not None:
        x = np.atleast_1d(np.asarray(getattr(inferencer, "point", inferencer), dtype=np.float64))
        if x.shape != pts.shape[1:]:
            raise DimensionMismatch("inferencer result shape differs from reports")
        d = distance or mean_abs_distance
        inf_ok = any(d(x, pts[i]) <= 2.0 * delta for i in proper_cluster)
    return ClusterOutcome(clusters, proper_cluster, inf_ok)


# analytic bounds -----------------------------------------------------------------

def _binom_pmf(n: int, k: int, p: float) -> float:
    return math.comb(n, k) * p ** k * (1.0 - p) ** (n - k)


def honest_accept_lower_bound(params: GameParams) -> float:
    """(1 - eps1) * P(Binomial(n-1, p_in) >= q-1)."""
    n, q, p = params.n, params.q, params.p_in
    tail = sum(_binom_pmf(n - 1, k, p) for k in range(q - 1, n))
    return (1.0 - params.eps1) * tail


@dataclass(frozen=True)
class DishonestBound:
    p_d1: float
    p_d2: float
    p_d3: float
    total: float
    naive_total: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.p_d1, self.p_d2, self.p_d3, self.total


def dishonest_accept_upper_bound(params: GameParams) -> DishonestBound:
    """Union bound over the three ways a non-computing verifier can be accepted.

    ``total`` is p_d2 + p_d3: a guess inside B(x, delta) already sits inside
    B(x, 3 delta), and the first term of p_d3 bounds that whole event, so adding
    p_d1 again double counts it. ``naive_total`` keeps the three-term sum.
    """
    n, q, p = params.n, params.q, params.p_in
    p_d1 = params.eps2
    p_d2 = sum(_binom_pmf(n - 1, k, p) for k in range(0, n - q + 1))
    p_d3 = params.eps2 + (n - 1) * (params.eps1 * params.r + params.eps2 * (1.0 - params.r))
    return DishonestBound(p_d1, p_d2, p_d3, min(1.0, p_d2 + p_d3), min(1.0, p_d1 + p_d2 + p_d3))


def brute_force_honest_bound(params: GameParams) -> float:
    """Same quantity by enumerating all 2^(n-1) regular/irregular outcomes of the others."""
    from itertools import product

    p = params.p_in
    total = 0.0
    for pattern in product((0, 1), repeat=params.n - 1):
        k = sum(pattern)
        if k >= params.q - 1:
            total += p ** k * (1 - p) ** (len(pattern) - k)
    return (1.0 - params.eps1) * total


# simulation -------------------------------------------------------------------

POLICIES = ("random_guess", "colluding")
DEFAULT_DIM = 8


@dataclass(frozen=True)
class RoundResult:
    honest: tuple[bool, ...]
    accepted: tuple[bool, ...]
    consensus: bool
    inferencer_accepted: bool


def _radii(rng: np.random.Generator, honest: np.ndarray, params: GameParams, policy: str) -> np.ndarray:
    """Distance of each report from the ground truth, in units of delta."""
    shape = honest.shape
    u = rng.random(shape)
    v = rng.random(shape)
    # honest: inside B(x, delta) w.p. 1-eps1, otherwise in [delta, 4 delta)
    h = np.where(u < 1.0 - params.eps1, v, 1.0 + 3.0 * v)
    # non-computing guess: inside B(x, 3 delta) w.p. eps2, otherwise in [10 delta, 20 delta)
    g = np.where(u < params.eps2, 3.0 * v, 10.0 + 10.0 * v)
    if policy == "colluding":
        g = np.where(u < params.eps2, 3.0 * v, 10.0)
    return np.where(honest, h, g)


def _place(rng, radii: np.ndarray, honest: np.ndarray, policy: str, dim: int, delta: float) -> np.ndarray:
    """Points x + s * radius with x = 0 and random sign vectors s (mean-abs norm = radius)."""
    signs = rng.choice(np.array([-1.0, 1.0]), size=radii.shape + (dim,))
    if policy == "colluding":
        common = np.ones(dim)
        far = (~honest) & (radii >= 10.0)
        signs = np.where(far[..., None], common, signs)
    return signs * (radii * delta)[..., None]


def simulate_round(params: GameParams, policy: str = "random_guess", seed: int | np.random.Generator = 0,
                   dim: int = DEFAULT_DIM, honest: Sequence[bool] | None = None) -> RoundResult:
    """One committee: draw honesty i.i.d. (unless given), place reports, cluster."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    hon = np.asarray(honest, dtype=bool) if honest is not None else rng.random(params.n) < params.r
    radii = _radii(rng, hon, params, policy)
    pts = _place(rng, radii, hon, policy, dim, params.delta)
    inf_point = rng.choice(np.array([-1.0, 1.0]), size=dim) * rng.random() * params.delta
    out = cluster(list(pts), params.delta, params.q, inferencer=inf_point)
    members = set(out.accepted)
    return RoundResult(tuple(bool(x) for x in hon), tuple(i in members for i in range(params.n)),
                       out.consensus, out.inferencer_accepted)


@dataclass(frozen=True)
class MonteCarloResult:
    trials: int
    honest_reports: int
    honest_accepted: int
    dishonest_reports: int
    dishonest_accepted: int
    consensus_rounds: int
    honest_in_consensus: int
    dishonest_in_consensus: int

    @property
    def honest_rate(self) -> float:
        return self.honest_accepted / self.honest_reports if self.honest_reports else 1.0

    @property
    def dishonest_rate(self) -> float:
        return self.dishonest_accepted / self.dishonest_reports if self.dishonest_reports else 0.0

    @property
    def consensus_rate(self) -> float:
        return self.consensus_rounds / self.trials

    @property
    def honest_rate_given_consensus(self) -> float:
        return self.honest_accepted / self.honest_in_consensus if self.honest_in_consensus else 1.0

    @property
    def dishonest_rate_given_consensus(self) -> float:
        return self.dishonest_accepted / self.dishonest_in_consensus if self.dishonest_in_consensus else 0.0


def batch_components(adj: np.ndarray) -> np.ndarray:
    """Reachability closure of a batch of boolean adjacency matrices (batch, n, n)."""
    n = adj.shape[-1]
    reach = adj | np.eye(n, dtype=bool)
    for _ in range(max(1, math.ceil(math.log2(max(n, 2))))):
        reach = np.matmul(reach.astype(np.uint8), reach.astype(np.uint8)) > 0
    return reach


def monte_carlo(params: GameParams, trials: int, seed: int = 0, policy: str = "random_guess",
                dim: int = DEFAULT_DIM, batch: int = 20000) -> MonteCarloResult:
    """Vectorized version of :func:`simulate_round` over many committees.

    Per-batch generators are derived from ``(seed, batch index)`` so the result
    does not depend on how batches are scheduled.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    n = params.n
    counts = np.zeros(7, dtype=np.int64)
    cons_total = 0
    for b, start in enumerate(range(0, trials, batch)):
        size = min(batch, trials - start)
        rng = np.random.default_rng([seed, b])
        hon = rng.random((size, n)) < params.r
        radii = _radii(rng, hon, params, policy)
        pts = _place(rng, radii, hon, policy, dim, params.delta)
        dist = np.abs(pts[:, :, None, :] - pts[:, None, :, :]).mean(axis=3)
        reach = batch_components(dist <= 2.0 * params.delta)
        size_of = reach.sum(axis=2)
        acc = size_of >= params.q
        cons = acc.any(axis=1)
        cons_total += int(cons.sum())
        counts += [
            hon.sum(), (acc & hon).sum(), (~hon).sum(), (acc & ~hon).sum(), 0,
            (hon & cons[:, None]).sum(), (~hon & cons[:, None]).sum(),
        ]
    return MonteCarloResult(trials, int(counts[0]), int(counts[1]), int(counts[2]), int(counts[3]),
                            cons_total, int(counts[5]), int(counts[6]))
