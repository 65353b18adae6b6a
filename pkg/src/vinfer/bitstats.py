"""Bit-level float32 decomposition and the bit-aware trace comparator.

Two traces are compared coordinate by coordinate. Pairs are split by whether
their biased exponent fields agree, and three rates plus a signed mean
discrepancy are tested against a tolerance preset.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyTrace, NonFiniteScalar, ShapeMismatch

SIGN_SHIFT = 31
EXP_SHIFT = 23
EXP_MASK = 0xFF
FRAC_MASK = 0x7FFFFF
FRAC_SCALE = float(1 << 23)


@dataclass(frozen=True)
class ScalarBits:
    sign: int
    exponent: int
    significand: float

    @property
    def is_subnormal(self) -> bool:
        return self.exponent == 0


@dataclass(frozen=True)
class Tolerances:
    e_w: float
    e_m: float
    p_e_max: float
    p_m_min: float
    p_w_min: float
    e_mean_lo: float
    e_mean_hi: float

    def __post_init__(self):
        if not (self.e_w > 0 and self.e_m > 0):
            raise ValueError("mantissa tolerances must be positive")
        if not self.e_mean_lo < self.e_mean_hi:
            raise ValueError("e_mean_lo must be below e_mean_hi")
        for f in (self.p_e_max, self.p_m_min, self.p_w_min):
            if not 0.0 <= f <= 1.0:
                raise ValueError("fraction bounds must lie in [0, 1]")


OFF_CHAIN = Tolerances(e_w=0.2, e_m=5.0, p_e_max=0.05, p_m_min=0.75, p_w_min=0.80,
                       e_mean_lo=-0.01, e_mean_hi=0.01)
ON_CHAIN = Tolerances(e_w=0.2, e_m=5.0, p_e_max=0.08, p_m_min=0.70, p_w_min=0.75,
                      e_mean_lo=-0.02, e_mean_hi=0.02)
PRESETS = {"off-chain": OFF_CHAIN, "on-chain": ON_CHAIN}


@dataclass(frozen=True)
class ComparisonStats:
    """Summary of one trace comparison.

    ``p_m`` is the share of exponent-mismatched pairs whose discrepancy
    exceeds ``e_m``; ``p_w`` the share of exponent-matched pairs within
    ``e_w``. Empty subgroups report 1.0.
    """

    p_e: float
    p_m: float
    p_w: float
    e_mean: float
    n_pairs: int
    n_exact: int
    n_exp_mismatch: int = 0
    n_mismatch_over: int = 0
    n_match_within: int = 0

    @classmethod
    def from_counts(cls, *, n_exact: int, matched_over: int, matched_within: int,
                    mismatched_over: int, mismatched_within: int,
                    e_mean: float) -> "ComparisonStats":
        """Build stats from bucket counts (exact pairs sit inside ``matched_within``)."""
        if n_exact > matched_within:
            raise ValueError("exact pairs are a subset of the matched-within bucket")
        matched = matched_over + matched_within
        mismatched = mismatched_over + mismatched_within
        n = matched + mismatched
        if n == 0:
            raise EmptyTrace("no pairs")
        return cls(
            p_e=mismatched / n,
            p_m=mismatched_over / mismatched if mismatched else 1.0,
            p_w=matched_within / matched if matched else 1.0,
            e_mean=float(e_mean),
            n_pairs=n,
            n_exact=n_exact,
            n_exp_mismatch=mismatched,
            n_mismatch_over=mismatched_over,
            n_match_within=matched_within,
        )


def _as_bits(x) -> int:
    f = np.float32(x)
    if not np.isfinite(f):
        raise NonFiniteScalar(f"non-finite scalar {x!r}")
    return int(f.view(np.uint32))


def decompose(x) -> ScalarBits:
    u = _as_bits(x)
    sign = u >> SIGN_SHIFT
    exponent = (u >> EXP_SHIFT) & EXP_MASK
    frac = u & FRAC_MASK
    lead = 1.0 if exponent else 0.0
    return ScalarBits(sign, exponent, lead + frac / FRAC_SCALE)


def recompose(bits: ScalarBits) -> np.float32:
    lead = 1.0 if bits.exponent else 0.0
    frac = int(round((bits.significand - lead) * FRAC_SCALE))
    if not 0 <= frac <= FRAC_MASK:
        raise ValueError(f"significand {bits.significand} out of range for exponent {bits.exponent}")
    u = (bits.sign << SIGN_SHIFT) | (bits.exponent << EXP_SHIFT) | frac
    return np.array([u], dtype=np.uint32).view(np.float32)[0]


def mantissa_diff(a: ScalarBits, b: ScalarBits) -> float:
    """Signed difference on the significand scale of the smaller exponent.

    Subnormals use the effective exponent 1 so the scaled values stay exact.
    """
    ea, eb = max(a.exponent, 1), max(b.exponent, 1)
    ref = min(ea, eb)
    va = (-1.0 if a.sign else 1.0) * a.significand * 2.0 ** (ea - ref)
    vb = (-1.0 if b.sign else 1.0) * b.significand * 2.0 ** (eb - ref)
    return va - vb


def _flat(trace):
    if isinstance(trace, np.ndarray):
        return trace.astype(np.float32, copy=False).reshape(-1), (trace.shape,)
    parts = [np.asarray(getattr(s, "values", s), dtype=np.float32) for s in trace]
    if not parts:
        raise EmptyTrace("trace has no states")
    shapes = tuple(p.shape for p in parts)
    return np.concatenate([p.reshape(-1) for p in parts]), shapes


def field_arrays(values: np.ndarray):
    """Vectorized decomposition: (sign, exponent, significand) arrays."""
    u = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    sign = (u >> SIGN_SHIFT).astype(np.int8)
    exponent = ((u >> EXP_SHIFT) & EXP_MASK).astype(np.int32)
    frac = (u & FRAC_MASK).astype(np.float64)
    sig = frac / FRAC_SCALE + (exponent > 0)
    return sign, exponent, sig


def mantissa_diffs(ref: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Vectorized :func:`mantissa_diff` over two float32 arrays."""
    sa, ea, ma = field_arrays(ref)
    sb, eb, mb = field_arrays(cand)
    ea_eff = np.maximum(ea, 1)
    eb_eff = np.maximum(eb, 1)
    lo = np.minimum(ea_eff, eb_eff)
    va = np.where(sa == 1, -ma, ma) * np.ldexp(1.0, ea_eff - lo)
    vb = np.where(sb == 1, -mb, mb) * np.ldexp(1.0, eb_eff - lo)
    return va - vb


def compare_arrays(ref: np.ndarray, cand: np.ndarray, tol: Tolerances = OFF_CHAIN) -> ComparisonStats:
    ref = np.asarray(ref, dtype=np.float32).reshape(-1)
    cand = np.asarray(cand, dtype=np.float32).reshape(-1)
    if ref.shape != cand.shape:
        raise ShapeMismatch(f"{ref.shape} vs {cand.shape}")
    n = ref.size
    if n == 0:
        raise EmptyTrace("no scalars to compare")
    if not (np.isfinite(ref).all() and np.isfinite(cand).all()):
        raise NonFiniteScalar("trace contains NaN or Inf")
    ub_ref = ref.view(np.uint32)
    ub_cand = cand.view(np.uint32)
    exp_ref = (ub_ref >> EXP_SHIFT) & EXP_MASK
    exp_cand = (ub_cand >> EXP_SHIFT) & EXP_MASK
    mism = exp_ref != exp_cand
    delta = mantissa_diffs(ref, cand)
    absd = np.abs(delta)
    n_mism = int(mism.sum())
    n_match = n - n_mism
    n_over = int((absd[mism] > tol.e_m).sum())
    n_within = int((absd[~mism] <= tol.e_w).sum())
    return ComparisonStats(
        p_e=n_mism / n,
        p_m=n_over / n_mism if n_mism else 1.0,
        p_w=n_within / n_match if n_match else 1.0,
        e_mean=float(delta.sum() / n),
        n_pairs=n,
        n_exact=int((ub_ref == ub_cand).sum()),
        n_exp_mismatch=n_mism,
        n_mismatch_over=n_over,
        n_match_within=n_within,
    )


def compare_traces(reference: Sequence, candidate: Sequence, tol: Tolerances = OFF_CHAIN) -> ComparisonStats:
    """Compare two traces (sequences of hidden states or arrays) elementwise."""
    ref, ref_shapes = _flat(reference)
    cand, cand_shapes = _flat(candidate)
    if ref_shapes != cand_shapes:
        raise ShapeMismatch(f"trace shapes differ: {ref_shapes} vs {cand_shapes}")
    return compare_arrays(ref, cand, tol)


def accept(stats: ComparisonStats, tol: Tolerances = OFF_CHAIN) -> bool:
    return (
        stats.p_e < tol.p_e_max
        and stats.p_m > tol.p_m_min
        and stats.p_w > tol.p_w_min
        and tol.e_mean_lo <= stats.e_mean <= tol.e_mean_hi
    )


def failed_predicates(stats: ComparisonStats, tol: Tolerances = OFF_CHAIN) -> list[str]:
    out = []
    if not stats.p_e < tol.p_e_max:
        out.append("p_e")
    if not stats.p_m > tol.p_m_min:
        out.append("p_m")
    if not stats.p_w > tol.p_w_min:
        out.append("p_w")
    if not tol.e_mean_lo <= stats.e_mean <= tol.e_mean_hi:
        out.append("e_mean")
    return out
