"""Sugeno lambda-fuzzy measures over a finite set of uncertainty levels.

Subsets of the level set ``{0, ..., K-1}`` are represented as integer bit
masks: bit ``i`` set means level ``i`` belongs to the subset.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import DensityOutOfRange, InvalidSubset, NoConvergence, NotConvex, TooLarge

DENSITY_EPS = 1e-4
LAMBDA_ZERO = 1e-12
SUM_ONE_TOL = 1e-12
RESIDUAL_TOL = 1e-10
MAX_ITER = 100
CORE_MAX_K = 8
TABLE_MAX_K = 20


def mask_of(levels: Iterable[int]) -> int:
    """Bit mask for an iterable of 0-based level indices."""
    mask = 0
    for k in levels:
        mask |= 1 << int(k)
    return mask


def members(mask: int) -> list[int]:
    return [i for i in range(mask.bit_length()) if mask >> i & 1]


def _check_densities(g) -> np.ndarray:
    g = np.asarray(g, dtype=float).ravel()
    if g.size == 0:
        raise DensityOutOfRange("at least one density is required")
    bad = ~((g > 0.0) & (g < 1.0))
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise DensityOutOfRange(f"density g[{k}] = {g[k]!r} is outside (0, 1)")
    return g


def _normalization_gap(lam: float, g: np.ndarray) -> float:
    """m_lam(full set) - 1, written so it stays accurate as lam -> 0."""
    if lam == 0.0:
        return math.fsum(g) - 1.0
    return math.expm1(float(np.sum(np.log1p(lam * g)))) / lam - 1.0


def _normalization_slope(lam: float, g: np.ndarray) -> float:
    prod = math.exp(float(np.sum(np.log1p(lam * g))))
    s1 = float(np.sum(g / (1.0 + lam * g)))
    return (prod * s1 * lam - (prod - 1.0)) / (lam * lam)


def characteristic_residual(lam: float, g) -> float:
    """``prod(1 + lam*g_k) - (1 + lam)`` evaluated directly."""
    g = np.asarray(g, dtype=float)
    return float(np.prod(1.0 + lam * g) - (1.0 + lam))


def solve_lambda(g: Sequence[float]) -> float:
    """Interaction parameter of the lambda-measure with densities ``g``.

    Finds the nonzero root in ``(-1, inf)`` of
    ``prod(1 + lam*g_k) = 1 + lam`` by safeguarded Newton iteration on the
    normalization gap ``m_lam(full) - 1``, which is increasing in ``lam``
    and has no spurious root at zero.  Densities summing to one (within
    1e-12) and single-level inputs return exactly 0.
    """
    g = _check_densities(g)
    if g.size == 1:
        return 0.0
    total = math.fsum(g)
    if abs(total - 1.0) <= SUM_ONE_TOL:
        return 0.0

    if total < 1.0:
        lo, hi = 0.0, 1.0
        while _normalization_gap(hi, g) < 0.0:
            hi *= 2.0
            if not math.isfinite(hi) or hi > 1e300:
                raise NoConvergence(f"cannot bracket lambda for densities {g.tolist()}")
        lam = hi if hi <= 1.0 else 0.5 * (lo + hi)
    else:
        lo, hi = -1.0, 0.0
        lam = -0.5

    for _ in range(MAX_ITER):
        gap = _normalization_gap(lam, g) if lam != 0.0 else total - 1.0
        if gap == 0.0:
            break
        if gap < 0.0:
            lo = lam
        else:
            hi = lam
        candidate = math.nan
        if lam != 0.0:
            slope = _normalization_slope(lam, g)
            if slope > 0.0 and math.isfinite(slope):
                candidate = lam - gap / slope
        if not (lo < candidate < hi):
            candidate = 0.5 * (lo + hi)
        if candidate == lam or hi - lo <= 4.0 * math.ulp(max(abs(lo), abs(hi))):
            lam = candidate
            break
        lam = candidate
    residual = characteristic_residual(lam, g)
    scale = max(1.0, abs(1.0 + lam))
    if not math.isfinite(residual) or abs(residual) > RESIDUAL_TOL * scale:
        raise NoConvergence(
            f"characteristic residual {residual:.3e} after {MAX_ITER} iterations for {g.tolist()}"
        )
    return lam


@dataclass(frozen=True)
class FuzzyMeasure:
    """Sugeno lambda-measure given by its singleton densities and ``lam``.

    Use :meth:`from_densities` to build one from densities alone; the
    direct constructor accepts a known ``lam`` and checks the
    characteristic equation.
    """

    g: tuple
    lam: float
    _table: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        g = tuple(float(x) for x in np.asarray(self.g, dtype=float).ravel())
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "lam", float(self.lam))
        if not g:
            raise DensityOutOfRange("at least one density is required")
        if any(not (0.0 <= x <= 1.0) for x in g):
            raise DensityOutOfRange(f"densities must lie in [0, 1], got {g}")
        if not self.lam > -1.0:
            raise ValueError(f"lambda must exceed -1, got {self.lam}")
        gap = self.normalization_gap()
        if abs(gap) > 1e-9:
            raise ValueError(f"measure of the full set is off by {gap:.3e}; lambda does not match g")

    @classmethod
    def from_densities(cls, g: Sequence[float]) -> "FuzzyMeasure":
        g = np.asarray(g, dtype=float).ravel()
        if g.size == 1:
            # one level: the only normalized capacity gives it weight 1
            _check_densities(g)
            return cls((1.0,), 0.0)
        return cls(tuple(g), solve_lambda(g))

    @classmethod
    def additive(cls, p: Sequence[float]) -> "FuzzyMeasure":
        """Probability measure (lam = 0); ``p`` may contain zeros."""
        p = np.asarray(p, dtype=float).ravel()
        if abs(math.fsum(p) - 1.0) > 1e-9:
            raise DensityOutOfRange(f"additive densities must sum to 1, got {math.fsum(p)!r}")
        return cls(tuple(p), 0.0)

    @property
    def K(self) -> int:
        return len(self.g)

    @property
    def full(self) -> int:
        return (1 << self.K) - 1

    @property
    def densities(self) -> np.ndarray:
        return np.asarray(self.g)

    def normalization_gap(self) -> float:
        g = np.asarray(self.g)
        if abs(self.lam) < LAMBDA_ZERO:
            return math.fsum(g) - 1.0
        return _normalization_gap(self.lam, g)

    def table(self) -> np.ndarray:
        """Measure of every subset, indexed by bit mask."""
        if self._table is None:
            object.__setattr__(self, "_table", all_subset_measures(self))
        return self._table

    def __call__(self, A: int) -> float:
        return measure_of(self, A)


def _check_mask(m: FuzzyMeasure, A: int) -> int:
    A = int(A)
    if A < 0 or A >> m.K:
        raise InvalidSubset(f"subset mask {A:#b} references levels outside 0..{m.K - 1}")
    return A


def measure_of(m: FuzzyMeasure, A: int) -> float:
    """Capacity of subset ``A`` by the lambda-rule."""
    A = _check_mask(m, A)
    if A == 0:
        return 0.0
    if A == m.full:
        return 1.0
    if A & (A - 1) == 0:
        return m.g[A.bit_length() - 1]
    g = np.asarray([m.g[i] for i in members(A)])
    if abs(m.lam) < LAMBDA_ZERO:
        value = math.fsum(g)
    else:
        value = math.expm1(float(np.sum(np.log1p(m.lam * g)))) / m.lam
    return min(1.0, max(0.0, value))


def dual_measure_of(m: FuzzyMeasure, A: int) -> float:
    """Dual capacity ``1 - m(complement of A)``."""
    A = _check_mask(m, A)
    if A == 0:
        return 0.0
    return 1.0 - measure_of(m, m.full ^ A)


@lru_cache(maxsize=32)
def subset_bits(K: int) -> np.ndarray:
    """Boolean matrix (2**K, K): row ``A`` marks the members of mask ``A``."""
    masks = np.arange(1 << K, dtype=np.int64)
    return ((masks[:, None] >> np.arange(K)) & 1).astype(bool)


def all_subset_measures(m: FuzzyMeasure) -> np.ndarray:
    """Vectorized :func:`measure_of` over every mask ``0 .. 2**K - 1``."""
    if m.K > TABLE_MAX_K:
        raise TooLarge(f"subset table for K = {m.K} exceeds 2**{TABLE_MAX_K} entries")
    bits = subset_bits(m.K).astype(float)
    g = np.asarray(m.g)
    if abs(m.lam) < LAMBDA_ZERO:
        values = bits @ g
    else:
        values = np.expm1(bits @ np.log1p(m.lam * g)) / m.lam
    values = np.clip(values, 0.0, 1.0)
    values[0] = 0.0
    values[-1] = 1.0
    for i, gi in enumerate(m.g):
        values[1 << i] = gi
    return values


def all_dual_measures(m: FuzzyMeasure) -> np.ndarray:
    table = m.table()
    dual = 1.0 - table[m.full ^ np.arange(1 << m.K)]
    dual[0] = 0.0
    return dual


@dataclass(frozen=True)
class CoreExtremePoints:
    """Marginal vectors of a convex measure, one row per permutation."""

    permutations: np.ndarray
    points: np.ndarray

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)


@lru_cache(maxsize=16)
def _permutations(K: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(K))), dtype=np.int64).reshape(-1, K)


def marginal_vectors(table: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Marginal vectors of an arbitrary capacity table (no convexity check)."""
    perms = _permutations(K)
    prefix = np.cumsum(np.left_shift(1, perms), axis=1)
    cap = table[prefix]
    increments = np.diff(cap, axis=1, prepend=0.0)
    points = np.empty_like(increments)
    np.put_along_axis(points, perms, increments, axis=1)
    return perms, points


def core_extreme_points(m: FuzzyMeasure) -> CoreExtremePoints:
    """Enumerate the extreme points of the core of a convex measure.

    Component ``sigma[i]`` of the vector for permutation ``sigma`` is
    ``m(sigma[:i+1]) - m(sigma[:i])``.

    Raises
    ------
    NotConvex
        If ``m.lam < 0``.
    TooLarge
        If ``m.K > 8``.
    """
    if m.lam < 0.0:
        raise NotConvex(f"core enumeration needs lam >= 0, got {m.lam}")
    if m.K > CORE_MAX_K:
        raise TooLarge(f"K = {m.K} exceeds the factorial guard K <= {CORE_MAX_K}")
    perms, points = marginal_vectors(m.table(), m.K)
    return CoreExtremePoints(perms, points)


def dominates(P: Sequence[float], m: FuzzyMeasure, tol: float = 1e-12) -> bool:
    """True when ``P(A) >= m(A) - tol`` on every subset ``A``."""
    P = np.asarray(P, dtype=float)
    return bool(np.all(subset_bits(m.K) @ P >= m.table() - tol))


@dataclass(frozen=True)
class MeasureField:
    """One lambda-measure per state, stored as arrays ``g`` (S, K) and ``lam`` (S,)."""

    g: np.ndarray
    lam: np.ndarray

    @classmethod
    def shared(cls, m: FuzzyMeasure, n_states: int) -> "MeasureField":
        g = np.broadcast_to(np.asarray(m.g), (n_states, m.K))
        return cls(g, np.broadcast_to(np.float64(m.lam), (n_states,)))

    @classmethod
    def from_densities(cls, G) -> "MeasureField":
        G = np.atleast_2d(np.asarray(G, dtype=float))
        if G.shape[1] == 1:
            return cls(np.ones_like(G), np.zeros(len(G)))
        lam = np.array([solve_lambda(row) for row in G])
        return cls(G.copy(), lam)

    @property
    def n_states(self) -> int:
        return self.g.shape[0]

    @property
    def K(self) -> int:
        return self.g.shape[1]

    def measure(self, s: int) -> FuzzyMeasure:
        return FuzzyMeasure(tuple(self.g[s]), float(self.lam[s]))
