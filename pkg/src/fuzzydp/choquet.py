"""Discrete Choquet integrals against a lambda-measure and its dual.

Values are sorted in descending order (stable, so ties keep ascending
level order) and each value is weighted by the capacity increment of the
growing head set::

    C(f) = sum_i f_(i) * (m(top i) - m(top i-1))

For a convex measure this is the minimum expectation over the core, and
the same sum against the dual capacity is the maximum.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import LengthMismatch
from .measure import (
    LAMBDA_ZERO,
    FuzzyMeasure,
    core_extreme_points,
    dual_measure_of,
    measure_of,
)

MODES = ("standard", "tail-set")
TABLE_PATH_MAX_K = 16


def descending_order(f: np.ndarray) -> np.ndarray:
    """Sort permutation, largest value first, ties by ascending index."""
    return np.argsort(-np.asarray(f), axis=-1, kind="stable")


def _as_values(f, m: FuzzyMeasure) -> np.ndarray:
    f = np.asarray(f, dtype=float).ravel()
    if f.size != m.K:
        raise LengthMismatch(f"{f.size} level values for a measure with K = {m.K}")
    return f


def choquet_with_capacity(f, capacity: Callable[[int], float]) -> float:
    """Choquet integral of ``f`` against any capacity given as a set function."""
    f = np.asarray(f, dtype=float).ravel()
    total = 0.0
    head = 0
    previous = 0.0
    for i in descending_order(f):
        head |= 1 << int(i)
        current = capacity(head)
        total += f[i] * (current - previous)
        previous = current
    return float(total)


def _tail_set(f: np.ndarray, m: FuzzyMeasure, dual: bool) -> float:
    # tail-set capacities; see choquet_integral docstring
    if dual:
        order = np.argsort(f, kind="stable")
        sets = np.cumsum(np.left_shift(1, order))
    else:
        order = descending_order(f)
        sets = np.cumsum(np.left_shift(1, order)[::-1])[::-1]
    caps = np.array([measure_of(m, int(A)) for A in sets] + [0.0])
    return float(np.sum(f[order] * (caps[:-1] - caps[1:])))


def choquet_integral(f, m: FuzzyMeasure, mode: str = "standard") -> float:
    """Choquet integral of the level values ``f`` with respect to ``m``.

    ``mode="tail-set"`` instead pairs the descending sort with
    tail-set capacities ``m({(i), ..., (K)})``.  That variant evaluates the
    dual integral on non-additive measures and is kept only for
    side-by-side comparison; nothing else in the package uses it.
    """
    f = _as_values(f, m)
    if mode == "tail-set":
        return _tail_set(f, m, dual=False)
    if mode != "standard":
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return choquet_with_capacity(f, lambda A: measure_of(m, A))


def dual_choquet_integral(f, m: FuzzyMeasure, mode: str = "standard") -> float:
    """Choquet integral of ``f`` against the dual measure of ``m``."""
    f = _as_values(f, m)
    if mode == "tail-set":
        return _tail_set(f, m, dual=True)
    if mode != "standard":
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return choquet_with_capacity(f, lambda A: dual_measure_of(m, A))


def min_over_core(f, m: FuzzyMeasure) -> float:
    """Exact minimum of ``E_P[f]`` over the marginal vectors of ``m`` (oracle)."""
    f = _as_values(f, m)
    return float(np.min(core_extreme_points(m).points @ f))


def max_over_core(f, m: FuzzyMeasure) -> float:
    f = _as_values(f, m)
    return float(np.max(core_extreme_points(m).points @ f))


# -- batched evaluation -----------------------------------------------------


def _lambda_rule_cumulative(G: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Capacity of the growing prefixes of ``G`` along the last axis."""
    lam = np.asarray(lam, dtype=float)[..., None]
    small = np.abs(lam) < LAMBDA_ZERO
    safe = np.where(small, 1.0, lam)
    with np.errstate(invalid="ignore", divide="ignore"):
        curved = np.expm1(np.cumsum(np.log1p(safe * G), axis=-1)) / safe
    return np.where(small, np.cumsum(G, axis=-1), curved)


def _broadcast_measure(F, g, lam):
    F = np.asarray(F, dtype=float)
    g = np.broadcast_to(np.asarray(g, dtype=float), F.shape)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), F.shape[:-1])
    return F, g, lam


def _shared_table(g, lam, K):
    if np.ndim(g) == 1 and np.ndim(lam) == 0 and K <= TABLE_PATH_MAX_K:
        return FuzzyMeasure(tuple(np.asarray(g, dtype=float)), float(lam)).table()
    return None


def _sorted_with_prefix_masks(F):
    order = descending_order(F)
    Fs = np.take_along_axis(F, order, axis=-1)
    masks = np.cumsum(np.left_shift(1, order), axis=-1)
    return Fs, masks


def _keep_constant_rows(F, out):
    # the integral of a constant is that constant; avoid rounding drift
    const = np.all(F == F[..., :1], axis=-1)
    return np.where(const, F[..., 0], out)


def choquet_rows(F, g, lam) -> np.ndarray:
    """Choquet integral along the last axis of ``F``.

    ``g`` (densities) and ``lam`` broadcast against ``F`` and ``F[..., 0]``
    respectively, so a single global measure or one measure per row both
    work.  Agrees with :func:`choquet_integral` row by row.
    """
    F = np.asarray(F, dtype=float)
    table = _shared_table(g, lam, F.shape[-1])
    if table is not None:
        Fs, masks = _sorted_with_prefix_masks(F)
        out = np.einsum("...k,...k->...", Fs, np.diff(table[masks], axis=-1, prepend=0.0))
        return _keep_constant_rows(F, out)
    F, g, lam = _broadcast_measure(F, g, lam)
    order = descending_order(F)
    Fs = np.take_along_axis(F, order, axis=-1)
    head = _lambda_rule_cumulative(np.take_along_axis(g, order, axis=-1), lam)
    head = np.clip(head, 0.0, 1.0)
    head[..., -1] = 1.0
    weights = np.diff(head, axis=-1, prepend=0.0)
    return _keep_constant_rows(F, np.sum(Fs * weights, axis=-1))


def dual_choquet_rows(F, g, lam) -> np.ndarray:
    """Batched Choquet integral against the dual measure."""
    F = np.asarray(F, dtype=float)
    table = _shared_table(g, lam, F.shape[-1])
    if table is not None:
        full = (1 << F.shape[-1]) - 1
        dual = 1.0 - table[full ^ np.arange(full + 1)]
        dual[0] = 0.0
        Fs, masks = _sorted_with_prefix_masks(F)
        out = np.einsum("...k,...k->...", Fs, np.diff(dual[masks], axis=-1, prepend=0.0))
        return _keep_constant_rows(F, out)
    F, g, lam = _broadcast_measure(F, g, lam)
    order = descending_order(F)
    Fs = np.take_along_axis(F, order, axis=-1)
    Gs = np.take_along_axis(g, order, axis=-1)
    # tail[..., j] = m(sorted positions j..K-1); complement of the top-j head
    tail = _lambda_rule_cumulative(Gs[..., ::-1], lam)[..., ::-1]
    tail = np.clip(tail, 0.0, 1.0)
    tail[..., 0] = 1.0
    head = np.concatenate([1.0 - tail[..., 1:], np.ones_like(tail[..., :1])], axis=-1)
    weights = np.diff(head, axis=-1, prepend=0.0)
    return _keep_constant_rows(F, np.sum(Fs * weights, axis=-1))
