"""Stratified Gaussian state perturbations at K increasing noise levels.

Every random draw comes from a counter-based Philox stream keyed by
``(seed, stream_id)``; the stream id is the index of the state being
perturbed.  Results therefore do not depend on the order in which states
are visited or on how work is split across threads.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class UncertaintyLevels:
    """K noise levels with scales ``eps_k = eps_base * k`` and M samples each."""

    K: int = 10
    eps_base: float = 0.1
    M: int = 5
    seed: int = 0

    def __post_init__(self):
        if int(self.K) < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if int(self.M) < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if not self.eps_base >= 0:
            raise ValueError(f"eps_base must be >= 0, got {self.eps_base}")
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "eps_base", float(self.eps_base))
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)

    @property
    def eps(self) -> np.ndarray:
        return self.eps_base * np.arange(1, self.K + 1)


def stream(seed: int, stream_id: int) -> np.random.Generator:
    """Independent generator for one ``(seed, stream_id)`` pair."""
    key = ((int(seed) & _MASK64) << 64) | (int(stream_id) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_perturbed(s, levels: UncertaintyLevels, stream_id: int) -> np.ndarray:
    """Perturbed copies of state ``s``, shape (K, M, dim).

    Level ``k`` adds isotropic Gaussian noise of scale ``eps_k``.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    noise = stream(levels.seed, stream_id).standard_normal((levels.K, levels.M, s.size))
    return s + levels.eps[:, None, None] * noise


def level_values(V, s, levels: UncertaintyLevels, snap, stream_id: int) -> np.ndarray:
    """Per-level average of ``V`` over the snapped perturbed samples of ``s``."""
    V = np.asarray(V, dtype=float)
    idx = snap(sample_perturbed(s, levels, stream_id))
    return V[idx].mean(axis=-1)


def perturbation_indices(geometry, levels: UncertaintyLevels, threads: int = 1) -> np.ndarray:
    """Snapped sample indices for every state, shape (S, K, M).

    Row ``i`` holds the samples of :func:`sample_perturbed` around the
    center of state ``i`` with ``stream_id = i``.
    """
    centers = geometry.centers()
    S = len(centers)
    if levels.eps_base == 0.0:
        own = geometry.snap(centers)
        return np.broadcast_to(own[:, None, None], (S, levels.K, levels.M)).copy()

    def block(rows):
        return np.stack([geometry.snap(sample_perturbed(centers[i], levels, i)) for i in rows])

    chunks = [r for r in np.array_split(np.arange(S), max(1, int(threads))) if len(r)]
    if threads <= 1 or len(chunks) == 1:
        return block(range(S))
    with ThreadPoolExecutor(max_workers=int(threads)) as pool:
        return np.concatenate(list(pool.map(block, chunks)))


def level_value_table(V, indices: np.ndarray) -> np.ndarray:
    """Level values of every state, shape (S, K), from precomputed indices."""
    return np.asarray(V, dtype=float)[indices].mean(axis=-1)
