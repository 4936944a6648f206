"""Point sets in the unit box, periodic displacements and percentile neighborhoods."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# largest coordinate allowed on a non-periodic axis after clamping
UPPER = 1.0 - 1e-6


@dataclass(frozen=True)
class PointSet:
    """``N x N_d`` positions in ``[0, 1)`` with per-axis periodicity flags."""

    positions: np.ndarray
    periodic: tuple[bool, ...]

    def __post_init__(self):
        pos = np.asarray(self.positions)
        if pos.ndim != 2:
            raise ValueError(f"positions must be N x N_d, got shape {pos.shape}")
        if pos.shape[0] < 1:
            raise ValueError("a point set needs at least one point")
        if len(self.periodic) != pos.shape[1]:
            raise ValueError(f"{len(self.periodic)} periodic flags for {pos.shape[1]} dimensions")
        if np.any(pos < 0) or np.any(pos >= 1):
            raise ValueError("coordinates must lie in [0, 1)")
        object.__setattr__(self, "periodic", tuple(bool(p) for p in self.periodic))
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def n_dims(self) -> int:
        return self.positions.shape[1]

    def subset(self, idx) -> PointSet:
        return PointSet(self.positions[np.asarray(idx)], self.periodic)


def wrap_displacement(diff: np.ndarray, periodic) -> np.ndarray:
    """Shortest signed displacement on periodic axes, in ``[-0.5, 0.5)``."""
    per = np.asarray(periodic, dtype=bool)
    if not per.any():
        return diff
    wrapped = diff - np.floor(diff + 0.5)
    return np.where(per, wrapped, diff)


def periodic_shift(diff: np.ndarray, periodic) -> np.ndarray:
    """Integer offsets ``s`` with ``diff + s`` the wrapped displacement."""
    return wrap_displacement(diff, periodic) - diff


def translation(a, alpha, periodic) -> np.ndarray:
    """Translation vector ``a - alpha`` respecting periodic axes."""
    return wrap_displacement(np.asarray(a, dtype=float) - np.asarray(alpha, dtype=float), periodic)


def pairwise_translations(queries: np.ndarray, inputs: np.ndarray, periodic) -> np.ndarray:
    """``K x N x N_d`` array of ``queries[k] - inputs[n]`` (wrapped)."""
    return wrap_displacement(queries[:, None, :] - inputs[None, :, :], periodic)


def distance_matrix(a: PointSet | np.ndarray, b: PointSet | np.ndarray, periodic=None) -> np.ndarray:
    """Euclidean (periodic-aware) pairwise distances between two point sets."""
    if isinstance(a, PointSet):
        periodic = a.periodic if periodic is None else periodic
        a = a.positions
    if isinstance(b, PointSet):
        periodic = b.periodic if periodic is None else periodic
        b = b.positions
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if periodic is None:
        periodic = (False,) * a.shape[1]
    t = pairwise_translations(a, b, periodic)
    return np.sqrt(np.sum(t * t, axis=-1))


def rank_for(p: float, n: int) -> int:
    """Nearest-rank position ``ceil(p * n)`` clipped to ``[1, n]``."""
    if not 0 < p <= 1:
        raise ValueError(f"percentile must be in (0, 1], got {p}")
    # tolerate representation error such as 0.07 * 100 = 7.000000000000001
    return min(n, max(1, math.ceil(p * n - 1e-9)))


def epsilon_for(query, inputs: PointSet, p: float) -> float:
    """Nearest-rank ``p``-th percentile of the distances from ``query`` to ``inputs``."""
    d = distance_matrix(np.atleast_2d(np.asarray(query, dtype=float)), inputs.positions, inputs.periodic)[0]
    k = rank_for(p, d.size)
    return float(np.partition(d, k - 1)[k - 1])


@dataclass(frozen=True)
class Neighborhood:
    """Receptive fields of ``K`` queries, padded to a common width.

    ``index[k, m]`` is valid where ``mask[k, m]`` holds; padded slots point at
    input 0 and must be ignored. Valid slots come first in each row, ordered
    by increasing distance.
    """

    index: np.ndarray
    mask: np.ndarray
    distance: np.ndarray
    epsilon: np.ndarray
    n_inputs: int

    @property
    def sizes(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def members(self, k: int) -> np.ndarray:
        return self.index[k, self.mask[k]]


def build_neighborhood(queries: PointSet | np.ndarray, inputs: PointSet | np.ndarray, p: float,
                       periodic=None) -> Neighborhood:
    """All inputs within the percentile radius of each query (ties included)."""
    if isinstance(inputs, PointSet):
        periodic = inputs.periodic if periodic is None else periodic
        inputs = inputs.positions
    q = queries.positions if isinstance(queries, PointSet) else np.asarray(queries)
    d = distance_matrix(q, np.asarray(inputs), periodic)
    n = d.shape[1]
    k = rank_for(p, n)
    eps = np.partition(d, k - 1, axis=1)[:, k - 1]
    inside = d <= eps[:, None]
    width = int(inside.sum(axis=1).max())
    # sort so valid members lead each row; stable keeps index order for ties
    order = np.argsort(np.where(inside, d, np.inf), axis=1, kind="stable")[:, :width]
    mask = np.take_along_axis(inside, order, axis=1)
    index = np.where(mask, order, 0)
    dist = np.where(mask, np.take_along_axis(d, order, axis=1), 0.0)
    return Neighborhood(index=index, mask=mask, distance=dist, epsilon=eps, n_inputs=n)


def confine(positions: np.ndarray, periodic) -> np.ndarray:
    """Map drifted positions back into the domain: wrap periodic axes, clamp the rest."""
    per = np.asarray(periodic, dtype=bool)
    wrapped = np.mod(positions, 1.0)
    # mod can round up to exactly 1.0 for tiny negative inputs
    wrapped = np.where(wrapped >= 1.0, 0.0, wrapped)
    clamped = np.clip(positions, 0.0, UPPER)
    return np.where(per, wrapped, clamped).astype(positions.dtype, copy=False)
