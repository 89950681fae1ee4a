"""Exact 2-Wasserstein distances between small equal-weight empirical measures.

These back the kernel-continuity property tests: in 1-D the sorted-atom
formula is exact; in 2-D the optimal coupling of two equal-weight clouds is
a permutation, found exhaustively for n <= 8 (the ground truth) or by the
Hungarian algorithm when explicitly requested for larger clouds.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


class TooLargeError(ValueError):
    """Exhaustive assignment requested beyond its size limit."""


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Equal-weight atoms in dimension 1 or 2."""

    atoms: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim not in (1, 2) or a.size == 0 or not np.all(np.isfinite(a)):
            raise ValueError("atoms must be a nonempty finite 1-d or 2-d array")
        object.__setattr__(self, "atoms", a)

    @property
    def n(self) -> int:
        return self.atoms.shape[0]


def _as_atoms(m) -> np.ndarray:
    return m.atoms if isinstance(m, EmpiricalMeasure) else np.asarray(m, float)


def w2_1d(mu, nu) -> float:
    """Exact W2 between 1-d equal-weight empirical measures.

    Equal atom counts use the sorted-difference formula directly; unequal
    counts are handled exactly by integrating the quantile-function gap on
    the merged probability breakpoints.
    """
    a = np.sort(_as_atoms(mu))
    b = np.sort(_as_atoms(nu))
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("w2_1d expects 1-d atom vectors")
    if a.size == b.size:
        return math.sqrt(float(np.mean((a - b) ** 2)))
    # merged quantile grid: breakpoints at i/n and j/m
    edges = np.union1d(np.arange(a.size + 1) / a.size,
                       np.arange(b.size + 1) / b.size)
    mids = 0.5 * (edges[:-1] + edges[1:])
    widths = np.diff(edges)
    qa = a[np.minimum((mids * a.size).astype(int), a.size - 1)]
    qb = b[np.minimum((mids * b.size).astype(int), b.size - 1)]
    return math.sqrt(float(np.sum(widths * (qa - qb) ** 2)))


def _cost_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sum(diff * diff, axis=2)


def w2_2d_small(mu, nu, method: str = "exhaustive") -> float:
    """Exact W2 between small 2-d equal-weight clouds via optimal assignment.

    `exhaustive` enumerates all permutations (n <= 8) with exactly-rounded
    per-permutation costs, so the result is symmetric in its arguments to
    the last bit. `hungarian` scales polynomially for larger clouds.
    """
    a = np.atleast_2d(_as_atoms(mu))
    b = np.atleast_2d(_as_atoms(nu))
    if a.shape != b.shape:
        raise ValueError("equal atom counts required")
    n = a.shape[0]
    cost = _cost_matrix(a, b)
    if method == "hungarian":
        rows, cols = linear_sum_assignment(cost)
        best = float(cost[rows, cols].sum())
    elif method == "exhaustive":
        if n > 8:
            raise TooLargeError(
                f"exhaustive assignment limited to n <= 8, got {n}; "
                "pass method='hungarian'")
        idx = np.arange(n)
        best = math.inf
        for perm in itertools.permutations(range(n)):
            total = math.fsum(cost[idx, perm])
            if total < best:
                best = total
    else:
        raise ValueError(f"unknown method {method!r}")
    return math.sqrt(best / n)


def coupled_cloud_bound(a: np.ndarray, b: np.ndarray) -> float:
    """Identity-coupling upper bound sqrt(mean_i |a_i - b_i|^2) >= W2."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    d = a - b
    if d.ndim == 1:
        return math.sqrt(float(np.mean(d * d)))
    return math.sqrt(float(np.mean(np.sum(d * d, axis=1))))
