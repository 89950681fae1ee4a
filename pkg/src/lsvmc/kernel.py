"""Kernel-smoothed conditional expectations over a particle ensemble.

Two backends compute the same kernel sums:

* ``naive``: exact O(N^2) double loop with exactly-rounded accumulation
  (math.fsum), so results are independent of particle order. This is the
  reference used by every oracle test.
* ``binned``: particles sorted once, each query sums over the window where
  the kernel is nonzero (compact support, or an 8-bandwidth truncation for
  the Gaussian). Compiled with numba; agrees with ``naive`` to 1e-6
  relative error per query.

Two sum conventions coexist, selected by ``normalized``:

* raw (default): plain sums of the bandwidth-scaled kernel plus an unscaled
  floor delta, which is what the calibration loop uses;
* normalized: (1/N)-averaged sums of the unscaled kernel plus delta, the
  convention under which the Lipschitz certificates are stated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np
from scipy.integrate import quad

# the default TBB layer is version-gated on this image; workqueue always works
numba.config.THREADING_LAYER = "workqueue"

from .model import KernelSpec


class ZeroDenominatorError(ZeroDivisionError):
    """All kernel weights underflowed with delta=0: bandwidth too small."""


class BackendUnavailableError(RuntimeError):
    """The requested backend cannot evaluate this kernel family."""


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# family -> (code, sup |K|, Lipschitz constant of K, support radius in u-units)
# support None means infinite; the binned backend then needs a truncation rule.
_GAUSS_TRUNCATION = 8.0  # tail mass beyond 8 sigma < 1e-15

_KERNELS = {
    "gaussian": (0, _INV_SQRT_2PI, math.exp(-0.5) * _INV_SQRT_2PI, None),
    "quartic": (1, 15.0 / 16.0, 2.5 / math.sqrt(3.0), 1.0),
    "epanechnikov": (2, 0.75, 1.5, 1.0),
}


def kernel_pdf(family: str, u):
    """Base kernel K(u): nonnegative, symmetric, unit mass."""
    u = np.asarray(u, dtype=float)
    if family == "gaussian":
        return np.exp(-0.5 * u * u) * _INV_SQRT_2PI
    if family == "quartic":
        w = np.maximum(1.0 - u * u, 0.0)
        return (15.0 / 16.0) * w * w
    if family == "epanechnikov":
        return 0.75 * np.maximum(1.0 - u * u, 0.0)
    raise ValueError(f"unknown kernel family {family!r}")


def kernel_constants(family: str) -> tuple[float, float]:
    """(sup |K|, Lipschitz constant of K) for certificate arithmetic."""
    _, a3, lk, _ = _KERNELS[family]
    return a3, lk


@lru_cache(maxsize=None)
def kernel_mass(family: str) -> float:
    lo, hi = (-10.0, 10.0) if family == "gaussian" else (-1.0, 1.0)
    val, _ = quad(lambda u: float(kernel_pdf(family, u)), lo, hi,
                  epsabs=1e-12, epsrel=1e-12)
    return val


def kernel_symmetry_defect(family: str) -> float:
    u = np.linspace(0.0, 5.0, 2001)
    return float(np.max(np.abs(kernel_pdf(family, u) - kernel_pdf(family, -u))))


def truncation_radius(spec: KernelSpec) -> float:
    """Half-width, in x-units, outside which the kernel is treated as zero."""
    _, _, _, support = _KERNELS[spec.family]
    if support is not None:
        return support * spec.epsilon
    if spec.family == "gaussian":
        return _GAUSS_TRUNCATION * spec.epsilon
    raise BackendUnavailableError(
        f"kernel family {spec.family!r} has no truncation rule; "
        "use the naive backend")


def mollifier(spec: KernelSpec, u):
    """Bandwidth-scaled kernel eps^-1 K(u/eps)."""
    return kernel_pdf(spec.family, np.asarray(u, dtype=float) / spec.epsilon) / spec.epsilon


@dataclass(frozen=True)
class ParticleEnsemble:
    """One time slice of the particle system: states and vol-factor values."""

    xs: np.ndarray
    ys: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "xs", np.asarray(self.xs, dtype=float))
        object.__setattr__(self, "ys", np.asarray(self.ys, dtype=float))
        if self.xs.shape != self.ys.shape or self.xs.ndim != 1:
            raise ValueError("xs and ys must be equal-length 1-d arrays")

    @property
    def size(self) -> int:
        return self.xs.size


def _eval_g2(g2, ys: np.ndarray) -> np.ndarray:
    vals = np.asarray(g2(ys), dtype=float)
    if vals.shape != ys.shape:
        vals = np.broadcast_to(vals, ys.shape).astype(float)
    return vals


def _sums_naive(xs: np.ndarray, weights: np.ndarray, queries: np.ndarray,
                spec: KernelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Exact raw sums: s1[i] = sum_j Phi(x_j - q_i), sg[i] = sum_j w_j Phi(...).

    fsum makes each sum exactly rounded, hence independent of particle order.
    """
    s1 = np.empty(queries.size)
    sg = np.empty(queries.size)
    for i, q in enumerate(queries):
        phi = kernel_pdf(spec.family, (xs - q) / spec.epsilon) / spec.epsilon
        s1[i] = math.fsum(phi)
        sg[i] = math.fsum(phi * weights)
    return s1, sg


@numba.njit(cache=True, parallel=True)
def _sums_binned_jit(xs_sorted, w_sorted, queries, eps, radius, code):  # pragma: no cover
    n_q = queries.shape[0]
    s1 = np.empty(n_q)
    sg = np.empty(n_q)
    inv_sqrt_2pi = 0.3989422804014327
    for i in numba.prange(n_q):
        q = queries[i]
        lo = np.searchsorted(xs_sorted, q - radius)
        hi = np.searchsorted(xs_sorted, q + radius)
        acc1 = 0.0
        accg = 0.0
        for j in range(lo, hi):
            u = (xs_sorted[j] - q) / eps
            if code == 0:
                k = math.exp(-0.5 * u * u) * inv_sqrt_2pi
            elif code == 1:
                w = 1.0 - u * u
                k = 0.9375 * w * w if w > 0.0 else 0.0
            else:
                w = 1.0 - u * u
                k = 0.75 * w if w > 0.0 else 0.0
            acc1 += k
            accg += k * w_sorted[j]
        s1[i] = acc1 / eps
        sg[i] = accg / eps
    return s1, sg


def _sums_binned(xs: np.ndarray, weights: np.ndarray, queries: np.ndarray,
                 spec: KernelSpec) -> tuple[np.ndarray, np.ndarray]:
    radius = truncation_radius(spec)
    code = _KERNELS[spec.family][0]
    order = np.argsort(xs, kind="stable")
    xs_sorted = np.ascontiguousarray(xs[order])
    w_sorted = np.ascontiguousarray(weights[order])
    return _sums_binned_jit(xs_sorted, w_sorted,
                            np.ascontiguousarray(queries, dtype=float),
                            spec.epsilon, radius, code)


def raw_sums(ensemble: ParticleEnsemble, g2, spec: KernelSpec,
             queries=None, backend: str = "naive"):
    """Floored raw kernel sums (denominator, g2-weighted numerator sums).

    Returns (sum_j Phi(x_j - q) , sum_j g2(y_j) Phi(x_j - q)) per query,
    before the delta floor is added.
    """
    if queries is None:
        queries = ensemble.xs
    queries = np.atleast_1d(np.asarray(queries, dtype=float))
    weights = _eval_g2(g2, ensemble.ys)
    if backend == "naive":
        return _sums_naive(ensemble.xs, weights, queries, spec)
    if backend == "binned":
        return _sums_binned(ensemble.xs, weights, queries, spec)
    raise ValueError(f"unknown backend {backend!r}")


def _normalized_sums(ensemble: ParticleEnsemble, g2, x: float, spec: KernelSpec):
    u = (ensemble.xs - x) / spec.epsilon
    k = kernel_pdf(spec.family, u)
    s1 = float(np.mean(k))
    sg = float(np.mean(_eval_g2(g2, ensemble.ys) * k))
    return s1, sg


def measure_expectation(ensemble: ParticleEnsemble, g2, x: float,
                        spec: KernelSpec) -> float:
    """Un-floored normalized expectation (1/N) sum g2(y_j) K((x_j - x)/eps)."""
    _, sg = _normalized_sums(ensemble, g2, x, spec)
    return sg


def nw_conditional(ensemble: ParticleEnsemble, g2, x: float, spec: KernelSpec,
                   normalized: bool = False) -> float:
    """Floored Nadaraya-Watson estimate of E[g2(Y) | X = x]."""
    if normalized:
        s1, sg = _normalized_sums(ensemble, g2, x, spec)
    else:
        s1_arr, sg_arr = _sums_naive(
            ensemble.xs, _eval_g2(g2, ensemble.ys),
            np.asarray([x], dtype=float), spec)
        s1, sg = float(s1_arr[0]), float(sg_arr[0])
    den = s1 + spec.delta
    if den == 0.0:
        raise ZeroDenominatorError(
            f"all kernel weights underflowed at x={x}; bandwidth "
            f"epsilon={spec.epsilon} too small for this ensemble")
    return (sg + spec.delta) / den


def leverage_ratio(ensemble: ParticleEnsemble, g2, x: float, spec: KernelSpec,
                   normalized: bool = False) -> float:
    """sqrt(floored weight sum) / sqrt(floored g2-weighted sum) at one query."""
    if normalized:
        s1, sg = _normalized_sums(ensemble, g2, x, spec)
    else:
        s1_arr, sg_arr = _sums_naive(
            ensemble.xs, _eval_g2(g2, ensemble.ys),
            np.asarray([x], dtype=float), spec)
        s1, sg = float(s1_arr[0]), float(sg_arr[0])
    num = s1 + spec.delta
    den = sg + spec.delta
    if den == 0.0:
        raise ZeroDenominatorError(
            f"g2-weighted kernel sum underflowed at x={x} with delta=0")
    return math.sqrt(num) / math.sqrt(den)


def nw_batch(ensemble: ParticleEnsemble, g2, spec: KernelSpec,
             queries=None, backend: str = "naive") -> np.ndarray:
    """Leverage ratios at many query points against one frozen ensemble.

    Intended for the self-interaction pattern (queries = ensemble.xs) but
    accepts any query vector; the chaos study queries a 2N-particle cloud
    against sums over its first N particles.
    """
    s1, sg = raw_sums(ensemble, g2, spec, queries, backend)
    num = s1 + spec.delta
    den = sg + spec.delta
    if spec.delta == 0.0 and np.any(den == 0.0):
        raise ZeroDenominatorError(
            "kernel sums underflowed at some query with delta=0")
    return np.sqrt(num) / np.sqrt(den)
