"""Drift and diffusion coefficients of the regularised interacting systems.

Two variants share the kernel layer:

* the log-price system, whose diffusion is
  g(y) * sigma_loc(t, e^x) * sqrt(floored weight sum) / sqrt(floored g^2 sum)
  and whose drift is exactly -diffusion^2 / 2;
* the price/variance system of the calibration loop, where the leverage
  multiplier alpha(t, s) = sigma_loc(t, s) * ratio plays the same role.

`LipschitzCertificate` evaluates, in exact arithmetic on the certified
input constants, the explicit Lipschitz bound of the diffusion in all four
arguments (time, state pair, measure); `empirical_lipschitz` measures the
realised sensitivities on a probe grid so the bound can be checked. Both
use the measure-normalized sum convention under which the bound is stated;
the simulation itself runs on raw sums.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .kernel import ParticleEnsemble, kernel_constants, leverage_ratio
from .model import GFunction, KernelSpec
from .surface import LocalVolFn
from .wasserstein import w2_2d_small


@dataclass(frozen=True)
class RegularisedCoeffs:
    """Bundle of the three ingredients of the regularised log-price system."""

    localvol: LocalVolFn
    g: GFunction
    kernel: KernelSpec


def sigma_tilde(coeffs: RegularisedCoeffs, t: float, x: float, y: float,
                ensemble: ParticleEnsemble, normalized: bool = False) -> float:
    """Diffusion coefficient of the regularised log-price dynamics."""
    ratio = leverage_ratio(ensemble, coeffs.g.squared, x, coeffs.kernel,
                           normalized=normalized)
    return float(coeffs.g(np.asarray(y))) * coeffs.localvol(t, math.exp(x)) * ratio


def b_tilde(coeffs: RegularisedCoeffs, t: float, x: float, y: float,
            ensemble: ParticleEnsemble, normalized: bool = False) -> float:
    """Drift coefficient: exactly -sigma_tilde^2 / 2 of the same evaluation."""
    sig = sigma_tilde(coeffs, t, x, y, ensemble, normalized=normalized)
    return -0.5 * sig * sig


def drift_and_diffusion(coeffs: RegularisedCoeffs, t: float, x: float, y: float,
                        ensemble: ParticleEnsemble,
                        normalized: bool = False) -> tuple[float, float]:
    """(drift, diffusion) computed from a single diffusion evaluation."""
    sig = sigma_tilde(coeffs, t, x, y, ensemble, normalized=normalized)
    return -0.5 * sig * sig, sig


def heston_lsv_coeffs(localvol: LocalVolFn, kernel: KernelSpec, t: float,
                      s: float, v: float, ensemble: ParticleEnsemble,
                      rate: float = 0.0) -> tuple[float, float]:
    """(drift, diffusion) of the price process in the calibration model.

    The ensemble carries the nonnegative variance values by contract; the
    state variance is truncated at zero before the square root.
    """
    if s <= 0.0:
        raise ValueError("price state must be positive")
    alpha = localvol(t, s) * leverage_ratio(ensemble, lambda y: y, s, kernel)
    vp = max(v, 0.0)
    return rate * s, math.sqrt(vp) * s * alpha


@dataclass(frozen=True)
class LipschitzCertificate:
    """Explicit Lipschitz bound of the regularised diffusion.

    The four term constants bound, respectively, the sensitivity to the
    measure (c1), the kernel-induced state sensitivity (c2), the
    vol-factor argument (c3), and the local-vol arguments (c4, covering
    both the 1/2-Hoelder time term and its state term). The overall bound
    is L = max(c1, c2 + c4, c3); c1 and c2 scale exactly like
    1/(epsilon * delta^2), c3 and c4 like 1/sqrt(delta).
    """

    a1: float
    a2: float
    a3: float
    l_g: float
    l_dup: float
    l_k: float
    epsilon: float
    delta: float

    @property
    def m1(self) -> float:
        """Joint Lipschitz constant of (x, y) -> g^2(y) K((x - q)/eps), times eps."""
        return math.sqrt(2.0) * max(self.a1 ** 2 * self.l_k,
                                    2.0 * self.a1 * self.l_g * self.a3 * self.epsilon)

    @property
    def c1(self) -> float:
        num = self.a1 * self.a2 * ((self.a1 ** 2 * self.a3 + self.delta) * self.m1
                                   + (self.a3 + self.delta) * self.m1)
        return num / (2.0 * self.epsilon * self.delta ** 2)

    @property
    def c2(self) -> float:
        num = (self.l_k * self.a1 ** 3 * self.a2 * (self.a3 + self.delta)
               + self.l_k * self.a1 * self.a2 * (self.a1 ** 2 * self.a3 + self.delta))
        return num / (2.0 * self.epsilon * self.delta ** 2)

    @property
    def c3(self) -> float:
        return self.a2 * math.sqrt(self.a3 + self.delta) * self.l_g \
            / math.sqrt(self.delta)

    @property
    def c4(self) -> float:
        return self.a1 * math.sqrt(self.a3 + self.delta) * self.l_dup \
            / math.sqrt(self.delta)

    @property
    def l_bound(self) -> float:
        return max(self.c1, self.c2 + self.c4, self.c3)

    @property
    def sup_bound(self) -> float:
        """Upper bound on the diffusion itself: a1 a2 sqrt((a3 + delta)/delta)."""
        return self.a1 * self.a2 * math.sqrt((self.a3 + self.delta) / self.delta)


def certificate_for(coeffs: RegularisedCoeffs) -> LipschitzCertificate:
    """Assemble the certificate from the components' certified constants.

    Requires a bounded g with an explicit (sup, Lipschitz) certificate; the
    local-vol bound uses the clamp cap, its Lipschitz/Hoelder surrogate the
    gradient bounds measured at construction.
    """
    if coeffs.g.bounds is None:
        raise ValueError("certificate requires a g with a bounds certificate")
    a1, l_g = coeffs.g.bounds
    a3, l_k = kernel_constants(coeffs.kernel.family)
    return LipschitzCertificate(
        a1=a1, a2=coeffs.localvol.cap, a3=a3, l_g=l_g,
        l_dup=max(coeffs.localvol.lipschitz_x, coeffs.localvol.holder_t),
        l_k=l_k, epsilon=coeffs.kernel.epsilon, delta=coeffs.kernel.delta)


@dataclass(frozen=True)
class Probe:
    """One paired perturbation: exactly one of t, x, y, measure differs."""

    kind: str  # "t" | "x" | "y" | "measure"
    t: float
    x: float
    y: float
    ensemble: ParticleEnsemble
    t2: float
    x2: float
    y2: float
    ensemble2: ParticleEnsemble


def make_probe_grid(seed: int, n_probes: int, kinds: Sequence[str] = ("t", "x", "y", "measure"),
                    n_atoms: int = 5, horizon: float = 1.0,
                    x_scale: float = 0.3, step: float = 0.05) -> list[Probe]:
    """Random paired probes around log-price 0-ish states, small ensembles."""
    rng = np.random.default_rng(seed)
    probes = []
    for _ in range(n_probes):
        kind = kinds[rng.integers(len(kinds))]
        t = float(rng.uniform(0.0, horizon))
        x = float(rng.normal(math.log(100.0), x_scale))
        y = float(rng.normal(0.0, 1.0))
        atoms_x = rng.normal(math.log(100.0), x_scale, size=n_atoms)
        atoms_y = rng.normal(0.0, 1.0, size=n_atoms)
        ens = ParticleEnsemble(atoms_x, atoms_y, time=t)
        t2, x2, y2, ens2 = t, x, y, ens
        if kind == "t":
            t2 = min(t + float(rng.uniform(0.1, 1.0)) * step, horizon)
        elif kind == "x":
            x2 = x + float(rng.uniform(0.1, 1.0)) * step
        elif kind == "y":
            y2 = y + float(rng.uniform(0.1, 1.0)) * step
        else:
            ens2 = ParticleEnsemble(
                atoms_x + rng.normal(0.0, step, size=n_atoms),
                atoms_y + rng.normal(0.0, step, size=n_atoms), time=t)
        probes.append(Probe(kind, t, x, y, ens, t2, x2, y2, ens2))
    return probes


@dataclass
class MeasuredLipschitz:
    """Per-dimension maxima of |delta sigma| / input distance over probes."""

    ratios: dict = field(default_factory=dict)
    certificate: Optional[LipschitzCertificate] = None

    @property
    def max_ratio(self) -> float:
        return max(self.ratios.values()) if self.ratios else 0.0


def empirical_lipschitz(coeffs: RegularisedCoeffs,
                        probes: Sequence[Probe]) -> MeasuredLipschitz:
    """Measure realised sensitivities of the diffusion on paired probes.

    Time distances enter with the 1/2-Hoelder scaling sqrt(|dt|); measure
    distances use the exact small-cloud W2. All evaluations run in the
    normalized convention the certificate is stated for.
    """
    maxima: dict[str, float] = {}
    for p in probes:
        base = sigma_tilde(coeffs, p.t, p.x, p.y, p.ensemble, normalized=True)
        pert = sigma_tilde(coeffs, p.t2, p.x2, p.y2, p.ensemble2, normalized=True)
        if p.kind == "t":
            dist = math.sqrt(abs(p.t2 - p.t))
        elif p.kind == "x":
            dist = abs(p.x2 - p.x)
        elif p.kind == "y":
            dist = abs(p.y2 - p.y)
        else:
            dist = w2_2d_small(
                np.column_stack([p.ensemble.xs, p.ensemble.ys]),
                np.column_stack([p.ensemble2.xs, p.ensemble2.ys]))
        if dist == 0.0:
            continue
        ratio = abs(pert - base) / dist
        maxima[p.kind] = max(maxima.get(p.kind, 0.0), ratio)
    out = MeasuredLipschitz(ratios=maxima)
    try:
        out.certificate = certificate_for(coeffs)
    except ValueError:
        out.certificate = None
    return out
