"""Core parameter types shared across the library.

All containers are frozen dataclasses: validated once, then safe to share
between threads. Validation is reporting-only (`validate` returns the list
of violated invariants instead of raising) so configuration errors can be
surfaced in bulk.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

KERNEL_FAMILIES = ("gaussian", "quartic", "epanechnikov")
G_KINDS = ("identity", "exp", "sqrt", "bounded")


@dataclass(frozen=True)
class HestonParams:
    """Heston model parameters plus flat rate and spot.

    v0, theta are variances (1/year), kappa a mean-reversion speed (1/year),
    xi the vol-of-vol, rho the price/variance correlation.
    """

    v0: float
    kappa: float
    theta: float
    xi: float
    rho: float
    rate: float = 0.0
    spot: float = 100.0


@dataclass(frozen=True)
class OUParams:
    """Ornstein-Uhlenbeck volatility factor: dY = m*(theta - Y) dt + gamma dW."""

    m: float
    theta: float
    gamma: float
    rho_xy: float


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus the two regularisation parameters.

    epsilon is the bandwidth (units of the regression variable), delta the
    additive floor applied to both kernel sums.
    """

    family: str = "gaussian"
    epsilon: float = 1.0
    delta: float = 0.0


@dataclass(frozen=True)
class SimGrid:
    """Uniform time grid and ensemble size for one simulation run.

    Seeds are mandatory: every random draw in the library flows from them.
    """

    horizon: float
    steps: int
    particles: int
    seed: int

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)


def amise_bandwidth(spot: float, particles: int) -> float:
    """Default bandwidth epsilon = spot * N^(-1/5)."""
    return spot * particles ** (-0.2)


@dataclass(frozen=True)
class GFunction:
    """Scalar volatility-factor transform g applied to the second state.

    `bounds`, when given, is a (sup_bound, lipschitz_bound) certificate used
    by the Lipschitz harness; it is optional because the common sqrt-on-CIR
    choice admits neither bound globally.
    """

    kind: str = "identity"
    fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    bounds: Optional[tuple[float, float]] = None

    def __call__(self, y):
        if self.kind == "identity":
            return np.asarray(y, dtype=float)
        if self.kind == "exp":
            return np.exp(y)
        if self.kind == "sqrt":
            return np.sqrt(np.maximum(y, 0.0))
        if self.kind == "bounded":
            return np.asarray(self.fn(y), dtype=float)
        raise ValueError(f"unknown g kind {self.kind!r}")

    def squared(self, y):
        g = self(y)
        return g * g

    def check_bounds(self, grid: Sequence[float]) -> list[str]:
        """Check the certificate on a sampling grid; returns violations."""
        if self.bounds is None:
            return []
        a1, lg = self.bounds
        ys = np.asarray(grid, dtype=float)
        vals = self(ys)
        out = []
        if np.max(np.abs(vals)) > a1 + 1e-12:
            out.append(f"|g| exceeds certified bound {a1}")
        if ys.size >= 2:
            slopes = np.abs(np.diff(vals)) / np.abs(np.diff(ys))
            if np.max(slopes) > lg + 1e-12:
                out.append(f"g slope exceeds certified Lipschitz bound {lg}")
        return out


@dataclass
class ValidationReport:
    """Outcome of `validate`: empty violation list means valid."""

    subject: str
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _check(report: ValidationReport, cond: bool, msg: str) -> None:
    if not cond:
        report.violations.append(msg)


def validate(params) -> ValidationReport:
    """Check every declared invariant of a parameter container.

    Returns the report instead of raising so callers (the CLI in particular)
    can aggregate all violations in one pass.
    """
    report = ValidationReport(subject=type(params).__name__)
    if isinstance(params, HestonParams):
        _check(report, params.v0 > 0, "v0 > 0")
        _check(report, params.kappa > 0, "kappa > 0")
        _check(report, params.theta > 0, "theta > 0")
        _check(report, params.xi > 0, "xi > 0")
        _check(report, -1.0 <= params.rho <= 1.0, "rho in [-1, 1]")
        _check(report, params.spot > 0, "spot > 0")
    elif isinstance(params, OUParams):
        _check(report, params.m > 0, "m > 0")
        _check(report, params.gamma > 0, "gamma > 0")
        _check(report, -1.0 <= params.rho_xy <= 1.0, "rho_xy in [-1, 1]")
    elif isinstance(params, KernelSpec):
        _check(report, params.epsilon > 0, "epsilon > 0")
        _check(report, params.delta >= 0, "delta >= 0")
        _check(report, params.family in KERNEL_FAMILIES,
               f"family in {KERNEL_FAMILIES}")
        if params.family in KERNEL_FAMILIES:
            # normalization and symmetry of the base kernel, by quadrature
            from .kernel import kernel_mass, kernel_symmetry_defect

            _check(report, abs(kernel_mass(params.family) - 1.0) <= 1e-8,
                   "kernel integrates to 1")
            _check(report, kernel_symmetry_defect(params.family) == 0.0,
                   "kernel is symmetric")
    elif isinstance(params, SimGrid):
        _check(report, params.horizon > 0, "horizon > 0")
        _check(report, params.steps >= 1, "steps >= 1")
        _check(report, params.particles >= 2, "particles >= 2")
    elif isinstance(params, GFunction):
        _check(report, params.kind in G_KINDS, f"kind in {G_KINDS}")
        if params.kind == "bounded":
            _check(report, params.fn is not None, "bounded g requires fn")
            if params.fn is not None and params.bounds is not None:
                probe = np.linspace(-20.0, 20.0, 4001)
                for v in params.check_bounds(probe):
                    report.violations.append(v)
    else:
        report.violations.append(f"unsupported type {type(params).__name__}")
    return report
