"""Closed-form and semi-analytic European call pricing.

The Heston pricer uses the branch-cut-free characteristic function (the
"minus" root convention), which stays continuous in the integrand for long
maturities, integrated adaptively on a truncated domain. Accuracy is
validated externally against Monte Carlo and the Black-Scholes degenerate
limit; the quadrature itself reports failure when its internal error
estimate exceeds tolerance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.stats import norm

from .model import HestonParams


class OutOfBoundsError(ValueError):
    """Price violates its no-arbitrage bounds; no implied vol exists."""


class NoConvergenceError(RuntimeError):
    """Root finder failed to converge within the iteration budget."""


class QuadratureFailureError(RuntimeError):
    """Characteristic-function integral failed its error tolerance."""


@dataclass(frozen=True)
class EuropeanQuote:
    """A single (maturity, strike) call quote."""

    maturity: float
    strike: float
    call_price: float
    implied_vol: Optional[float] = None


def black_scholes_call(spot: float, strike: float, rate: float, vol: float,
                       maturity: float) -> float:
    """Black-Scholes call value with flat rate, no dividends."""
    if vol <= 0.0 or maturity <= 0.0:
        return max(spot - strike * math.exp(-rate * maturity), 0.0)
    sq = vol * math.sqrt(maturity)
    d1 = (math.log(spot / strike) + (rate + 0.5 * vol * vol) * maturity) / sq
    d2 = d1 - sq
    return spot * norm.cdf(d1) - strike * math.exp(-rate * maturity) * norm.cdf(d2)


def implied_vol(quote: EuropeanQuote, spot: float, rate: float,
                tol: float = 1e-10, max_iter: int = 200) -> float:
    """Invert Black-Scholes for the annualized vol matching a call price.

    The price must lie strictly inside (intrinsic, spot); the root is then
    bracketed and found by Brent's method.
    """
    lower = max(spot - quote.strike * math.exp(-rate * quote.maturity), 0.0)
    if not lower < quote.call_price < spot:
        raise OutOfBoundsError(
            f"call price {quote.call_price} outside ({lower}, {spot}) "
            f"at K={quote.strike}, T={quote.maturity}")

    def objective(v):
        return black_scholes_call(spot, quote.strike, rate, v, quote.maturity) \
            - quote.call_price

    lo, hi = 1e-9, 2.0
    while objective(hi) < 0.0:
        hi *= 2.0
        if hi > 64.0:
            raise NoConvergenceError("no upper bracket below vol = 64")
    try:
        return brentq(objective, lo, hi, xtol=tol, maxiter=max_iter)
    except RuntimeError as exc:  # scipy signals iteration exhaustion this way
        raise NoConvergenceError(str(exc)) from exc


def _heston_cf(u, params: HestonParams, maturity: float):
    """phi(u) = E[exp(i u log S_T)] in the stable formulation.

    beta - d is evaluated through the exact identity
    beta - d = -xi^2 (iu + u^2) / (beta + d), which avoids the catastrophic
    cancellation of the textbook form as xi -> 0 and keeps the principal
    log branch (|g| < 1) for all maturities.
    """
    i = 1j
    kappa, theta, xi, rho, v0 = (params.kappa, params.theta, params.xi,
                                 params.rho, params.v0)
    x = math.log(params.spot)
    beta = kappa - rho * xi * i * u
    q = i * u + u * u
    d = np.sqrt(beta * beta + xi * xi * q)
    bmd = -xi * xi * q / (beta + d)  # == beta - d, cancellation-free
    g = bmd / (beta + d)
    exp_dt = np.exp(-d * maturity)
    log_term = np.log((1.0 - g * exp_dt) / (1.0 - g))
    c = (params.rate * i * u * maturity
         + kappa * theta * (-q * maturity / (beta + d) - 2.0 * log_term / (xi * xi)))
    dd = bmd / (xi * xi) * ((1.0 - exp_dt) / (1.0 - g * exp_dt))
    return np.exp(i * u * x + c + dd * v0)


_QUAD_OPTS = dict(epsabs=1e-12, epsrel=1e-9, limit=400)
_UPPER = 800.0


def heston_call(params: HestonParams, strike: float, maturity: float) -> float:
    """Semi-analytic Heston call via the two risk-neutral probabilities.

    The companion put from put-call parity is `heston_put`; parity holds by
    construction.
    """
    if strike <= 0.0 or maturity <= 0.0:
        raise ValueError("strike and maturity must be positive")
    lnk = math.log(strike)
    disc = math.exp(-params.rate * maturity)
    fwd = params.spot / disc

    def int_p1(u):
        val = _heston_cf(u - 1j, params, maturity) / (1j * u * fwd)
        return (np.exp(-1j * u * lnk) * val).real

    def int_p2(u):
        val = _heston_cf(u, params, maturity) / (1j * u)
        return (np.exp(-1j * u * lnk) * val).real

    p = []
    for integrand in (int_p1, int_p2):
        val, err = quad(integrand, 0.0, _UPPER, **_QUAD_OPTS)
        if err > 1e-6 * max(1.0, abs(val)):
            raise QuadratureFailureError(
                f"integral error estimate {err:.2e} exceeds tolerance at "
                f"K={strike}, T={maturity}")
        p.append(0.5 + val / math.pi)
    return params.spot * p[0] - strike * disc * p[1]


def heston_put(params: HestonParams, strike: float, maturity: float) -> float:
    """Put from put-call parity: P = C - S + K e^(-rT)."""
    call = heston_call(params, strike, maturity)
    return call - params.spot + strike * math.exp(-params.rate * maturity)
