"""Particle-based European call pricing and error metrics vs the market."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import Trajectory
from .surface import VolSurface


class GridMismatchError(ValueError):
    """Report and market quote grids do not line up."""


@dataclass
class PriceReport:
    """Model call prices at one maturity with their standard errors."""

    maturity: float
    strikes: np.ndarray
    model_prices: np.ndarray
    std_errors: np.ndarray
    market_prices: Optional[np.ndarray] = None

    def to_csv(self, comment: Optional[str] = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        buf.write("maturity,strike,model_price,market_price,std_err\n")
        for j, k in enumerate(self.strikes):
            mkt = "" if self.market_prices is None \
                else repr(float(self.market_prices[j]))
            buf.write(f"{float(self.maturity)!r},{float(k)!r},"
                      f"{float(self.model_prices[j])!r},{mkt},"
                      f"{float(self.std_errors[j])!r}\n")
        return buf.getvalue()


def price_calls(trajectory: Trajectory, strikes, rate: float) -> PriceReport:
    """Average discounted payoff per strike at the trajectory horizon."""
    strikes = np.atleast_1d(np.asarray(strikes, dtype=float))
    s_t = trajectory.terminal.xs
    horizon = trajectory.grid.horizon
    disc = math.exp(-rate * horizon)
    payoff = np.maximum(s_t[None, :] - strikes[:, None], 0.0)
    prices = disc * payoff.mean(axis=1)
    errs = disc * payoff.std(axis=1) / math.sqrt(s_t.size)
    return PriceReport(maturity=horizon, strikes=strikes,
                       model_prices=prices, std_errors=errs)


def attach_market(report: PriceReport, market: VolSurface,
                  atol: float = 1e-9) -> PriceReport:
    """Fill the report's market column from the surface grid."""
    ti = np.nonzero(np.isclose(market.maturities, report.maturity, atol=atol))[0]
    if ti.size != 1:
        raise GridMismatchError(
            f"maturity {report.maturity} not on the market grid")
    cols = []
    for k in report.strikes:
        kj = np.nonzero(np.isclose(market.strikes, k, atol=atol))[0]
        if kj.size != 1:
            raise GridMismatchError(f"strike {k} not on the market grid")
        cols.append(int(kj[0]))
    report.market_prices = market.call_prices[int(ti[0]), cols].copy()
    return report


def rmse(report: PriceReport, market: VolSurface) -> float:
    """Root mean square model-vs-market price error over the quote grid."""
    attach_market(report, market)
    diff = report.model_prices - report.market_prices
    return math.sqrt(float(np.mean(diff * diff)))
