"""Synthetic market surface and the Dupire local-volatility function.

The surface is a rectangular (maturity, strike) grid of call prices with
their implied vols. `dupire_local_vol` applies the price-based Dupire
formula with central finite differences on that grid, clamps the result
into a configurable vol band, and wraps it into an interpolator: cubic
spline along strike per maturity, monotone (PCHIP) across maturity, flat
extrapolation outside the grid in both directions.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator

from .analytic import EuropeanQuote, heston_call, implied_vol
from .model import HestonParams

VOL_FLOOR = 0.01
VOL_CAP = 2.0
DENOMINATOR_FLOOR_SCALE = 1e-8  # times spot^2


class SurfaceError(ValueError):
    """Surface construction failed; message carries grid coordinates."""


@dataclass(frozen=True)
class VolSurface:
    """Gridded call prices and implied vols over (maturity, strike)."""

    maturities: np.ndarray
    strikes: np.ndarray
    call_prices: np.ndarray
    implied_vols: np.ndarray
    spot: float
    rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "maturities", np.asarray(self.maturities, float))
        object.__setattr__(self, "strikes", np.asarray(self.strikes, float))
        object.__setattr__(self, "call_prices", np.asarray(self.call_prices, float))
        object.__setattr__(self, "implied_vols", np.asarray(self.implied_vols, float))

    def validate(self, tol: float = 1e-8) -> list[str]:
        """No-arbitrage and shape checks; returns violations."""
        out = []
        if not np.all(np.diff(self.maturities) > 0):
            out.append("maturities not strictly ascending")
        if not np.all(np.diff(self.strikes) > 0):
            out.append("strikes not strictly ascending")
        lower = np.maximum(
            self.spot - self.strikes[None, :]
            * np.exp(-self.rate * self.maturities[:, None]), 0.0)
        if np.any(self.call_prices < lower - tol) or np.any(self.call_prices > self.spot + tol):
            out.append("prices violate no-arbitrage bounds")
        if self.maturities.size > 1 and np.any(np.diff(self.call_prices, axis=0) < -tol):
            out.append("calendar monotonicity violated")
        return out


def generate_market_surface(params: HestonParams, maturities, strikes) -> VolSurface:
    """Price the Heston surface on the given grid and invert implied vols."""
    maturities = np.asarray(maturities, dtype=float)
    strikes = np.asarray(strikes, dtype=float)
    if maturities.size == 0 or strikes.size == 0:
        raise SurfaceError("empty maturity or strike grid")
    if not np.all(np.diff(maturities) > 0) or not np.all(np.diff(strikes) > 0):
        raise SurfaceError("grids must be strictly ascending")
    prices = np.empty((maturities.size, strikes.size))
    vols = np.empty_like(prices)
    for i, t in enumerate(maturities):
        for j, k in enumerate(strikes):
            try:
                prices[i, j] = heston_call(params, float(k), float(t))
                vols[i, j] = implied_vol(
                    EuropeanQuote(float(t), float(k), prices[i, j]),
                    params.spot, params.rate)
            except Exception as exc:
                raise SurfaceError(
                    f"surface node failed at maturity={t}, strike={k}: {exc}"
                ) from exc
    return VolSurface(maturities, strikes, prices, vols,
                      spot=params.spot, rate=params.rate)


@dataclass
class LocalVolFn:
    """Clamped, interpolated local-vol function sigma(t, s).

    Evaluations always land in [floor, cap]. `lipschitz_x` and `holder_t`
    are gradient bounds measured on a fine lattice at construction, used by
    the Lipschitz certificate as surrogates for the spline's true constants.
    `degenerate_nodes` lists interior grid nodes whose strike-convexity
    denominator fell below the floor and was clamped.
    """

    maturities: np.ndarray
    strikes: np.ndarray
    grid_vols: np.ndarray
    floor: float = VOL_FLOOR
    cap: float = VOL_CAP
    degenerate_nodes: list = field(default_factory=list)
    lipschitz_x: float = 0.0
    holder_t: float = 0.0
    _row_splines: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.maturities = np.asarray(self.maturities, float)
        self.strikes = np.asarray(self.strikes, float)
        self.grid_vols = np.asarray(self.grid_vols, float)
        if self.strikes.size >= 2:
            self._row_splines = [CubicSpline(self.strikes, row)
                                 for row in self.grid_vols]
        else:
            self._row_splines = [None] * self.maturities.size
        self._measure_gradients()

    def _measure_gradients(self):
        ss = np.linspace(self.strikes[0], self.strikes[-1],
                         max(4 * self.strikes.size, 64))
        rows = self._rows_at(ss)
        # Lipschitz in log-price: |d sigma / d log s| = |d sigma / d s| * s
        dlog = np.diff(np.log(ss))
        self.lipschitz_x = float(np.max(np.abs(np.diff(rows, axis=1)) / dlog))
        if self.maturities.size > 1:
            tt = np.linspace(self.maturities[0], self.maturities[-1],
                             max(4 * self.maturities.size, 64))
            vals = PchipInterpolator(self.maturities, rows, axis=0)(tt)
            dsq = np.sqrt(np.diff(tt))
            self.holder_t = float(np.max(np.abs(np.diff(vals, axis=0))
                                         / dsq[:, None]))
        else:
            self.holder_t = 0.0

    def _rows_at(self, s: np.ndarray) -> np.ndarray:
        """Per-maturity strike-spline values at s, flat beyond the grid."""
        sc = np.clip(s, self.strikes[0], self.strikes[-1])
        if self.strikes.size < 2:
            return np.broadcast_to(self.grid_vols[:, :1], (self.maturities.size, sc.size)).copy()
        return np.stack([spl(sc) for spl in self._row_splines])

    def __call__(self, t, s):
        """sigma(t, s); accepts scalar t with scalar or vector s."""
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        rows = self._rows_at(s_arr)
        if self.maturities.size == 1:
            vals = rows[0]
        else:
            tc = float(np.clip(t, self.maturities[0], self.maturities[-1]))
            vals = PchipInterpolator(self.maturities, rows, axis=0)(tc)
        vals = np.clip(vals, self.floor, self.cap)
        return vals if np.ndim(s) else float(vals[0])


def dupire_local_vol(surface: VolSurface, rate: float = 0.0,
                     floor: float = VOL_FLOOR, cap: float = VOL_CAP) -> LocalVolFn:
    """Local volatility from call prices by finite differences.

    sigma^2(T, K) = (dC/dT + r K dC/dK) / ((K^2 / 2) d2C/dK2), central
    stencils inside the grid and one-sided at its edges. Denominators below
    1e-8 * spot^2 are recorded as degenerate and clamped; the resulting vol
    is clamped into [floor, cap].
    """
    problems = surface.validate()
    if problems:
        raise SurfaceError("; ".join(problems))
    ts = surface.maturities
    ks = surface.strikes
    c = surface.call_prices
    if ks.size < 3:
        raise SurfaceError("need at least 3 strikes for convexity")

    dc_dt = np.gradient(c, ts, axis=0, edge_order=min(2, ts.size - 1)) \
        if ts.size > 1 else np.zeros_like(c)
    dc_dk = np.gradient(c, ks, axis=1, edge_order=min(2, ks.size - 1))

    d2c_dk2 = np.empty_like(c)
    hk = np.diff(ks)
    # central second difference on a (possibly nonuniform) strike grid
    h0 = hk[:-1][None, :]
    h1 = hk[1:][None, :]
    d2c_dk2[:, 1:-1] = 2.0 * (h0 * c[:, 2:] - (h0 + h1) * c[:, 1:-1]
                              + h1 * c[:, :-2]) / (h0 * h1 * (h0 + h1))
    d2c_dk2[:, 0] = d2c_dk2[:, 1]
    d2c_dk2[:, -1] = d2c_dk2[:, -2]

    den_floor = DENOMINATOR_FLOOR_SCALE * surface.spot ** 2
    degenerate = []
    denom = (ks[None, :] ** 2 / 2.0) * d2c_dk2
    for i in range(ts.size):
        for j in range(1, ks.size - 1):
            if denom[i, j] < den_floor:
                degenerate.append((float(ts[i]), float(ks[j])))
    denom = np.maximum(denom, den_floor)
    numer = dc_dt + rate * ks[None, :] * dc_dk
    var = np.clip(numer / denom, floor ** 2, cap ** 2)
    vols = np.sqrt(var)
    return LocalVolFn(ts, ks, vols, floor=floor, cap=cap,
                      degenerate_nodes=degenerate)


def constant_local_vol(vol: float, maturities=None, strikes=None,
                       floor: float = VOL_FLOOR, cap: float = VOL_CAP) -> LocalVolFn:
    """Flat local-vol function, mainly for controls and certificates."""
    ts = np.asarray(maturities if maturities is not None else [0.0, 1.0], float)
    ks = np.asarray(strikes if strikes is not None else [1.0, 100.0, 200.0], float)
    grid = np.full((ts.size, ks.size), float(vol))
    return LocalVolFn(ts, ks, grid, floor=floor, cap=cap)


# --- CSV serialization (bit-stable round trip) ---

SURFACE_HEADER = "maturity,strike,call_price,implied_vol"


def surface_to_csv(surface: VolSurface, comment: Optional[str] = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    buf.write(f"# spot={surface.spot!r} rate={surface.rate!r}\n")
    buf.write(SURFACE_HEADER + "\n")
    for i, t in enumerate(surface.maturities):
        for j, k in enumerate(surface.strikes):
            buf.write(f"{float(t)!r},{float(k)!r},"
                      f"{float(surface.call_prices[i, j])!r},"
                      f"{float(surface.implied_vols[i, j])!r}\n")
    return buf.getvalue()


def write_surface_csv(surface: VolSurface, path, comment: Optional[str] = None):
    with open(path, "w") as fh:
        fh.write(surface_to_csv(surface, comment))


def read_surface_csv(path) -> VolSurface:
    spot = math.nan
    rate = 0.0
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if tok.startswith("spot="):
                        spot = float(tok[5:])
                    elif tok.startswith("rate="):
                        rate = float(tok[5:])
                continue
            if line == SURFACE_HEADER:
                continue
            t, k, p, v = line.split(",")
            rows.append((float(t), float(k), float(p), float(v)))
    ts = np.array(sorted({r[0] for r in rows}))
    ks = np.array(sorted({r[1] for r in rows}))
    prices = np.full((ts.size, ks.size), np.nan)
    vols = np.full_like(prices, np.nan)
    ti = {t: i for i, t in enumerate(ts)}
    kj = {k: j for j, k in enumerate(ks)}
    for t, k, p, v in rows:
        prices[ti[t], kj[k]] = p
        vols[ti[t], kj[k]] = v
    if np.any(np.isnan(prices)):
        raise SurfaceError("surface CSV does not cover a full grid")
    if math.isnan(spot):
        raise SurfaceError("surface CSV missing spot metadata")
    return VolSurface(ts, ks, prices, vols, spot=spot, rate=rate)
