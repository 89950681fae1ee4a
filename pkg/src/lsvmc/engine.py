"""Euler-Maruyama time stepping of the interacting particle systems.

Each step freezes the ensemble, evaluates every particle's coefficients
against the frozen copy, then advances all particles with pre-generated
correlated Gaussian increments. The increments live in a `PathBundle`
realised once per run (one independent substream per particle), which is
what makes coupled-grid refinement and shared-noise system pairs exact:
coarse levels sum the fine increments of the same bundle.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .coefficients import RegularisedCoeffs
from .kernel import ParticleEnsemble, nw_batch
from .model import HestonParams, KernelSpec, OUParams, SimGrid
from .surface import LocalVolFn

# stream-id namespace for SeedSequence([seed, stream_id]) derivations
STREAM_PATHS = 0

LOG_STATE_GUARD = 50.0      # |X| beyond this aborts the log-price system
PRICE_GUARD_FACTOR = 1e6    # S beyond this multiple of spot aborts


class NonFiniteError(FloatingPointError):
    """A particle state left the finite (or guarded) range."""

    def __init__(self, step: int, particle: int, what: str):
        super().__init__(f"non-finite state at step {step}, particle {particle}: {what}")
        self.step = step
        self.particle = particle


class IncompatibleLevelsError(ValueError):
    """Refinement levels must all divide the finest level."""


@dataclass(frozen=True)
class PathBundle:
    """Correlated Gaussian increments, one row per particle.

    dw[:, :, 0] is the price/log-price increment, dw[:, :, 1] the
    vol-factor increment rho * dw0 + sqrt(1 - rho^2) * dZ; both are
    N(0, dt) marginally.
    """

    dw: np.ndarray
    seed: int
    rho: float
    dt: float

    @property
    def n_particles(self) -> int:
        return self.dw.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dw.shape[1]

    @classmethod
    def generate(cls, grid: SimGrid, rho: float,
                 stream_id: int = STREAM_PATHS) -> "PathBundle":
        """Realise the bundle from SeedSequence([seed, stream_id]) spawned
        once per particle (particle index = spawn key)."""
        root = np.random.SeedSequence([grid.seed, stream_id])
        children = root.spawn(grid.particles)
        sq = math.sqrt(grid.dt)
        cross = math.sqrt(max(1.0 - rho * rho, 0.0))
        dw = np.empty((grid.particles, grid.steps, 2))
        for i, child in enumerate(children):
            z = np.random.default_rng(child).standard_normal((grid.steps, 2))
            dw[i, :, 0] = sq * z[:, 0]
            dw[i, :, 1] = rho * dw[i, :, 0] + cross * sq * z[:, 1]
        return cls(dw=dw, seed=grid.seed, rho=rho, dt=grid.dt)

    def coarsen(self, factor: int) -> "PathBundle":
        """Aggregate consecutive fine increments; exact on the Brownian path."""
        if self.n_steps % factor:
            raise IncompatibleLevelsError(
                f"cannot coarsen {self.n_steps} steps by factor {factor}")
        dw = self.dw.reshape(self.n_particles, self.n_steps // factor, factor, 2).sum(axis=2)
        return PathBundle(dw=dw, seed=self.seed, rho=self.rho, dt=self.dt * factor)

    def empirical_rho(self) -> float:
        flat0 = self.dw[:, :, 0].ravel()
        flat1 = self.dw[:, :, 1].ravel()
        return float(np.corrcoef(flat0, flat1)[0, 1])


@dataclass
class Trajectory:
    """Per-step ensemble snapshots (optional) plus the terminal ensemble."""

    model: str
    grid: SimGrid
    steps: np.ndarray
    snapshots: list
    terminal: ParticleEnsemble
    truncation_events: int = 0
    leverage_times: Optional[np.ndarray] = None
    leverage_s: Optional[np.ndarray] = None
    leverage_grid: Optional[np.ndarray] = None

    @property
    def times(self) -> np.ndarray:
        return self.steps * self.grid.dt

    def to_csv(self, comment: Optional[str] = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        buf.write("step,time,particle,x_or_s,y_or_v\n")
        for m, ens in zip(self.steps, self.snapshots):
            t = m * self.grid.dt
            for i in range(ens.size):
                buf.write(f"{m},{float(t)!r},{i},{ens.xs[i]!r},{ens.ys[i]!r}\n")
        return buf.getvalue()


def _check_states(step: int, *arrays, guard=None):
    for arr in arrays:
        bad = ~np.isfinite(arr)
        if np.any(bad):
            raise NonFiniteError(step, int(np.argmax(bad)), "NaN/inf state")
    if guard is not None:
        arr, limit, label = guard
        over = np.abs(arr) > limit
        if np.any(over):
            raise NonFiniteError(step, int(np.argmax(over)),
                                 f"{label} exceeded guard {limit:g}")


def simulate_heston_lsv(localvol: Optional[LocalVolFn], kernel: KernelSpec,
                        params: HestonParams, grid: SimGrid, *,
                        bundle: Optional[PathBundle] = None,
                        backend: str = "binned",
                        alpha_override: Optional[float] = None,
                        n_leverage_sources: Optional[int] = None,
                        snapshot_every: Optional[int] = None,
                        leverage_grid_s: Optional[np.ndarray] = None) -> Trajectory:
    """Calibration loop for the price/variance system.

    Verbatim step: price update with the current leverage values, variance
    by full-truncation Euler, then the leverage for the next step from the
    ensemble frozen at this step's start (the update keeps the one-step lag
    of the published loop). Initial leverage is
    sigma_loc(0, s0) * sqrt(N + delta) / sqrt(N v0 + delta).

    `alpha_override` pins alpha to a constant (1.0 recovers the pure Heston
    model); `n_leverage_sources` restricts the kernel sums to the first n
    particles, which is the chaos-study estimator.
    """
    n, n_steps, dt = grid.particles, grid.steps, grid.dt
    if bundle is None:
        bundle = PathBundle.generate(grid, params.rho)
    if bundle.dw.shape[:2] != (n, n_steps):
        raise ValueError("bundle shape does not match grid")
    if alpha_override is None and localvol is None:
        raise ValueError("a local-vol function is required unless alpha is overridden")

    s = np.full(n, float(params.spot))
    v = np.full(n, float(params.v0))
    delta = kernel.delta
    if alpha_override is None:
        alpha = np.full(n, localvol(0.0, params.spot)
                        * math.sqrt(n + delta) / math.sqrt(n * params.v0 + delta))
    else:
        alpha = np.full(n, float(alpha_override))

    identity = lambda y: y  # noqa: E731 - conditional expectation of V itself
    truncations = 0
    steps = [0]
    snapshots = [ParticleEnsemble(s.copy(), np.maximum(v, 0.0), time=0.0)]
    lev_rows = []
    lev_times = []

    def leverage_row(t, ens, queries):
        if n_leverage_sources is not None:
            ens = ParticleEnsemble(ens.xs[:n_leverage_sources],
                                   ens.ys[:n_leverage_sources], time=ens.time)
        ratios = nw_batch(ens, identity, kernel, queries=queries, backend=backend)
        return localvol(t, queries) * ratios

    for m in range(n_steps):
        t = m * dt
        vp = np.maximum(v, 0.0)
        truncations += int(np.count_nonzero(v < 0.0))
        ens = ParticleEnsemble(s, vp, time=t)
        if leverage_grid_s is not None and alpha_override is None:
            lev_rows.append(leverage_row(t, ens, np.asarray(leverage_grid_s, float)))
            lev_times.append(t)
        dws = bundle.dw[:, m, 0]
        dwv = bundle.dw[:, m, 1]
        s_new = s + params.rate * s * dt + np.sqrt(vp) * s * alpha * dws
        v_new = v + params.kappa * (params.theta - vp) * dt \
            + params.xi * np.sqrt(vp) * dwv
        if alpha_override is None:
            alpha = leverage_row(t, ens, s)
        s, v = s_new, v_new
        _check_states(m + 1, s, v,
                      guard=(s, PRICE_GUARD_FACTOR * params.spot, "price"))
        if snapshot_every and (m + 1) % snapshot_every == 0:
            steps.append(m + 1)
            snapshots.append(ParticleEnsemble(s.copy(), np.maximum(v, 0.0),
                                              time=(m + 1) * dt))

    terminal = ParticleEnsemble(s, np.maximum(v, 0.0), time=grid.horizon)
    if not snapshot_every or n_steps % snapshot_every:
        steps.append(n_steps)
        snapshots.append(terminal)
    traj = Trajectory(model="heston-lsv", grid=grid, steps=np.asarray(steps),
                      snapshots=snapshots, terminal=terminal,
                      truncation_events=truncations)
    if leverage_grid_s is not None and alpha_override is None:
        lev_rows.append(leverage_row(grid.horizon, terminal,
                                     np.asarray(leverage_grid_s, float)))
        lev_times.append(grid.horizon)
        traj.leverage_times = np.asarray(lev_times)
        traj.leverage_s = np.asarray(leverage_grid_s, float)
        traj.leverage_grid = np.asarray(lev_rows)
    return traj


def simulate_log_mv(coeffs: RegularisedCoeffs, ou: OUParams, grid: SimGrid,
                    x0: float, y0: float, *,
                    bundle: Optional[PathBundle] = None,
                    backend: str = "binned",
                    ou_exact: bool = False,
                    snapshot_every: Optional[int] = None) -> Trajectory:
    """Regularised log-price system with an OU vol factor.

    Per step the ensemble is frozen, the diffusion evaluated per particle
    against it (drift is -diffusion^2/2 of the same values), then all
    particles advance together. The OU component uses plain Euler or, when
    `ou_exact`, its exact transition driven by the same increments.
    """
    n, n_steps, dt = grid.particles, grid.steps, grid.dt
    if bundle is None:
        bundle = PathBundle.generate(grid, ou.rho_xy)
    if bundle.dw.shape[:2] != (n, n_steps):
        raise ValueError("bundle shape does not match grid")

    x = np.full(n, float(x0))
    y = np.full(n, float(y0))
    g2 = coeffs.g.squared
    if ou_exact:
        decay = math.exp(-ou.m * dt)
        scale = ou.gamma * math.sqrt((1.0 - decay * decay) / (2.0 * ou.m)) \
            if ou.m > 0 else ou.gamma * math.sqrt(dt)
        inv_sq_dt = 1.0 / math.sqrt(dt)

    steps = [0]
    snapshots = [ParticleEnsemble(x.copy(), y.copy(), time=0.0)]
    for m in range(n_steps):
        t = m * dt
        ens = ParticleEnsemble(x, y, time=t)
        ratios = nw_batch(ens, g2, coeffs.kernel, queries=x, backend=backend)
        sig = coeffs.g(y) * coeffs.localvol(t, np.exp(x)) * ratios
        drift = -0.5 * sig * sig
        x = x + drift * dt + sig * bundle.dw[:, m, 0]
        if ou_exact:
            z = bundle.dw[:, m, 1] * inv_sq_dt
            y = ou.theta + (y - ou.theta) * decay + scale * z
        else:
            y = y + ou.m * (ou.theta - y) * dt + ou.gamma * bundle.dw[:, m, 1]
        _check_states(m + 1, x, y, guard=(x, LOG_STATE_GUARD, "log-price"))
        if snapshot_every and (m + 1) % snapshot_every == 0:
            steps.append(m + 1)
            snapshots.append(ParticleEnsemble(x.copy(), y.copy(), time=(m + 1) * dt))

    terminal = ParticleEnsemble(x, y, time=grid.horizon)
    if not snapshot_every or n_steps % snapshot_every:
        steps.append(n_steps)
        snapshots.append(terminal)
    return Trajectory(model="log-mv", grid=grid, steps=np.asarray(steps),
                      snapshots=snapshots, terminal=terminal)


@dataclass
class MartingaleReport:
    """Discounted-mean drift diagnostic of a price-system trajectory."""

    discrepancy: float
    std_error: float
    n: int

    @property
    def zscore(self) -> float:
        return self.discrepancy / self.std_error if self.std_error else math.inf


def martingale_check(trajectory: Trajectory, rate: float,
                     spot: Optional[float] = None) -> MartingaleReport:
    """|e^(-rT) mean(S_T) - s0| with its Monte Carlo standard error."""
    ens = trajectory.terminal
    disc = math.exp(-rate * trajectory.grid.horizon)
    s0 = spot if spot is not None else float(trajectory.snapshots[0].xs[0])
    mean = disc * float(np.mean(ens.xs))
    se = disc * float(np.std(ens.xs)) / math.sqrt(ens.size)
    return MartingaleReport(discrepancy=abs(mean - s0), std_error=se, n=ens.size)


@dataclass
class MomentProbe:
    """Sup over stored times of the mean squared state, per component."""

    x_sup: float
    y_sup: float
    z_sup: float


def moment_probe(trajectory: Trajectory) -> MomentProbe:
    if not trajectory.snapshots:
        raise ValueError("trajectory has no snapshots")
    x_sup = y_sup = z_sup = 0.0
    for ens in trajectory.snapshots:
        mx = float(np.mean(ens.xs ** 2))
        my = float(np.mean(ens.ys ** 2))
        x_sup = max(x_sup, mx)
        y_sup = max(y_sup, my)
        z_sup = max(z_sup, mx + my)
    return MomentProbe(x_sup=x_sup, y_sup=y_sup, z_sup=z_sup)


@dataclass(frozen=True)
class HestonLSVModel:
    """Model configuration for refinement studies of the calibration loop."""

    localvol: Optional[LocalVolFn]
    kernel: KernelSpec
    params: HestonParams
    alpha_override: Optional[float] = None
    backend: str = "binned"


@dataclass(frozen=True)
class LogMVModel:
    """Model configuration for refinement studies of the log-price system."""

    coeffs: RegularisedCoeffs
    ou: OUParams
    x0: float
    y0: float
    ou_exact: bool = False
    backend: str = "binned"


ModelConfig = Union[HestonLSVModel, LogMVModel]


def _run_model(model: ModelConfig, grid: SimGrid, bundle: PathBundle) -> Trajectory:
    if isinstance(model, HestonLSVModel):
        return simulate_heston_lsv(model.localvol, model.kernel, model.params,
                                   grid, bundle=bundle, backend=model.backend,
                                   alpha_override=model.alpha_override)
    return simulate_log_mv(model.coeffs, model.ou, grid, model.x0, model.y0,
                           bundle=bundle, backend=model.backend,
                           ou_exact=model.ou_exact)


def coupled_refinement(model: ModelConfig, grid: SimGrid,
                       levels: list[int]) -> dict[int, ParticleEnsemble]:
    """Simulate every level on one shared Brownian path.

    The path is realised at the finest level; coarser levels aggregate its
    increments, so per-particle terminal states are exactly aligned. Every
    level must divide the finest.
    """
    levels = sorted(set(int(m) for m in levels))
    finest = levels[-1]
    for m in levels:
        if finest % m:
            raise IncompatibleLevelsError(
                f"level {m} does not divide the finest level {finest}")
    rho = model.params.rho if isinstance(model, HestonLSVModel) else model.ou.rho_xy
    fine_grid = SimGrid(grid.horizon, finest, grid.particles, grid.seed)
    fine_bundle = PathBundle.generate(fine_grid, rho)
    out = {}
    for m in levels:
        level_grid = SimGrid(grid.horizon, m, grid.particles, grid.seed)
        out[m] = _run_model(model, level_grid, fine_bundle.coarsen(finest // m)).terminal
    return out


def strong_errors(terminals: dict[int, ParticleEnsemble],
                  component: str = "x") -> tuple[np.ndarray, np.ndarray]:
    """Pathwise RMS error of each level against the finest, per level.

    Returns (dt array, rms array) over levels below the finest; the horizon
    is read off the shared terminal time.
    """
    levels = sorted(terminals)
    ref = terminals[levels[-1]]
    horizon = ref.time if ref.time > 0 else 1.0
    ref_vals = ref.xs if component == "x" else ref.ys
    dts, errs = [], []
    for m in levels[:-1]:
        vals = terminals[m].xs if component == "x" else terminals[m].ys
        errs.append(math.sqrt(float(np.mean((vals - ref_vals) ** 2))))
        dts.append(horizon / m)
    return np.asarray(dts), np.asarray(errs)
