"""Time integration of the forced and the nudged 2D Navier-Stokes equations.

Both systems are advanced with a second-order exponential Runge-Kutta
scheme (ETDRK2).  The diagonal linear part ``nu |n|^2 + mu 1_{|n|<=N}`` is
integrated exactly per mode; the advection term is treated explicitly and
the known sources (the force ``h`` and the feedback source ``mu P_N u``) are
integrated exactly for sources that vary linearly over the step.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .spectral import (
    SpectralField,
    SpectralGrid,
    WavenumberBall,
    _as_cutoff,
    high_pass,
    inner_product,
    self_advection_coeffs,
    sobolev_norm,
)

logger = logging.getLogger(__name__)


class BlowUpError(FloatingPointError):
    """A non-finite coefficient appeared during time stepping."""

    def __init__(self, time: float, message: str = ""):
        self.time = time
        super().__init__(f"non-finite state at t={time:.6g}" + (f": {message}" if message else ""))


class GuardViolation(ValueError):
    """A tuning parameter violates a well-posedness or admissibility condition."""

    def __init__(self, condition: str, message: str):
        self.condition = condition
        super().__init__(f"[{condition}] {message}")


class CFLWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class FlowState:
    velocity: SpectralField
    time: float = 0.0

    @property
    def grid(self) -> SpectralGrid:
        return self.velocity.grid


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    nu: float
    scheme: str = "etdrk2"
    cfl_limit: float = 0.5
    guard_constant: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if self.scheme != "etdrk2":
            raise ValueError(f"unsupported scheme {self.scheme!r}")


class ForcingSpec:
    """External force: zero, static, an arbitrary function of time, or frames.

    ``sampled`` forces are frames on a uniform clock, interpolated linearly
    in time; recovered time-dependent forces are stored this way.
    """

    def __init__(self, kind: str, *, field: SpectralField | None = None,
                 func: Callable[[float], SpectralField] | None = None,
                 times: np.ndarray | None = None, frames: Sequence[np.ndarray] | None = None,
                 grid: SpectralGrid | None = None, band_limit: int | None = None):
        if kind not in ("zero", "static", "time_dependent", "sampled"):
            raise ValueError(f"unknown forcing kind {kind!r}")
        self.kind = kind
        self.field = field
        self.func = func
        self.times = None if times is None else np.asarray(times, dtype=float)
        self.frames = None if frames is None else list(frames)
        self.grid = grid if grid is not None else (field.grid if field is not None else None)
        self.band_limit = None if band_limit is None else _as_cutoff(band_limit)
        if kind == "static":
            if field is None:
                raise ValueError("static forcing needs a field")
            self._check_band(field)
        if kind == "sampled":
            if self.times is None or self.frames is None or len(self.times) != len(self.frames):
                raise ValueError("sampled forcing needs matching times and frames")
            if len(self.times) == 0:
                raise ValueError("sampled forcing needs at least one frame")
            if self.grid is None:
                raise ValueError("sampled forcing needs a grid")
            for fr in self.frames:
                fr.setflags(write=False)

    @classmethod
    def zero(cls) -> "ForcingSpec":
        return cls("zero")

    @classmethod
    def static(cls, field: SpectralField, band_limit=None) -> "ForcingSpec":
        return cls("static", field=field, band_limit=band_limit)

    @classmethod
    def time_dependent(cls, func, grid: SpectralGrid, band_limit=None) -> "ForcingSpec":
        return cls("time_dependent", func=func, grid=grid, band_limit=band_limit)

    @classmethod
    def sampled(cls, times, frames, grid: SpectralGrid, band_limit=None) -> "ForcingSpec":
        return cls("sampled", times=times, frames=frames, grid=grid, band_limit=band_limit)

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero"

    @property
    def is_time_independent(self) -> bool:
        return self.kind in ("zero", "static")

    def _check_band(self, f: SpectralField) -> None:
        if self.band_limit is not None and np.any(high_pass(f, self.band_limit).coeffs != 0):
            raise ValueError(f"force has energy outside the band |n| <= {self.band_limit}")

    def coeffs_at(self, t: float) -> np.ndarray | None:
        """Coefficients at time ``t``; ``None`` for the zero force."""
        if self.kind == "zero":
            return None
        if self.kind == "static":
            return self.field.coeffs
        if self.kind == "time_dependent":
            f = self.func(t)
            self._check_band(f)
            return f.coeffs
        ts = self.times
        tol = 1e-9 * max(1.0, abs(ts[-1]))
        if t < ts[0] - tol or t > ts[-1] + tol:
            raise ValueError(f"t={t:.6g} outside sampled force range [{ts[0]:.6g}, {ts[-1]:.6g}]")
        if len(ts) == 1:
            return self.frames[0]
        j = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2))
        h = ts[j + 1] - ts[j]
        s = (t - ts[j]) / h
        if abs(s) <= 1e-9:
            return self.frames[j]
        if abs(s - 1.0) <= 1e-9:
            return self.frames[j + 1]
        return (1.0 - s) * self.frames[j] + s * self.frames[j + 1]

    def at(self, t: float, grid: SpectralGrid | None = None) -> SpectralField:
        c = self.coeffs_at(t)
        g = grid or self.grid
        if c is None:
            if g is None:
                raise ValueError("zero forcing needs a grid to materialise")
            return SpectralField.zeros(g)
        return SpectralField(g, c)

    def __repr__(self):
        return f"ForcingSpec(kind={self.kind!r}, band_limit={self.band_limit})"


# -- exponential integrator ----------------------------------------------------------


def _phi_functions(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    E = np.exp(-z)
    small = z < 1e-4
    zs = np.where(small, 1.0, z)
    em1 = np.expm1(-zs)
    phi1 = np.where(small, 1.0 - z / 2.0 + z * z / 6.0, -em1 / zs)
    phi2 = np.where(small, 0.5 - z / 6.0 + z * z / 24.0, (zs + em1) / (zs * zs))
    return E, phi1, phi2


_PROPAGATORS: dict = {}


def _propagator(grid: SpectralGrid, nu: float, mu: float, N: int | None, dt: float):
    key = (grid.M, float(nu), float(mu), N, float(dt))
    prop = _PROPAGATORS.get(key)
    if prop is None:
        L = nu * grid.k2
        if mu:
            L = L + mu * grid.ball_mask(N)
        E, phi1, phi2 = _phi_functions(L * dt)
        mask = grid.dealias_mask
        prop = (E * mask, dt * phi1 * mask, dt * phi2 * mask)
        if len(_PROPAGATORS) > 64:
            _PROPAGATORS.clear()
        _PROPAGATORS[key] = prop
    return prop


def _etdrk2(grid: SpectralGrid, c: np.ndarray, t: float, dt: float, prop,
            src0: np.ndarray | None, src1: np.ndarray | None) -> tuple[np.ndarray, float]:
    E, dphi1, dphi2 = prop
    b0, umax = self_advection_coeffs(grid, c)
    n0 = -b0 if src0 is None else src0 - b0
    a = E * c + dphi1 * n0
    b1, _ = self_advection_coeffs(grid, a)
    n1 = -b1 if src1 is None else src1 - b1
    out = a + dphi2 * (n1 - n0)
    if not np.isfinite(out).all():
        raise BlowUpError(t + dt)
    return out, umax


def _check_cfl(grid: SpectralGrid, dt: float, umax: float, limit: float, t: float) -> None:
    cfl = dt * umax * grid.M / (2.0 * np.pi)
    if cfl > limit:
        warnings.warn(f"CFL number {cfl:.3g} exceeds {limit} at t={t:.6g}", CFLWarning, stacklevel=3)


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def nse_step(state: FlowState, f: ForcingSpec, cfg: IntegratorConfig) -> FlowState:
    """One step of the dealiased Galerkin system ``u' + nu A u + B(u, u) = f``."""
    return nudged_step(state, None, f, 0.0, None, cfg)


def nudged_step(state: FlowState, obs: SpectralField | None, h: ForcingSpec, mu: float, N,
                cfg: IntegratorConfig, obs_end: SpectralField | None = None) -> FlowState:
    """One step of ``v' + nu A v + B(v, v) = h - mu P_N (v - u)``.

    ``obs`` is ``P_N u`` at the start of the step.  When ``obs_end`` (``P_N u``
    at the end of the step) is given, the observation is taken linear in
    time across the step; otherwise it is held constant.
    """
    grid = state.grid
    t, dt = state.time, cfg.dt
    if mu < 0:
        raise ValueError(f"mu must be non-negative, got {mu}")
    src0 = h.coeffs_at(t)
    src1 = h.coeffs_at(t + dt)
    cutoff = None
    if mu:
        cutoff = _as_cutoff(N)
        _check_guard(mu, cfg.nu, cutoff, cfg.guard_constant)
        o0 = _observation_coeffs(obs, grid, cutoff)
        o1 = o0 if obs_end is None else _observation_coeffs(obs_end, grid, cutoff)
        src0 = _add(src0, mu * o0)
        src1 = _add(src1, mu * o1)
    prop = _propagator(grid, cfg.nu, float(mu), cutoff, dt)
    c, umax = _etdrk2(grid, state.velocity.coeffs, t, dt, prop, src0, src1)
    _check_cfl(grid, dt, umax, cfg.cfl_limit, t)
    return FlowState(SpectralField(grid, c, copy=False), t + dt)


def _observation_coeffs(obs: SpectralField, grid: SpectralGrid, N: int) -> np.ndarray:
    if obs is None:
        raise ValueError("nudging with mu > 0 requires an observation")
    if obs.grid != grid:
        raise ValueError(f"observation grid {obs.grid} does not match state grid {grid}")
    outside = obs.coeffs * ~grid.ball_mask(N)
    if np.any(outside != 0):
        raise ValueError(f"observation has energy outside the ball |n| <= {N}")
    return obs.coeffs


def _check_guard(mu: float, nu: float, N: int, c_tilde: float) -> None:
    if mu > c_tilde * nu * N**2 * (1 + 1e-12):
        raise GuardViolation(
            "nudging_guard",
            f"mu={mu:.6g} exceeds c_tilde*nu*N^2={c_tilde * nu * N**2:.6g} "
            f"(c_tilde={c_tilde}, nu={nu}, N={N})",
        )


def integrate(state: FlowState, f: ForcingSpec, cfg: IntegratorConfig, n_steps: int,
              sample_every: int | None = None) -> list[FlowState]:
    """Advance ``n_steps`` of the forced system.

    Returns the sampled trajectory, always including the initial and final
    states when ``sample_every`` is given, otherwise just ``[final]``.
    Times are computed as ``t0 + k dt`` so they stay aligned with sample clocks.
    """
    grid = state.grid
    prop = _propagator(grid, cfg.nu, 0.0, None, cfg.dt)
    t0 = state.time
    c = state.velocity.coeffs
    out = [state] if sample_every else []
    for k in range(n_steps):
        t = t0 + k * cfg.dt
        c, umax = _etdrk2(grid, c, t, cfg.dt, prop, f.coeffs_at(t), f.coeffs_at(t + cfg.dt))
        _check_cfl(grid, cfg.dt, umax, cfg.cfl_limit, t)
        if sample_every and (k + 1) % sample_every == 0:
            out.append(FlowState(SpectralField(grid, c, copy=False), t0 + (k + 1) * cfg.dt))
    final = FlowState(SpectralField(grid, c, copy=False), t0 + n_steps * cfg.dt)
    if not sample_every:
        return [final]
    if n_steps % sample_every:
        out.append(final)
    return out


# -- a priori diagnostics ----------------------------------------------------


def _sample_norms(f: ForcingSpec, times: Iterable[float], order: float, grid=None) -> np.ndarray:
    times = list(times)
    if not times:
        raise ValueError("empty time window")
    if f.is_zero:
        return np.zeros(len(times))
    return np.array([sobolev_norm(f.at(t, grid), order) for t in times])


def grashof(f: ForcingSpec, nu: float, horizon: Iterable[float] = (0.0,)) -> float:
    """``sup_t ||f(t)|| / (kappa0^2 nu^2)`` over the sample times (kappa0 = 1)."""
    return float(np.max(_sample_norms(f, horizon, 0.0))) / nu**2


def shape_factor(f: ForcingSpec, horizon: Iterable[float] = (0.0,)) -> float:
    """``sup_t ||A^(1/2) f|| / sup_t ||f||``; at least 1 by Poincare."""
    horizon = list(horizon)
    l2 = np.max(_sample_norms(f, horizon, 0.0))
    if l2 == 0:
        raise ValueError("shape factor is undefined for a zero force")
    return float(np.max(_sample_norms(f, horizon, 1.0)) / l2)


@dataclass
class AprioriReport:
    grashof: float = 0.0
    shape_factor: float = 1.0
    R1: float = 0.0
    R2: float = 0.0
    R2_static: float | None = None
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    energy: np.ndarray = field(default_factory=lambda: np.zeros(0))
    enstrophy: np.ndarray = field(default_factory=lambda: np.zeros(0))
    palenstrophy: np.ndarray = field(default_factory=lambda: np.zeros(0))
    balance_residual: np.ndarray = field(default_factory=lambda: np.zeros(0))
    envelope_violations: list = field(default_factory=list)
    balance_violations: list = field(default_factory=list)
    radius_violations: list = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return bool(self.envelope_violations or self.balance_violations or self.radius_violations)


def absorbing_radii(G: float, sigma1: float, nu: float, c_L: float = 1.0,
                    c2: float | None = None) -> AprioriReport:
    """Absorbing-ball radii ``R1 = nu G`` and ``R2 = 12 c_L nu (G + sigma1) G``.

    ``c2`` additionally evaluates the sharper time-independent radius
    ``c2 nu (sigma1^(1/2) + G) G``.
    """
    if G < 0 or sigma1 < 0 or nu <= 0:
        raise ValueError("G, sigma1 must be non-negative and nu positive")
    c2_tilde = 12.0 * c_L
    rep = AprioriReport(grashof=G, shape_factor=sigma1, R1=nu * G,
                        R2=c2_tilde * nu * (G + sigma1) * G)
    if c2 is not None:
        rep.R2_static = c2 * nu * (np.sqrt(sigma1) + G) * G
    return rep


def balance_report(trajectory: Sequence[FlowState], f: ForcingSpec, nu: float, *,
                   grashof_number: float | None = None, rtol: float = 1e-3,
                   transient: float | None = None) -> AprioriReport:
    """Norm history and balance-law monitors along a uniformly sampled run.

    ``energy``, ``enstrophy`` and ``palenstrophy`` hold the norms ``||u||``,
    ``||A^(1/2) u||`` and ``||A u||``.  Three monitors are evaluated:

    * the enstrophy envelope
      ``|A^(1/2)u(t)|^2 <= |A^(1/2)u(t0)|^2 e^{-nu(t-t0)} + 2 nu^2 G^2 (1 - e^{-nu(t-t0)})``,
    * the left-endpoint energy balance residual
      ``|dE + nu |A^(1/2)u|^2 dt - <f, u> dt|`` relative to ``max E``,
    * after ``transient`` (if given), the radius ``|A^(1/2)u| <= sqrt(2) nu G``.
    """
    if not trajectory:
        return AprioriReport()
    times = np.array([s.time for s in trajectory])
    if len(times) > 2:
        gaps = np.diff(times)
        if np.max(np.abs(gaps - gaps[0])) > 1e-9 * max(1.0, abs(times[-1])):
            raise ValueError("trajectory must be uniformly sampled")
    grid = trajectory[0].grid
    fields = [s.velocity for s in trajectory]
    l2 = np.array([sobolev_norm(u, 0) for u in fields])
    h1 = np.array([sobolev_norm(u, 1) for u in fields])
    h2 = np.array([sobolev_norm(u, 2) for u in fields])
    if grashof_number is None:
        grashof_number = 0.0 if f.is_zero else grashof(f, nu, times)
    G = grashof_number
    rep = AprioriReport(grashof=G, R1=nu * G, times=times, energy=l2, enstrophy=h1, palenstrophy=h2)
    if not f.is_zero:
        rep.shape_factor = shape_factor(f, times)

    # enstrophy envelope, tolerance for rounding only
    dtt = times - times[0]
    env = h1[0] ** 2 * np.exp(-nu * dtt) + 2 * nu**2 * G**2 * (1 - np.exp(-nu * dtt))
    slack = 1e-10 * max(env.max(), 1e-300)
    rep.envelope_violations = [float(t) for t, a, b in zip(times, h1**2, env) if a > b + slack]

    if len(times) > 1:
        dt = times[1] - times[0]
        E = 0.5 * l2**2
        work = np.array([0.0 if f.is_zero else inner_product(f.at(t, grid), u)
                         for t, u in zip(times[:-1], fields[:-1])])
        res = np.abs(np.diff(E) + nu * h1[:-1] ** 2 * dt - work * dt)
        rep.balance_residual = res
        scale = max(E.max(), 1e-300)
        rep.balance_violations = [float(t) for t, r in zip(times[:-1], res) if r > rtol * scale]

    if transient is not None:
        bound = np.sqrt(2.0) * nu * G
        rep.radius_violations = [float(t) for t, a in zip(times, h1)
                                 if t >= times[0] + transient and a > bound * (1 + 1e-12)]
    return rep
