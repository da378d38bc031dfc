"""Staged reconstruction of the force from low-mode observations.

Each stage runs the nudged system driven by the previous force guess,
builds the approximate state ``u_n = P_N u + Q_N v_n`` and, after a
relaxation period, reads out the next guess

    f_n = d/dt P_N u + nu A P_N u + P_N B(u_n, u_n).

Only the observation series enters the reconstruction.  The truth (when
available, a twin experiment) is passed separately through
:class:`TwinData` and is used for diagnostics, for the exact derivative in
oracle mode, and for the measured inputs of the relaxation period.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dynamics import FlowState, ForcingSpec, GuardViolation, IntegratorConfig, nudged_step
from .observations import (
    ObservationSeries,
    observed_time_derivative,
    oracle_time_derivative,
    write_snapshot,
)
from .spectral import (
    SpectralField,
    _as_cutoff,
    advection_coeffs,
    self_advection_coeffs,
    sobolev_norm,
)
from .validation import check_fraction, check_positive, check_series

logger = logging.getLogger(__name__)

MODES = ("asymptotic", "time_independent", "recycle")


class WindowDeficitError(ValueError):
    """The observation record is too short for the planned stages."""

    def __init__(self, message: str, window: tuple[float, float], needed: float, trace=None):
        self.window = window
        self.needed = needed
        self.trace = trace
        super().__init__(f"{message}: window [{window[0]:.6g}, {window[1]:.6g}) but t={needed:.6g} is needed")


class StageFailure(RuntimeError):
    """A stage raised; the partial trace up to the failing stage is attached."""

    def __init__(self, stage: int, cause: Exception, trace):
        self.stage = stage
        self.trace = trace
        super().__init__(f"stage {stage} failed: {cause}")


# -- parameter selection ---------------------------------------------------------


@dataclass(frozen=True)
class Calibration:
    """Universal constants of the convergence estimates, exposed for calibration.

    ``c0, c1`` enter the resolution condition and the mu interval, ``C0`` the
    Reynolds-stress bound, ``C1`` the synchronisation estimate, ``c0_lower``
    the lower constant of the Grashof comparison, ``c_tilde`` the nudging
    guard ``mu <= c_tilde nu N^2`` and ``c_L`` the Ladyzhenskaya constant.
    """

    c0: float = 1.0
    c1: float = 1.0
    C0: float = 0.25
    C1: float = 1.0
    c0_lower: float = 1.0
    c_tilde: float = 1.0
    c_L: float = 1.0

    def __post_init__(self):
        for name in ("c0", "c1", "C0", "C1", "c0_lower", "c_tilde", "c_L"):
            check_positive(name, getattr(self, name))


@dataclass(frozen=True)
class ParameterChoice:
    N_min: int
    N: int
    mu_low: float
    mu_high: float
    binding: str
    bounds: dict

    @property
    def mu_range(self) -> tuple[float, float]:
        return (self.mu_low, self.mu_high)

    @property
    def empty(self) -> bool:
        return not self.mu_low < self.mu_high

    @property
    def mu(self) -> float:
        """Largest admissible value: the fastest synchronisation the guard allows."""
        return self.mu_high


def minimal_resolution(G: float, sigma1: float, beta: float, calib: Calibration = Calibration()) -> int:
    """Smallest integer ``N >= 1`` with ``beta^2 N^2 > (c0/c1) (sigma1 + G) G^2``."""
    threshold = (calib.c0 / calib.c1) * (sigma1 + G) * G**2 / beta**2
    N = max(1, int(math.isqrt(int(threshold))))
    while N * N <= threshold:
        N += 1
    while N > 1 and (N - 1) ** 2 > threshold:
        N -= 1
    return N


def select_parameters(G: float, sigma1: float, beta: float, nu: float,
                      calib: Calibration = Calibration(), *, N=None, gamma0: float = 1.0,
                      max_cutoff: int | None = None, strict: bool = True) -> ParameterChoice:
    """Resolution and nudging-strength window for a target contraction ``beta``.

    The admissible interval is ``(c0 (sigma1+G) G^2 nu / beta^2, c1 nu N^2]``,
    further limited below by the synchronisation requirement
    ``beta^2 mu / nu >= 2 C1 C0^2 ((sigma1+G)^(1/2) + (2 C1/c0_lower)^(1/2) gamma0)^2 G``
    and above by the nudging guard ``c_tilde nu N^2``.  ``N`` defaults to
    ``N_min``.  ``binding`` names the lower bound that is active.
    """
    G = check_positive("G", G, allow_zero=True)
    sigma1 = check_positive("sigma1", sigma1, allow_zero=True)
    beta = check_fraction("beta", beta)
    nu = check_positive("nu", nu)
    gamma0 = check_positive("gamma0", gamma0, allow_zero=True)
    N_min = minimal_resolution(G, sigma1, beta, calib)
    if max_cutoff is not None and N_min > max_cutoff:
        raise ValueError(f"resolution condition needs N >= {N_min} but the grid only resolves "
                         f"|n| <= {max_cutoff}; increase the grid resolution M")
    N = N_min if N is None else _as_cutoff(N)
    if N < N_min:
        raise GuardViolation("resolution_bound",
                             f"N={N} is below N_min={N_min} from beta^2 N^2 > (c0/c1)(sigma1+G) G^2")
    contraction_low = calib.c0 * (sigma1 + G) * G**2 * nu / beta**2
    sync_low = (nu / beta**2) * 2 * calib.C1 * calib.C0**2 * (
        math.sqrt(sigma1 + G) + math.sqrt(2 * calib.C1 / calib.c0_lower) * gamma0) ** 2 * G
    upper = min(calib.c1, calib.c_tilde) * nu * N**2
    bounds = {
        "contraction_bound": contraction_low,
        "synchronisation_bound": sync_low,
        "upper_bound": calib.c1 * nu * N**2,
        "nudging_guard": calib.c_tilde * nu * N**2,
    }
    binding = "contraction_bound" if contraction_low >= sync_low else "synchronisation_bound"
    low = max(contraction_low, sync_low)
    choice = ParameterChoice(N_min=N_min, N=N, mu_low=low, mu_high=upper, binding=binding, bounds=bounds)
    if choice.empty and strict:
        raise GuardViolation(
            binding,
            f"admissible mu interval ({low:.6g}, {upper:.6g}] is empty at G={G:.6g}, sigma1={sigma1:.6g}, "
            f"N={N}; the {binding} exceeds min(c1, c_tilde) nu N^2",
        )
    return choice


class Relaxation(float):
    """A relaxation period that also carries how it was obtained.

    ``status`` is ``ok``, ``clamped`` (log argument <= 1), ``capped`` (hit
    ``rho_max``), ``degenerate`` (previous error zero but state error not)
    or ``converged`` (both zero).
    """

    def __new__(cls, rho: float, status: str = "ok"):
        obj = super().__new__(cls, rho)
        obj.status = status
        return obj

    @property
    def rho(self) -> float:
        return float(self)


def relaxation_period(mu: float, nu: float, w_init_h1: float, g_prev_sup: float, C1: float = 1.0,
                      rho_max: float = math.inf) -> Relaxation:
    """``max(0, ln[(mu / (C1 nu)) (nu w_init / g_prev)^2] / mu)``."""
    mu = check_positive("mu", mu)
    nu = check_positive("nu", nu)
    w = check_positive("w_init_h1", w_init_h1, allow_zero=True)
    g = check_positive("g_prev_sup", g_prev_sup, allow_zero=True)
    if g == 0:
        if w > 0:
            logger.warning("previous model error is zero: relaxation period set to rho_max=%g", rho_max)
            return Relaxation(rho_max, "degenerate")
        return Relaxation(0.0, "converged")
    if w == 0:
        return Relaxation(0.0, "clamped")
    arg = (mu / (C1 * nu)) * (nu * w / g) ** 2
    rho = math.log(arg) / mu
    if rho <= 0:
        return Relaxation(0.0, "clamped")
    if rho > rho_max:
        return Relaxation(rho_max, "capped")
    return Relaxation(rho, "ok")


def steady_relaxation(beta: float, mu: float) -> float:
    """``-ln(beta) / mu``: the time for the nudging to damp low modes by ``beta``."""
    return -math.log(check_fraction("beta", beta)) / check_positive("mu", mu)


# -- configuration and records -----------------------------------------------------------


V_INIT_POLICIES = ("observation", "zero", "custom")
F0_POLICIES = ("zero", "low_mode_readout", "custom")


@dataclass(frozen=True)
class StageConfig:
    """Tuning of the staged reconstruction.

    ``dt`` is the integrator step; it must divide the observation interval
    (default: a tenth of it).  ``eval_window`` defaults to ``5 / mu``.
    ``rho`` fixes the relaxation period instead of computing it; ``rho_floor``
    is a lower bound on computed periods (``"steady"`` means ``-ln(beta)/mu``).
    ``floor_factor`` marks a contraction ratio as meaningless when the error
    it divides by is within that factor of the differentiation noise floor.
    """

    mu: float
    N: int
    beta: float = 0.5
    C1: float = 1.0
    v_init_policy: str = "observation"
    f0_policy: str = "zero"
    v_init: SpectralField | None = None
    f0: ForcingSpec | None = None
    dt: float | None = None
    eval_window: float | None = None
    rho: float | None = None
    rho_floor: float | str | None = "steady"
    rho_max: float = math.inf
    oracle_derivative: bool = False
    guard_constant: float = 1.0
    floor_factor: float = 10.0
    grashof: float | None = None

    def __post_init__(self):
        check_positive("mu", self.mu)
        object.__setattr__(self, "N", _as_cutoff(self.N))
        check_fraction("beta", self.beta)
        check_positive("C1", self.C1)
        if self.v_init_policy not in V_INIT_POLICIES:
            raise ValueError(f"v_init_policy must be one of {V_INIT_POLICIES}")
        if self.f0_policy not in F0_POLICIES:
            raise ValueError(f"f0_policy must be one of {F0_POLICIES}")
        if self.v_init_policy == "custom" and self.v_init is None:
            raise ValueError("custom v_init_policy needs v_init")
        if self.f0_policy == "custom" and self.f0 is None:
            raise ValueError("custom f0_policy needs f0")
        if self.rho is not None:
            check_positive("rho", self.rho, allow_zero=True)

    def relaxation_floor(self) -> float:
        if self.rho_floor is None:
            return 0.0
        if self.rho_floor == "steady":
            return steady_relaxation(self.beta, self.mu)
        return check_positive("rho_floor", self.rho_floor, allow_zero=True)

    def window_length(self) -> float:
        return 5.0 / self.mu if self.eval_window is None else self.eval_window

    def integrator(self, series: ObservationSeries) -> IntegratorConfig:
        dt = series.sample_interval / 10.0 if self.dt is None else self.dt
        stride = int(round(series.sample_interval / dt))
        if stride < 1 or abs(stride * dt - series.sample_interval) > 1e-9 * series.sample_interval:
            raise ValueError(f"dt={dt} does not divide the observation interval {series.sample_interval}")
        if not series.nu > 0:
            raise ValueError("the observation series carries no viscosity")
        return IntegratorConfig(dt=series.sample_interval / stride, nu=series.nu,
                                guard_constant=self.guard_constant)


@dataclass
class TwinData:
    """Truth states on the observation clock and the true force (diagnostics only)."""

    truth: Sequence[FlowState]
    force: ForcingSpec

    def check(self, series: ObservationSeries) -> None:
        if len(self.truth) != len(series):
            raise ValueError(f"twin truth has {len(self.truth)} states but the series {len(series)} frames")
        for k in (0, len(series) - 1):
            if abs(self.truth[k].time - series.time(k)) > 1e-9 * max(1.0, abs(series.time(k))):
                raise ValueError("twin truth is not aligned with the observation clock")
            if self.truth[k].grid != series.grid:
                raise ValueError("twin truth grid does not match the series grid")


@dataclass
class StageRecord:
    n: int
    t_begin: float
    rho_n: float
    t_eval: float
    f_n: ForcingSpec
    relaxation_status: str = "ok"
    w_init_h1: float = float("nan")
    g_prev_sup: float = float("nan")
    sync_error_h1: float | None = None
    model_error_l2: float | None = None
    model_error_relative: float | None = None
    reynolds_residual: float | None = None
    reynolds_relative: float | None = None
    noise_floor: float | None = None
    eval_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def force_at_eval(self) -> SpectralField:
        return self.f_n.at(self.t_eval)


@dataclass
class RecoveryTrace:
    mode: str
    parameters: StageConfig
    gamma0: float | None = None
    initial_error: float | None = None
    initial_floor: float | None = None
    f0: ForcingSpec | None = None
    stages: list = field(default_factory=list)

    @property
    def errors(self) -> list:
        return [s.model_error_l2 for s in self.stages]

    @property
    def measured_ratios(self) -> list:
        """``err_n / err_{n-1}`` with ``err_0`` the error of the initial guess."""
        out = []
        prev = self.initial_error
        for s in self.stages:
            if prev is None or s.model_error_l2 is None:
                out.append(None)
            else:
                out.append(s.model_error_l2 / prev if prev > 0 else math.inf)
            prev = s.model_error_l2
        return out

    @property
    def ratio_flags(self) -> list:
        """``ok`` or ``floor`` (ratio of noise-floor errors, meaningless) per stage."""
        kappa = self.parameters.floor_factor
        out = []
        prev_err = self.initial_error
        for s in self.stages:
            floor = s.noise_floor
            if prev_err is None or floor is None:
                out.append("unknown")
            elif prev_err <= kappa * floor:
                out.append("floor")
            else:
                out.append("ok")
            prev_err = s.model_error_l2
        return out

    def contracted(self, beta: float | None = None) -> bool:
        """Whether every meaningful (not noise-floor) ratio is at most ``beta``."""
        beta = self.parameters.beta if beta is None else beta
        return all(r <= beta for r, fl in zip(self.measured_ratios, self.ratio_flags) if fl == "ok")

    @property
    def final_force(self) -> ForcingSpec:
        return self.stages[-1].f_n if self.stages else self.f0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage", "t_begin", "rho_n", "sync_h1", "model_err_l2", "ratio", "reynolds_residual"])
            for s, r in zip(self.stages, self.measured_ratios):
                w.writerow([s.n, _fmt(s.t_begin), _fmt(s.rho_n), _fmt(s.sync_error_h1),
                            _fmt(s.model_error_l2), _fmt(r), _fmt(s.reynolds_residual)])

    def write_force_snapshots(self, directory, nu: float = 0.0) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for s in self.stages:
            p = d / f"force_stage_{s.n:02d}.snp"
            p.write_bytes(write_snapshot(s.force_at_eval(), time=s.t_eval, nu=nu,
                                         N_obs=self.parameters.N))
            paths.append(p)
        return paths

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "gamma0": self.gamma0,
            "initial_error": self.initial_error,
            "initial_floor": self.initial_floor,
            "beta": self.parameters.beta,
            "mu": self.parameters.mu,
            "N": self.parameters.N,
            "contracted": self.contracted(),
            "stages": [
                {
                    "n": s.n, "t_begin": s.t_begin, "rho_n": s.rho_n, "t_eval": s.t_eval,
                    "relaxation_status": s.relaxation_status, "w_init_h1": s.w_init_h1,
                    "g_prev_sup": s.g_prev_sup, "sync_h1": s.sync_error_h1,
                    "model_err_l2": s.model_error_l2, "model_err_relative": s.model_error_relative,
                    "reynolds_residual": s.reynolds_residual, "noise_floor": s.noise_floor,
                    "ratio": r, "ratio_flag": fl,
                }
                for s, r, fl in zip(self.stages, self.measured_ratios, self.ratio_flags)
            ],
        }


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


# -- readouts and diagnostics ---------------------------------------------------


def _derivative(series: ObservationSeries, j: int, sc: StageConfig, twin: TwinData | None) -> np.ndarray:
    if sc.oracle_derivative:
        if twin is None:
            raise ValueError("oracle derivative requires twin data")
        return oracle_time_derivative(twin.truth[j], twin.force, series.nu, series.N).coeffs
    return observed_time_derivative(series, j).coeffs


def _readout(series: ObservationSeries, j: int, deriv: np.ndarray, high: np.ndarray | None) -> np.ndarray:
    """``d/dt P_N u + nu A P_N u + P_N B(u_n, u_n)`` with ``u_n = P_N u + high``."""
    grid = series.grid
    p = series.frame(j).coeffs
    u = p if high is None else p + high
    b, _ = self_advection_coeffs(grid, u)
    return deriv + series.nu * grid.k2 * p + b * grid.ball_mask(series.N)


def initial_force_readout(obs: ObservationSeries, nu: float | None = None, N=None, *,
                          twin: TwinData | None = None, oracle: bool = False) -> ForcingSpec:
    """``f_0 = d/dt P_N u + nu A P_N u + P_N B(P_N u, P_N u)`` on every interior frame."""
    check_series(obs)
    if nu is not None and abs(nu - obs.nu) > 1e-15 * max(1.0, nu):
        obs = replace_nu(obs, nu)
    if N is not None and _as_cutoff(N) != obs.N:
        raise ValueError(f"readout cutoff {N} does not match the series cutoff {obs.N}")
    sc = _ReadoutConfig(oracle)
    js = range(1, len(obs) - 1)
    frames = [_readout(obs, j, _derivative(obs, j, sc, twin), None) for j in js]
    return ForcingSpec.sampled([obs.time(j) for j in js], frames, obs.grid, band_limit=obs.N)


@dataclass(frozen=True)
class _ReadoutConfig:
    oracle_derivative: bool


def replace_nu(series: ObservationSeries, nu: float) -> ObservationSeries:
    return ObservationSeries(N=series.N, sample_interval=series.sample_interval, t_start=series.t_start,
                             grid=series.grid, nu=nu, frames=list(series.frames))


def reynolds_stress(u: SpectralField, N) -> SpectralField:
    """``P_N B(u, u) - P_N B(P_N u, P_N u)`` from a full velocity field."""
    grid = u.grid
    ball = grid.ball_mask(_as_cutoff(N))
    full, _ = self_advection_coeffs(grid, u.coeffs)
    low, _ = self_advection_coeffs(grid, u.coeffs * ball)
    return SpectralField(grid, (full - low) * ball, copy=False)


def reynolds_residual(u_truth: FlowState, v_n: FlowState, f_n_minus_f: SpectralField, N) -> float:
    """``||R_n - g_n||`` with ``R_n = P_N[B(Qw, Qw) + B(u, Qw) + B(Qw, u)]``, ``w = v_n - u``.

    ``Qw`` is the unobserved part of the synchronisation error; the bilinear
    terms are evaluated in advective form independently of the readout.
    """
    if u_truth.grid != v_n.grid or f_n_minus_f.grid != v_n.grid:
        raise ValueError("grid mismatch between truth, nudged state and force error")
    N = _as_cutoff(N)
    grid = v_n.grid
    ball = grid.ball_mask(N)
    if np.any(f_n_minus_f.coeffs * ~ball != 0):
        raise ValueError(f"force error has energy outside |n| <= {N}")
    qw = (v_n.velocity.coeffs - u_truth.velocity.coeffs) * ~ball
    u = u_truth.velocity.coeffs
    R = (advection_coeffs(grid, qw, qw) + advection_coeffs(grid, u, qw) + advection_coeffs(grid, qw, u)) * ball
    return sobolev_norm(SpectralField(grid, R - f_n_minus_f.coeffs, copy=False))


def model_error(f_n: ForcingSpec, f_true: ForcingSpec, window: Sequence[float], grid=None) -> tuple[float, float]:
    """``sup_window ||f_n - f||`` and its ratio to ``sup_window ||f||``."""
    window = list(window)
    if not window:
        raise ValueError("empty evaluation window")
    grid = grid or f_n.grid or f_true.grid
    err = max(sobolev_norm(f_n.at(t, grid) - f_true.at(t, grid)) for t in window)
    scale = max(sobolev_norm(f_true.at(t, grid)) for t in window)
    if scale == 0:
        raise ValueError("relative model error is undefined for a zero true force")
    return float(err), float(err / scale)


def _truth_readout_error(series: ObservationSeries, j: int, sc, twin: TwinData) -> float:
    """Error of the readout fed with the full truth: differentiation noise only."""
    grid = series.grid
    u = twin.truth[j].velocity.coeffs
    high = u * ~grid.ball_mask(series.N)
    fj = _readout(series, j, _derivative(series, j, sc, twin), high)
    return sobolev_norm(SpectralField(grid, fj - twin.force.at(series.time(j), grid).coeffs, copy=False))


# -- the nudged run ----------------------------------------------------------


def _advance(series: ObservationSeries, h: ForcingSpec, v0: SpectralField, j0: int, j1: int,
             sc: StageConfig, cfg: IntegratorConfig, visit) -> FlowState:
    """Nudge from frame ``j0`` to ``j1``; ``visit(j, state)`` sees every frame."""
    grid = series.grid
    stride = int(round(series.sample_interval / cfg.dt))
    state = FlowState(v0, series.time(j0))
    visit(j0, state)
    for j in range(j0, j1):
        fa, fb = series.frame(j), series.frame(j + 1)
        a, b = fa.coeffs, fb.coeffs
        tj = series.time(j)
        for s in range(stride):
            o0 = fa if s == 0 else SpectralField(grid, a + (s / stride) * (b - a), copy=False)
            o1 = fb if s + 1 == stride else SpectralField(grid, a + ((s + 1) / stride) * (b - a), copy=False)
            state = nudged_step(FlowState(state.velocity, tj + s * cfg.dt), o0, h, sc.mu, sc.N, cfg,
                                obs_end=o1)
        state = FlowState(state.velocity, series.time(j + 1))
        visit(j + 1, state)
    return state


def _initial_state(series: ObservationSeries, j: int, sc: StageConfig) -> SpectralField:
    if sc.v_init_policy == "observation":
        return series.frame(j)
    if sc.v_init_policy == "zero":
        return SpectralField.zeros(series.grid)
    if sc.v_init.grid != series.grid:
        raise ValueError("custom v_init grid does not match the series grid")
    return sc.v_init


def _frames_for(duration: float, series: ObservationSeries) -> int:
    k = duration / series.sample_interval
    return max(0, int(math.ceil(k - 1e-9)))


def _w_init_estimate(series: ObservationSeries, j: int, v0: SpectralField, sc: StageConfig,
                     twin: TwinData | None, grashof_est: float) -> float:
    grid = series.grid
    if twin is not None:
        return sobolev_norm(v0 - twin.truth[j].velocity, 1)
    ball = grid.ball_mask(series.N)
    low = SpectralField(grid, (v0.coeffs - series.frame(j).coeffs) * ball, copy=False)
    high = SpectralField(grid, v0.coeffs * ~ball, copy=False)
    # unobserved truth modes bounded by the enstrophy radius
    return sobolev_norm(low, 1) + sobolev_norm(high, 1) + series.nu * grashof_est


def run_stage(f_prev: ForcingSpec, obs: ObservationSeries, cfg: StageConfig, t_begin: float, *,
              n: int = 1, mode: str = "asymptotic", g_prev_sup: float | None = None,
              twin: TwinData | None = None, elapsed: float = 0.0,
              horizon: float | None = None, grashof_est: float | None = None) -> StageRecord:
    """One stage: nudge from ``t_begin``, relax for ``rho_n``, read out ``f_n``.

    ``mode="asymptotic"`` returns ``f_n`` sampled on every frame from
    ``t_eval`` to ``horizon`` (default: the last interior frame); the other
    modes return the single field ``f_n(t_eval)``.  In recycle mode every
    stage restarts at ``t_begin``; ``elapsed`` is the relaxation time used by
    the earlier stages, and the record must extend past
    ``t_begin + elapsed + rho_n``.  ``g_prev_sup`` is the size of
    the previous model error used for the relaxation period (measured in twin
    runs, estimated otherwise).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    check_series(obs)
    if _as_cutoff(cfg.N) != obs.N:
        raise ValueError(f"stage cutoff N={cfg.N} does not match the series cutoff {obs.N}")
    if f_prev.band_limit is not None and f_prev.band_limit > obs.N:
        raise ValueError("previous force is not band-limited to the observed modes")
    icfg = cfg.integrator(obs)
    if cfg.mu > cfg.guard_constant * obs.nu * obs.N**2 * (1 + 1e-12):
        raise GuardViolation("nudging_guard", f"mu={cfg.mu:.6g} exceeds c_tilde*nu*N^2="
                             f"{cfg.guard_constant * obs.nu * obs.N**2:.6g}")
    if twin is not None:
        twin.check(obs)
    grid = obs.grid
    last = len(obs) - 2
    j_run = obs.index_of(t_begin)
    if not 1 <= j_run <= last:
        raise WindowDeficitError("stage start is not an interior sample", (obs.t_start, obs.t_end),
                                 obs.time(j_run))
    v0 = _initial_state(obs, j_run, cfg)
    if grashof_est is None:
        grashof_est = cfg.grashof if cfg.grashof is not None else 0.0
    w_init = _w_init_estimate(obs, j_run, v0, cfg, twin, grashof_est)
    if g_prev_sup is None:
        g_prev_sup = 0.0
    if cfg.rho is not None:
        rho = Relaxation(cfg.rho, "fixed")
    else:
        rho = relaxation_period(cfg.mu, obs.nu, w_init, g_prev_sup, cfg.C1, cfg.rho_max)
        floor = cfg.relaxation_floor()
        if not math.isfinite(rho):
            # nothing left to damp and no cap: the floor is as good as any period
            rho = Relaxation(floor, rho.status)
        elif rho < floor and rho.status != "converged":
            rho = Relaxation(floor, "floored")
    k_rho = _frames_for(float(rho), obs)
    rho_q = k_rho * obs.sample_interval
    j_eval = j_run + k_rho
    t_eval = obs.time(j_eval)
    window_len = cfg.window_length()
    k_win = _frames_for(window_len, obs)
    if mode == "recycle":
        needed = obs.time(j_run) + elapsed + rho_q
        if needed > obs.time(last) + 1e-9 * obs.sample_interval:
            raise WindowDeficitError(f"recycle window too short for stage {n}",
                                     (obs.t_start, obs.t_end), needed)
    if j_eval > last:
        raise WindowDeficitError(f"stage {n} relaxation runs past the observation record",
                                 (obs.t_start, obs.t_end), obs.time(j_eval))
    if mode == "asymptotic":
        j_stop = last if horizon is None else obs.index_of(horizon)
        if j_eval + k_win > j_stop:
            raise WindowDeficitError(f"stage {n} evaluation window runs past the observation record",
                                     (obs.t_start, obs.t_end), obs.time(j_eval + k_win))
    else:
        j_stop = j_eval

    ball = grid.ball_mask(obs.N)
    readouts: dict[int, np.ndarray] = {}
    diag: dict = {"sync": None, "res": [], "res_rel": []}

    def visit(j: int, state: FlowState) -> None:
        if j < j_eval:
            return
        high = state.velocity.coeffs * ~ball
        fj = _readout(obs, j, _derivative(obs, j, cfg, twin), high)
        readouts[j] = fj
        if twin is not None and j <= j_eval + k_win:
            u = twin.truth[j]
            if j == j_eval:
                diag["sync"] = sobolev_norm(state.velocity - u.velocity, 1)
            g = SpectralField(grid, fj - twin.force.at(obs.time(j), grid).coeffs, copy=False)
            r = reynolds_residual(u, state, g, obs.N)
            diag["res"].append(r)
            gn = sobolev_norm(g)
            diag["res_rel"].append(r / gn if gn > 0 else 0.0)

    _advance(obs, f_prev, v0, j_run, j_stop, cfg, icfg, visit)

    if mode == "asymptotic":
        js = sorted(readouts)
        f_n = ForcingSpec.sampled([obs.time(j) for j in js], [readouts[j] for j in js], grid, band_limit=obs.N)
        eval_js = list(range(j_eval, j_eval + k_win + 1))
    else:
        f_n = ForcingSpec.static(SpectralField(grid, readouts[j_eval], copy=False), band_limit=obs.N)
        eval_js = [j_eval]
    rec = StageRecord(n=n, t_begin=obs.time(j_run), rho_n=rho_q, t_eval=t_eval, f_n=f_n,
                      relaxation_status=rho.status, w_init_h1=w_init, g_prev_sup=g_prev_sup,
                      eval_times=np.array([obs.time(j) for j in eval_js]))
    if twin is not None:
        rec.sync_error_h1 = diag["sync"]
        err, rel = model_error(f_n, twin.force, rec.eval_times, grid)
        rec.model_error_l2, rec.model_error_relative = err, rel
        rec.reynolds_residual = max(diag["res"])
        rec.reynolds_relative = max(diag["res_rel"])
        rec.noise_floor = max(_truth_readout_error(obs, j, cfg, twin) for j in eval_js)
    return rec


def _initial_force(obs: ObservationSeries, sc: StageConfig, twin: TwinData | None, mode: str,
                   j0: int) -> ForcingSpec:
    if sc.f0_policy == "zero":
        return ForcingSpec.zero()
    if sc.f0_policy == "custom":
        f0 = sc.f0
        if f0.band_limit is None or f0.band_limit > obs.N:
            for t in (obs.time(j0),):
                if np.any(f0.at(t, obs.grid).coeffs * ~obs.grid.ball_mask(obs.N) != 0):
                    raise ValueError("custom f0 has energy outside the observed modes")
        return f0
    f0 = initial_force_readout(obs, twin=twin, oracle=sc.oracle_derivative)
    if mode == "asymptotic":
        return f0
    return ForcingSpec.static(f0.at(obs.time(j0), obs.grid), band_limit=obs.N)


def _sup_norm(f: ForcingSpec, times, grid) -> float:
    return max(sobolev_norm(f.at(t, grid)) for t in times)


def run_recovery(obs: ObservationSeries, true_f: ForcingSpec | None = None, cfg: StageConfig | None = None,
                 mode: str = "asymptotic", n_stages: int = 5, *, truth: Sequence[FlowState] | None = None,
                 t0: float | None = None) -> RecoveryTrace:
    """Run ``n_stages`` stages and record errors and contraction ratios.

    Twin mode needs both ``true_f`` and the ``truth`` states on the
    observation clock.  ``t0`` (default: the second frame, the first point
    where the observed derivative exists) starts the first stage, and in
    recycle mode every stage.
    """
    if cfg is None:
        raise ValueError("a StageConfig is required")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if (true_f is None) != (truth is None):
        raise ValueError("twin mode needs both the true force and the truth trajectory")
    if n_stages < 1:
        raise ValueError("n_stages must be positive")
    check_series(obs)
    twin = TwinData(truth, true_f) if truth is not None else None
    if twin is not None:
        twin.check(obs)
    if cfg.oracle_derivative and twin is None:
        raise ValueError("oracle derivative is only available in twin mode")
    grid = obs.grid
    j0 = 1 if t0 is None else obs.index_of(t0)
    t0 = obs.time(j0)
    trace = RecoveryTrace(mode=mode, parameters=cfg)

    f_prev = _initial_force(obs, cfg, twin, mode, j0)
    trace.f0 = f_prev
    k_win = _frames_for(cfg.window_length(), obs)
    win0 = [obs.time(j) for j in range(j0, min(j0 + k_win, len(obs) - 2) + 1)]
    readout0 = initial_force_readout(obs, twin=twin, oracle=cfg.oracle_derivative)
    grashof_est = cfg.grashof
    if grashof_est is None:
        grashof_est = _sup_norm(readout0, win0, grid) / obs.nu**2
    if twin is not None:
        if mode != "asymptotic":
            win0 = [t0]
        err0, gamma0 = model_error(f_prev, true_f, win0, grid)
        trace.initial_error, trace.gamma0 = err0, gamma0
        trace.initial_floor = max(_truth_readout_error(obs, obs.index_of(t), cfg, twin) for t in win0)
        g_prev = err0
    else:
        g_prev = _sup_norm(_difference(f_prev, readout0, grid), win0, grid)

    t_begin, elapsed = t0, 0.0
    for n in range(1, n_stages + 1):
        try:
            rec = run_stage(f_prev, obs, cfg, t_begin, n=n, mode=mode, g_prev_sup=g_prev, twin=twin,
                            elapsed=elapsed, grashof_est=grashof_est)
        except WindowDeficitError as exc:
            exc.trace = trace
            raise
        except Exception as exc:
            raise StageFailure(n, exc, trace) from exc
        trace.stages.append(rec)
        logger.info("stage %d: t_eval=%.4g rho=%.4g err=%s", n, rec.t_eval, rec.rho_n, rec.model_error_l2)
        if twin is not None:
            g_prev = rec.model_error_l2
        else:
            # no truth: the last increment stands in for the model error
            g_prev = _sup_norm(_difference(rec.f_n, f_prev, grid), rec.eval_times, grid)
        f_prev = rec.f_n
        if mode == "recycle":
            elapsed += rec.rho_n
        else:
            t_begin = rec.t_eval
    return trace


def _difference(a: ForcingSpec, b: ForcingSpec, grid) -> ForcingSpec:
    return ForcingSpec.time_dependent(lambda t: a.at(t, grid) - b.at(t, grid), grid)
