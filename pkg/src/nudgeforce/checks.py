"""Self-checks run by ``nudgeforce verify``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import FlowState, ForcingSpec, IntegratorConfig, balance_report, integrate
from .observations import ObservationSeries, observed_time_derivative, read_snapshot, write_snapshot
from .spectral import (
    SpectralField,
    SpectralGrid,
    advection_coeffs,
    high_pass,
    inner_product,
    leray_project,
    low_pass,
    random_field,
    single_mode,
    sobolev_norm,
    stokes_pow,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    value: float | None = None


def _bilinear(u: SpectralField, v: SpectralField) -> SpectralField:
    return SpectralField(u.grid, advection_coeffs(u.grid, u.coeffs, v.coeffs), copy=False)


def sign_flipped_bilinear(u: SpectralField, v: SpectralField) -> SpectralField:
    """Mutation fixture: ``u1 dx v - u2 dy v``, a sign error in the advection term."""
    g = u.grid
    flipped = u.coeffs.copy()
    flipped[1] *= -1
    return SpectralField(g, advection_coeffs(g, flipped, v.coeffs), copy=False)


def check_projectors(M: int = 32, N: int = 6, seed: int = 0) -> CheckResult:
    g = SpectralGrid(M)
    u = random_field(g, seed)
    raw = SpectralField(g, np.random.default_rng(seed).standard_normal(g.shape) * g.dealias_mask)
    defects = [
        (low_pass(low_pass(u, N), N) - low_pass(u, N)).max_abs(),
        (low_pass(u, N) + high_pass(u, N) - u).max_abs(),
        (leray_project(leray_project(raw)) - leray_project(raw)).max_abs(),
        leray_project(raw).divergence_defect(),
        (stokes_pow(stokes_pow(u, 1.0), -1.0) - u).max_abs(),
    ]
    worst = max(defects) / max(u.max_abs(), 1e-300)
    return CheckResult("projector_algebra", worst <= 1e-13, f"worst relative defect {worst:.2e}", worst)


def check_orthogonality(bilinear: Callable = _bilinear, M: int = 32, pairs: int = 20, seed: int = 0,
                        tol: float = 1e-12) -> CheckResult:
    g = SpectralGrid(M)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        u = random_field(g, rng, slope=float(rng.uniform(0, 2)))
        v = random_field(g, rng, slope=float(rng.uniform(0, 2)))
        b = inner_product(bilinear(u, v), v)
        worst = max(worst, abs(b) / (sobolev_norm(u) * sobolev_norm(v) * sobolev_norm(v, 1)))
    return CheckResult("bilinear_orthogonality", worst <= tol, f"max |<B(u,v),v>| / scale = {worst:.2e}", worst)


def check_mutation_detected(M: int = 32, seed: int = 0) -> CheckResult:
    r = check_orthogonality(sign_flipped_bilinear, M=M, pairs=5, seed=seed)
    return CheckResult("mutation_detected", not r.passed,
                       f"sign-flipped advection gives {r.value:.2e} (must fail)", r.value)


def check_balance(M: int = 32, nu: float = 0.05, dt: float = 1e-3, steps: int = 200, seed: int = 0) -> CheckResult:
    g = SpectralGrid(M)
    f = ForcingSpec.static(random_field(g, seed + 1, cutoff=4, l2_norm=0.1))
    u0 = FlowState(random_field(g, seed, slope=1.5, l2_norm=0.5))
    traj = integrate(u0, f, IntegratorConfig(dt=dt, nu=nu), steps, sample_every=1)
    rep = balance_report(traj, f, nu, rtol=1e-5)
    worst = float(np.max(rep.balance_residual) / max(np.max(0.5 * rep.energy**2), 1e-300))
    return CheckResult("energy_balance", not rep.balance_violations,
                       f"max per-step residual / energy = {worst:.2e}", worst)


def check_serialization(M: int = 16, N: int = 4, seed: int = 0) -> CheckResult:
    g = SpectralGrid(M)
    u = random_field(g, seed)
    ok = True
    for fld, n_obs in ((u, 0), (low_pass(u, N), N)):
        back, meta = read_snapshot(write_snapshot(fld, time=0.5, nu=0.1, N_obs=n_obs))
        ok &= back.bitwise_equal(fld) and meta["time"] == 0.5 and meta["nu"] == 0.1
    return CheckResult("serialization_roundtrip", bool(ok), "full and compact snapshots bitwise identical")


def _fit_order(hs, errs) -> float:
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0])


def check_fd_order(M: int = 16) -> CheckResult:
    g = SpectralGrid(M)
    phi = single_mode(g, (1, 2), 1.0)
    errs, hs = [], []
    for h in (0.1, 0.05, 0.025):
        t = np.arange(3) * h + 0.3
        s = ObservationSeries(N=3, sample_interval=h, t_start=t[0], grid=g,
                              frames=[phi * math.sin(tk) for tk in t])
        d = observed_time_derivative(s, 1)
        errs.append(sobolev_norm(d - phi * math.cos(t[1])))
        hs.append(h)
    order = _fit_order(hs, errs)
    return CheckResult("fd_order", 1.8 <= order <= 2.2, f"observed-derivative order {order:.3f}", order)


def check_dt_order(M: int = 32, nu: float = 0.05, T: float = 0.5, seed: int = 0) -> CheckResult:
    g = SpectralGrid(M)
    f = ForcingSpec.static(random_field(g, seed + 1, cutoff=4, l2_norm=0.5))
    u0 = FlowState(random_field(g, seed, slope=1.0, l2_norm=1.0))

    def run(dt):
        return integrate(u0, f, IntegratorConfig(dt=dt, nu=nu), int(round(T / dt)))[-1].velocity

    ref = run(T / 400)
    dts = [T / 25, T / 50, T / 100]
    errs = [sobolev_norm(run(dt) - ref) for dt in dts]
    order = _fit_order(dts, errs)
    return CheckResult("dt_order", 1.8 <= order <= 2.2, f"time-step order {order:.3f}", order)


def run_all(bilinear: Callable = _bilinear) -> list[CheckResult]:
    return [
        check_projectors(),
        check_orthogonality(bilinear),
        check_mutation_detected(),
        check_balance(),
        check_serialization(),
        check_fd_order(),
        check_dt_order(),
    ]
