"""Command-line front end: ``simulate``, ``recover``, ``verify`` and ``sweep``.

Exit codes: 0 success, 1 failed check or no contraction, 2 configuration
error, 3 numerical blow-up.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checks import run_all, sign_flipped_bilinear
from .config import PRESETS, ConfigError, ExperimentConfig, preset
from .dynamics import BlowUpError, FlowState, ForcingSpec, GuardViolation, grashof, integrate, shape_factor
from .observations import (
    ObservationSeries,
    export_norms_csv,
    load_series,
    read_snapshot,
    record_observations,
    save_series,
    write_snapshot,
)
from .recovery import StageConfig, StageFailure, WindowDeficitError, run_recovery, select_parameters
from .spectral import sobolev_norm

logger = logging.getLogger("nudgeforce")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_BLOWUP = 0, 1, 2, 3


# -- simulate -----------------------------------------------------------------


def burn_in(state: FlowState, f: ForcingSpec, cfg: ExperimentConfig) -> tuple[FlowState, dict]:
    """Advance until ``||A^(1/2) u|| <= sqrt(2) nu G`` holds on ``burn_in_samples`` consecutive samples."""
    icfg = cfg.integrator()
    G = grashof(f, cfg.nu)
    bound = np.sqrt(2.0) * cfg.nu * G
    info = {"enabled": cfg.burn_in, "bound_h1": bound, "met": not cfg.burn_in, "time": 0.0}
    if not cfg.burn_in:
        return state, info
    max_steps = int(round(cfg.burn_in_max / cfg.dt))
    streak, steps = 0, 0
    while steps < max_steps and streak < cfg.burn_in_samples:
        n = min(cfg.burn_in_stride, max_steps - steps)
        state = integrate(state, f, icfg, n)[-1]
        steps += n
        streak = streak + 1 if sobolev_norm(state.velocity, 1) <= bound * (1 + 1e-12) else 0
    info["met"] = streak >= cfg.burn_in_samples
    info["time"] = steps * cfg.dt
    if not info["met"]:
        logger.warning("burn-in envelope not met after t=%g", steps * cfg.dt)
    return FlowState(state.velocity, 0.0), info


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    f = cfg.build_force()
    state = cfg.build_initial_state()
    state, info = burn_in(state, f, cfg)
    n_frames = int(round(cfg.obs_duration / (cfg.dt * cfg.obs_stride))) + 1
    series, truth = record_observations(state, f, cfg.integrator(), cfg.N_obs, n_frames, cfg.obs_stride)
    save_series(series, out / "observations")
    export_norms_csv(series.frames, series.times, out / "observations" / "norms.csv")
    tdir = out / "truth"
    tdir.mkdir(exist_ok=True)
    for k, s in enumerate(truth):
        (tdir / f"state_{k:06d}.snp").write_bytes(write_snapshot(s.velocity, time=s.time, nu=cfg.nu))
    export_norms_csv([s.velocity for s in truth], [s.time for s in truth], out / "truth_norms.csv")
    grid = cfg.grid
    (out / "force.snp").write_bytes(write_snapshot(f.at(0.0, grid), time=0.0, nu=cfg.nu))
    summary = {"burn_in": info, "frames": n_frames, "grashof": grashof(f, cfg.nu)}
    (out / "simulate_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"simulate: {n_frames} frames written to {out / 'observations'} (burn-in met: {info['met']})")
    return EXIT_OK


# -- recover ----------------------------------------------------------------


def _load_twin(out: Path, series: ObservationSeries):
    tdir, fpath = out / "truth", out / "force.snp"
    if not tdir.is_dir() or not fpath.exists():
        return None, None
    truth = []
    for k in range(len(series)):
        fld, meta = read_snapshot((tdir / f"state_{k:06d}.snp").read_bytes())
        truth.append(FlowState(fld, meta["time"]))
    force, _ = read_snapshot(fpath.read_bytes())
    return truth, ForcingSpec.static(force)


def stage_config(cfg: ExperimentConfig, series: ObservationSeries, f_true: ForcingSpec | None) -> tuple[StageConfig, dict]:
    """Resolve ``mu`` (from the selector when unset) and build the stage configuration."""
    info = {}
    mu = cfg.mu
    if mu is None:
        if f_true is None:
            raise ConfigError("mu must be given when the true force is unknown")
        G = grashof(f_true, cfg.nu)
        sigma = shape_factor(f_true) if G > 0 else 1.0
        choice = select_parameters(G, sigma, cfg.beta, cfg.nu, cfg.calibration(), N=cfg.N_obs,
                                   max_cutoff=cfg.grid.dealias_cutoff)
        mu = choice.mu
        info = {"N_min": choice.N_min, "mu_range": list(choice.mu_range), "binding": choice.binding,
                "bounds": choice.bounds, "grashof": G, "shape_factor": sigma}
    guard = cfg.c_tilde * cfg.nu * cfg.N_obs**2
    if mu > guard * (1 + 1e-12):
        raise GuardViolation("nudging_guard", f"mu={mu:.6g} exceeds c_tilde*nu*N^2={guard:.6g}")
    sc = StageConfig(mu=mu, N=cfg.N_obs, beta=cfg.beta, C1=cfg.C1, v_init_policy=cfg.v_init_policy,
                     f0_policy=cfg.f0_policy, dt=cfg.dt, eval_window=cfg.eval_window,
                     oracle_derivative=cfg.oracle_derivative, guard_constant=cfg.c_tilde,
                     floor_factor=cfg.floor_factor)
    info["mu"] = mu
    return sc, info


def cmd_recover(cfg: ExperimentConfig, out: Path, obs_dir: Path | None = None) -> int:
    obs_dir = obs_dir or out / "observations"
    try:
        series = load_series(obs_dir)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    if series.N != cfg.N_obs or series.grid.M != cfg.M:
        raise ConfigError("observation manifest does not match the config (N_obs or M)")
    truth, f_true = _load_twin(obs_dir.parent, series)
    if cfg.oracle_derivative and truth is None:
        raise ConfigError("--oracle-derivative needs a twin experiment (truth and force files)")
    sc, info = stage_config(cfg, series, f_true)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    try:
        trace = run_recovery(series, f_true, sc, cfg.mode, cfg.n_stages, truth=truth)
    except (WindowDeficitError, StageFailure) as exc:
        if exc.trace is not None and exc.trace.stages:
            exc.trace.to_csv(out / "trace.csv")
        raise
    trace.to_csv(out / "trace.csv")
    trace.write_force_snapshots(out / "forces", nu=cfg.nu)
    summary = {"parameters": info, **trace.summary()}
    (out / "recovery_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for s, r, fl in zip(trace.stages, trace.measured_ratios, trace.ratio_flags):
        ratio = "n/a" if r is None else f"{r:.3e}"
        err = "n/a" if s.model_error_l2 is None else f"{s.model_error_l2:.3e}"
        print(f"stage {s.n}: t_eval={s.t_eval:.4g} rho={s.rho_n:.4g} err={err} ratio={ratio} [{fl}]")
    ok = trace.contracted()
    print(f"recover: contraction {'met' if ok else 'NOT met'} (beta={cfg.beta}, mu={sc.mu:.6g})")
    return EXIT_OK if ok else EXIT_FAIL


# -- verify -------------------------------------------------------------------


def cmd_verify(out: Path | None, mutate: bool = False) -> int:
    results = run_all(sign_flipped_bilinear) if mutate else run_all()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        rows = [{"name": r.name, "passed": r.passed, "detail": r.detail, "value": r.value} for r in results]
        (out / "verify_report.json").write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# -- sweep ----------------------------------------------------------------------


RECOVERY_ONLY = {"mu", "beta", "mode", "n_stages", "f0_policy", "v_init_policy", "eval_window",
                 "oracle_derivative", "floor_factor", "c0", "c1", "C0", "C1", "c0_lower", "c_tilde"}


def _coerce(cfg: ExperimentConfig, name: str, text: str):
    current = getattr(cfg, name)
    if isinstance(current, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, str):
        return text
    return float(text)


def cmd_sweep(cfg: ExperimentConfig, out: Path, param: str, values: list[str]) -> int:
    if not hasattr(cfg, param):
        raise ConfigError(f"unknown sweep parameter {param!r}")
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    shared = out / "shared"
    if param in RECOVERY_ONLY:
        cmd_simulate(cfg, shared)
    rows, worst = [], EXIT_OK
    for text in values:
        point = replace(cfg, **{param: _coerce(cfg, param, text)})
        point.validate()
        pdir = out / f"{param}={text}"
        if param in RECOVERY_ONLY:
            code = cmd_recover(point, pdir, shared / "observations")
        else:
            cmd_simulate(point, pdir)
            code = cmd_recover(point, pdir)
        summary = json.loads((pdir / "recovery_summary.json").read_text())
        errs = [s["model_err_l2"] for s in summary["stages"]]
        ratios = [s["ratio"] for s in summary["stages"] if s["ratio_flag"] == "ok"]
        rows.append([text, _num(errs[-1] if errs else None), _num(max(ratios) if ratios else None),
                     summary["contracted"]])
        worst = max(worst, code)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([param, "final_model_err_l2", "max_ratio", "contracted"])
        w.writerows(rows)
    return worst


def _num(x) -> str:
    return "" if x is None else repr(float(x))


# -- entry point ------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nudgeforce", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, stages=True):
        sp.add_argument("--config", help="JSON config file or preset name (%s)" % ", ".join(sorted(PRESETS)))
        sp.add_argument("--out", help="output directory (overrides the config)")
        if stages:
            sp.add_argument("--mode", choices=["asymptotic", "time_independent", "recycle"])
            sp.add_argument("--stages", type=int)
            sp.add_argument("--oracle-derivative", action="store_true", default=None,
                            help="exact derivative from the truth (twin mode only)")

    common(sub.add_parser("simulate", help="run the truth and record observations"), stages=False)
    rp = sub.add_parser("recover", help="reconstruct the force from recorded observations")
    common(rp)
    rp.add_argument("--obs", help="observation directory (default: <out>/observations)")
    vp = sub.add_parser("verify", help="run the numerical self-checks")
    vp.add_argument("--out")
    vp.add_argument("--config", help="accepted for symmetry; the checks use fixed settings")
    vp.add_argument("--mutate", action="store_true", help="inject a sign error into the advection term")
    sp = sub.add_parser("sweep", help="repeat simulate/recover over values of one parameter")
    common(sp)
    sp.add_argument("--param", required=True)
    sp.add_argument("--values", required=True, help="comma-separated values")
    return p


def _resolve_config(args) -> ExperimentConfig:
    src = getattr(args, "config", None)
    if src is None:
        cfg = ExperimentConfig()
    elif src in PRESETS and not Path(src).exists():
        cfg = preset(src)
    else:
        cfg = ExperimentConfig.load(src)
    overrides = {}
    if getattr(args, "out", None):
        overrides["out"] = args.out
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if getattr(args, "stages", None):
        overrides["n_stages"] = args.stages
    if getattr(args, "oracle_derivative", None):
        overrides["oracle_derivative"] = True
    if overrides:
        cfg = replace(cfg, **overrides)
        cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            return cmd_verify(Path(args.out) if args.out else None, mutate=args.mutate)
        cfg = _resolve_config(args)
        out = Path(cfg.out)
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "recover":
            return cmd_recover(cfg, out, Path(args.obs) if args.obs else None)
        return cmd_sweep(cfg, out, args.param, [v for v in args.values.split(",") if v])
    except BlowUpError as exc:
        print(f"error: numerical blow-up: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except GuardViolation as exc:
        print(f"error: parameter guard {exc.condition} violated: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, WindowDeficitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        cause = exc.__cause__
        if isinstance(cause, BlowUpError):
            print(f"error: numerical blow-up in stage {exc.stage}: {cause}", file=sys.stderr)
            return EXIT_BLOWUP
        if isinstance(cause, GuardViolation):
            print(f"error: parameter guard {cause.condition} violated: {cause}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
