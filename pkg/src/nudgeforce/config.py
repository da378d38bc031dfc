"""Experiment configuration: a flat JSON document and the objects it builds."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .dynamics import FlowState, ForcingSpec, IntegratorConfig
from .observations import read_snapshot
from .recovery import MODES, Calibration, F0_POLICIES, V_INIT_POLICIES
from .spectral import (
    SpectralField,
    SpectralGrid,
    random_field,
    self_advection_coeffs,
    shell_field,
    sobolev_norm,
    taylor_green,
)


class ConfigError(ValueError):
    pass


FORCE_PRESETS = ("single_shell", "two_shell", "manufactured", "taylor_green", "zero", "custom")
INITIAL_CONDITIONS = ("random", "zero", "taylor_green", "steady")


@dataclass
class ExperimentConfig:
    """Every knob of a simulate/recover run.

    ``force_grashof``, when set, fixes the force amplitude through
    ``||f|| = G nu^2`` and overrides ``force_amplitude``.  For the
    ``manufactured`` preset the amplitude is that of the steady state.
    ``mu = None`` asks the parameter selector for the largest admissible value.
    """

    M: int = 64
    nu: float = 0.1
    dt: float = 1e-3
    force: str = "single_shell"
    force_k0: float = 2.0
    force_k1: float = 3.0
    force_amplitude: float = 0.02
    force_grashof: float | None = 2.0
    force_file: str | None = None
    initial_condition: str = "random"
    initial_h1: float | None = None
    burn_in: bool = True
    burn_in_max: float = 20.0
    burn_in_samples: int = 100
    burn_in_stride: int = 10
    N_obs: int = 12
    obs_stride: int = 10
    obs_duration: float = 1.5
    mu: float | None = None
    beta: float = 0.5
    mode: str = "asymptotic"
    n_stages: int = 5
    f0_policy: str = "zero"
    v_init_policy: str = "observation"
    eval_window: float | None = None
    oracle_derivative: bool = False
    floor_factor: float = 10.0
    seed_force: int = 1
    seed_init: int = 2
    out: str = "out"
    c0: float = 1.0
    c1: float = 1.0
    C0: float = 0.25
    C1: float = 1.0
    c0_lower: float = 1.0
    c_tilde: float = 1.0
    c_L: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.M < 8 or self.M % 2:
            raise ConfigError(f"M must be an even integer >= 8, got {self.M}")
        for name in ("nu", "dt", "obs_duration", "beta", "burn_in_max"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be a non-negative number, got {v!r}")
        if self.nu <= 0 or self.dt <= 0:
            raise ConfigError("nu and dt must be positive")
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        if self.force not in FORCE_PRESETS:
            raise ConfigError(f"unknown force preset {self.force!r}; choose from {FORCE_PRESETS}")
        if self.force == "custom" and not self.force_file:
            raise ConfigError("custom force preset needs force_file")
        if self.initial_condition not in INITIAL_CONDITIONS:
            raise ConfigError(f"unknown initial condition {self.initial_condition!r}")
        K_d = (self.M - 1) // 3
        if not 1 <= self.N_obs <= K_d:
            raise ConfigError(f"N_obs={self.N_obs} must lie in [1, K_d={K_d}] (dealiased band of M={self.M})")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.f0_policy not in F0_POLICIES or self.f0_policy == "custom":
            raise ConfigError(f"f0_policy must be 'zero' or 'low_mode_readout', got {self.f0_policy!r}")
        if self.v_init_policy not in V_INIT_POLICIES or self.v_init_policy == "custom":
            raise ConfigError(f"v_init_policy must be 'observation' or 'zero', got {self.v_init_policy!r}")
        for name in ("n_stages", "obs_stride", "burn_in_samples", "burn_in_stride"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.mu is not None and self.mu <= 0:
            raise ConfigError("mu must be positive")
        try:
            self.calibration()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # -- text form --------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_json(text)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    # -- builders ---------------------------------------------------------

    @property
    def grid(self) -> SpectralGrid:
        return SpectralGrid(self.M)

    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(dt=self.dt, nu=self.nu, guard_constant=self.c_tilde)

    def calibration(self) -> Calibration:
        return Calibration(c0=self.c0, c1=self.c1, C0=self.C0, C1=self.C1, c0_lower=self.c0_lower,
                           c_tilde=self.c_tilde, c_L=self.c_L)

    def amplitude(self) -> float:
        if self.force_grashof is not None:
            return self.force_grashof * self.nu**2
        return self.force_amplitude

    def steady_state(self) -> SpectralField:
        """Shell field of the manufactured preset."""
        return shell_field(self.grid, self.force_k0, self.seed_force, l2_norm=self.force_amplitude)

    def build_force(self) -> ForcingSpec:
        grid = self.grid
        amp = self.amplitude()
        if self.force in ("zero", "taylor_green"):
            return ForcingSpec.zero()
        if self.force == "single_shell":
            return ForcingSpec.static(shell_field(grid, self.force_k0, self.seed_force, l2_norm=amp))
        if self.force == "two_shell":
            a = shell_field(grid, self.force_k0, self.seed_force, l2_norm=1.0)
            b = shell_field(grid, self.force_k1, self.seed_force + 1, l2_norm=1.0)
            f = a + b
            return ForcingSpec.static(f * (amp / sobolev_norm(f)))
        if self.force == "manufactured":
            us = self.steady_state()
            b, _ = self_advection_coeffs(grid, us.coeffs)
            return ForcingSpec.static(SpectralField(grid, self.nu * grid.k2 * us.coeffs + b))
        try:
            field, meta = read_snapshot(Path(self.force_file).read_bytes())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load force_file {self.force_file}: {exc}") from None
        if meta["M"] != self.M:
            raise ConfigError(f"force_file resolution {meta['M']} does not match M={self.M}")
        return ForcingSpec.static(field)

    def build_initial_state(self) -> FlowState:
        grid = self.grid
        ic = self.initial_condition
        if self.force == "taylor_green" and ic == "random":
            ic = "taylor_green"
        if ic == "zero":
            return FlowState(SpectralField.zeros(grid), 0.0)
        if ic == "taylor_green":
            return FlowState(taylor_green(grid, self.force_amplitude if self.force == "taylor_green" else 1.0), 0.0)
        if ic == "steady":
            if self.force != "manufactured":
                raise ConfigError("initial_condition 'steady' needs the manufactured preset")
            return FlowState(self.steady_state(), 0.0)
        h1 = self.initial_h1
        if h1 is None:
            G = self.force_grashof if self.force_grashof is not None else self.amplitude() / self.nu**2
            h1 = self.nu * G
        if h1 == 0:
            return FlowState(SpectralField.zeros(grid), 0.0)
        return FlowState(random_field(grid, self.seed_init, slope=2.0, h1_norm=h1), 0.0)


PRESETS = {
    "single_shell": {},
    "two_shell": {"force": "two_shell", "force_k0": 2.0, "force_k1": 3.0},
    "manufactured": {"force": "manufactured", "force_k0": 2.0, "force_amplitude": 0.05,
                     "force_grashof": None, "initial_condition": "steady", "burn_in": False},
    "taylor_green": {"force": "taylor_green", "force_amplitude": 1.0, "force_grashof": None,
                     "initial_condition": "taylor_green", "burn_in": False},
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ExperimentConfig(**{**PRESETS[name], **overrides})
