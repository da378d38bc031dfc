"""Recovery of an unknown force in 2D periodic Navier-Stokes flow from low-mode observations."""

from .dynamics import (
    AprioriReport,
    BlowUpError,
    CFLWarning,
    FlowState,
    ForcingSpec,
    GuardViolation,
    IntegratorConfig,
    absorbing_radii,
    balance_report,
    grashof,
    integrate,
    nse_step,
    nudged_step,
    shape_factor,
)
from .estimator import NudgingForceRecovery
from .observations import (
    ObservationFrame,
    ObservationSeries,
    SnapshotError,
    SnapshotHeader,
    load_series,
    observed_time_derivative,
    oracle_time_derivative,
    read_snapshot,
    record_observations,
    sample_observation,
    save_series,
    write_snapshot,
)
from .recovery import (
    Calibration,
    ParameterChoice,
    RecoveryTrace,
    StageConfig,
    StageFailure,
    StageRecord,
    TwinData,
    WindowDeficitError,
    initial_force_readout,
    model_error,
    relaxation_period,
    reynolds_residual,
    reynolds_stress,
    run_recovery,
    run_stage,
    select_parameters,
)
from .spectral import (
    SpectralField,
    SpectralGrid,
    WavenumberBall,
    bilinear,
    high_pass,
    inner_product,
    leray_project,
    low_pass,
    sobolev_norm,
    stokes_pow,
)

__version__ = "0.1.0"
