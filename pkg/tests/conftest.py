import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nudgeforce import FlowState, ForcingSpec, IntegratorConfig, integrate, record_observations
from nudgeforce.spectral import SpectralGrid, random_field, shell_field

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class Twin:
    """A recorded twin experiment: force, observation series and truth states."""

    def __init__(self, grid, force, cfg, series, truth):
        self.grid = grid
        self.force = force
        self.cfg = cfg
        self.series = series
        self.truth = truth


def make_twin(M, nu, N, G, k0, dt, burn, T, stride=10, seed=1):
    grid = SpectralGrid(M)
    force = ForcingSpec.static(shell_field(grid, k0, seed, l2_norm=G * nu**2), band_limit=N)
    cfg = IntegratorConfig(dt=dt, nu=nu)
    u = FlowState(random_field(grid, 3, slope=2.0, h1_norm=nu * G))
    if burn:
        u = integrate(u, force, cfg, int(round(burn / dt)))[-1]
    u = FlowState(u.velocity, 0.0)
    n_frames = int(round(T / (dt * stride))) + 1
    series, truth = record_observations(u, force, cfg, N, n_frames, stride)
    return Twin(grid, force, cfg, series, truth)


@pytest.fixture(scope="session")
def turbulent_twin():
    """Forcing at |n| = 4 with G = 200: the unobserved modes carry a real Reynolds stress."""
    return make_twin(M=32, nu=0.02, N=8, G=200.0, k0=4, dt=5e-3, burn=30.0, T=20.0)


@pytest.fixture(scope="session")
def laminar_twin():
    """Small, cheap twin run used by the unit tests of the stage machinery."""
    return make_twin(M=32, nu=0.1, N=10, G=2.0, k0=2, dt=1e-3, burn=2.0, T=1.2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
