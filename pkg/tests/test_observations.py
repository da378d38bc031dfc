import csv
import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nudgeforce.dynamics import FlowState, ForcingSpec, IntegratorConfig, integrate
from nudgeforce.observations import (
    HEADER_SIZE,
    ObservationSeries,
    SnapshotError,
    SnapshotHeader,
    export_norms_csv,
    load_series,
    observed_time_derivative,
    oracle_time_derivative,
    payload_count,
    read_snapshot,
    record_observations,
    sample_observation,
    save_series,
    write_snapshot,
)
from nudgeforce.spectral import SpectralField, SpectralGrid, high_pass, low_pass, random_field, single_mode, sobolev_norm


class TestSnapshotFormat:
    def test_zero_field_m4_layout(self):
        # kx = 0..2 (3 columns) x ky = -1..2 (4 rows) x 2 components = 24 complex scalars
        data = write_snapshot(SpectralField.zeros(SpectralGrid(4)), time=1.5, nu=0.25)
        assert HEADER_SIZE == 8 + 4 + 4 + 4 + 8 + 8 + 8 == 44
        assert len(data) == 44 + 16 * 24 == 428
        assert data[:8] == b"NSE2DSNP"
        assert struct.unpack("<IIIddQ", data[8:44]) == (1, 4, 0, 1.5, 0.25, 24)
        assert data[44:] == bytes(384)

    def test_raster_order(self):
        # the first serialised mode is (kx, ky) = (0, -M/2+1); components interleave per mode
        g = SpectralGrid(8)
        c = np.zeros(g.shape, dtype=complex)
        c[0, (-3) % 8, 0] = 1 + 2j
        c[1, (-3) % 8, 0] = 3 + 4j
        c[0, 1, 2] = 5 + 6j  # kx=2, ky=1
        data = write_snapshot(SpectralField(g, c))
        vals = np.frombuffer(data[HEADER_SIZE:], dtype="<f8")
        assert vals[:4].tolist() == [1, 2, 3, 4]
        # kx=2 block starts after two columns of 8 modes; ky=1 is the 5th row (-3..4)
        k = (2 * 8 + 4) * 2
        assert vals[2 * k:2 * k + 2].tolist() == [5, 6]

    def test_compact_payload_count(self):
        # modes with kx in 0..2, ky in -2..2 and kx^2+ky^2 <= 4: 5 + 3 + 1 = 9
        assert payload_count(16, 2) == 2 * 9

    @given(st.sampled_from([4, 8, 16, 32]), st.integers(min_value=0, max_value=2**31 - 1),
           st.floats(allow_nan=False, allow_infinity=False), st.floats(min_value=0, max_value=10))
    def test_roundtrip_is_bitwise(self, M, seed, t, nu):
        g = SpectralGrid(M)
        rng = np.random.default_rng(seed)
        u = SpectralField(g, rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape))
        back, meta = read_snapshot(write_snapshot(u, time=t, nu=nu))
        assert back.coeffs.tobytes() == u.coeffs.tobytes()
        assert meta == {"M": M, "N_obs": 0, "time": t, "nu": nu}

    @given(st.integers(min_value=1, max_value=10), st.integers(min_value=0, max_value=2**31 - 1))
    def test_compact_roundtrip_is_bitwise(self, N, seed):
        u = low_pass(random_field(SpectralGrid(32), seed), N)
        back, meta = read_snapshot(write_snapshot(u, N_obs=N))
        assert back.bitwise_equal(u)
        assert meta["N_obs"] == N

    def test_bytes_are_deterministic(self):
        u = random_field(SpectralGrid(16), 7)
        assert write_snapshot(u, time=0.1) == write_snapshot(u, time=0.1)

    def test_compact_rejects_unobserved_energy(self):
        with pytest.raises(SnapshotError):
            write_snapshot(random_field(SpectralGrid(16), 0), N_obs=2)

    def test_corrupt_magic(self):
        data = bytearray(write_snapshot(random_field(SpectralGrid(8), 0)))
        data[0:8] = b"NSE2DSNQ"
        with pytest.raises(SnapshotError, match="magic"):
            read_snapshot(bytes(data))

    def test_version_mismatch(self):
        data = bytearray(write_snapshot(random_field(SpectralGrid(8), 0)))
        data[8:12] = struct.pack("<I", 2)
        with pytest.raises(SnapshotError, match="version"):
            read_snapshot(bytes(data))

    def test_truncated(self):
        data = write_snapshot(random_field(SpectralGrid(8), 0))
        with pytest.raises(SnapshotError, match="truncated"):
            read_snapshot(data[:-1])
        with pytest.raises(SnapshotError, match="truncated"):
            read_snapshot(data[:20])

    def test_payload_count_mismatch(self):
        data = bytearray(write_snapshot(random_field(SpectralGrid(8), 0)))
        data[36:44] = struct.pack("<Q", 3)
        with pytest.raises(SnapshotError, match="payload_count"):
            read_snapshot(bytes(data))

    def test_non_finite(self):
        data = bytearray(write_snapshot(random_field(SpectralGrid(8), 0)))
        data[HEADER_SIZE + 16:HEADER_SIZE + 24] = struct.pack("<d", math.inf)
        with pytest.raises(SnapshotError, match="non-finite"):
            read_snapshot(bytes(data))

    def test_header_pack_unpack(self):
        h = SnapshotHeader(M=16, N_obs=3, time=2.0, nu=0.5, payload_count=payload_count(16, 3))
        assert SnapshotHeader.unpack(h.pack()) == h


class TestSampling:
    def test_band_limited_state_keeps_all_energy(self):
        u = random_field(SpectralGrid(32), 0, cutoff=5)
        fr = sample_observation(FlowState(u, 0.3), 5)
        assert fr.field.bitwise_equal(u) and fr.time == 0.3

    def test_parseval_split(self):
        u = random_field(SpectralGrid(32), 1, slope=1.0)
        fr = sample_observation(FlowState(u), 6)
        total = sobolev_norm(fr.field) ** 2 + sobolev_norm(high_pass(u, 6)) ** 2
        assert total == pytest.approx(sobolev_norm(u) ** 2, rel=1e-14)

    def test_cutoff_beyond_dealias_band(self):
        with pytest.raises(ValueError):
            sample_observation(FlowState(random_field(SpectralGrid(32), 0)), 11)

    def test_steady_state_gives_identical_frames(self):
        g = SpectralGrid(16)
        u = FlowState(SpectralField.zeros(g))
        series, _ = record_observations(u, ForcingSpec.zero(), IntegratorConfig(dt=0.01, nu=0.1), 4, 3, 5)
        assert series.frame(0).bitwise_equal(series.frame(2))


def _series(frames, h, t0=0.0, N=4, grid=None):
    grid = grid or frames[0].grid
    return ObservationSeries(N=N, sample_interval=h, t_start=t0, grid=grid, frames=frames)


class TestSeries:
    def test_rejects_frames_outside_ball(self):
        with pytest.raises(ValueError):
            _series([random_field(SpectralGrid(16), 0)], 0.1)

    def test_rejects_off_clock_frame(self):
        g = SpectralGrid(16)
        s = _series([SpectralField.zeros(g)], 0.1)
        from nudgeforce.observations import ObservationFrame

        with pytest.raises(ValueError):
            s.append(ObservationFrame(0.15, SpectralField.zeros(g), 4))
        with pytest.raises(ValueError):
            s.append(ObservationFrame(0.1, SpectralField.zeros(g), 3))

    def test_index_of(self):
        g = SpectralGrid(16)
        s = _series([SpectralField.zeros(g)] * 4, 0.1, t0=1.0)
        assert s.index_of(1.3) == 3
        with pytest.raises(ValueError):
            s.index_of(1.25)

    def test_save_and_load(self, tmp_path):
        g = SpectralGrid(16)
        frames = [low_pass(random_field(g, k), 4) for k in range(4)]
        s = _series(frames, 0.05, t0=0.5)
        s.nu = 0.2
        save_series(s, tmp_path / "obs")
        manifest = json.loads((tmp_path / "obs" / "manifest.json").read_text())
        assert manifest["N"] == 4 and manifest["frame_count"] == 4 and manifest["M"] == 16
        assert manifest["delta_t_obs"] == 0.05 and manifest["t_start"] == 0.5 and manifest["nu"] == 0.2
        back = load_series(tmp_path / "obs")
        assert all(a.bitwise_equal(b) for a, b in zip(back.frames, frames))
        assert back.sample_interval == 0.05 and back.nu == 0.2

    def test_load_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_series(tmp_path)

    def test_norms_csv(self, tmp_path):
        g = SpectralGrid(16)
        frames = [low_pass(random_field(g, k), 4) for k in range(2)]
        export_norms_csv(frames, [0.0, 0.1], tmp_path / "n.csv")
        rows = list(csv.reader(open(tmp_path / "n.csv")))
        assert rows[0] == ["t", "l2_norm", "h1_norm"]
        assert float(rows[2][2]) == sobolev_norm(frames[1], 1)


class TestDerivative:
    def test_linear_frames_exact(self):
        g = SpectralGrid(16)
        a, b = low_pass(random_field(g, 0), 4), low_pass(random_field(g, 1), 4)
        s = _series([a + b * (0.1 * k) for k in range(5)], 0.1)
        d = observed_time_derivative(s, 2)
        assert np.max(np.abs(d.coeffs - b.coeffs)) <= 1e-13 * b.max_abs()

    def test_constant_series_exactly_zero(self):
        a = low_pass(random_field(SpectralGrid(16), 0), 4)
        s = _series([a] * 3, 0.1)
        assert observed_time_derivative(s, 1).max_abs() == 0

    @given(st.floats(min_value=-3, max_value=3))
    def test_taylor_bound(self, t):
        g = SpectralGrid(16)
        phi = single_mode(g, (1, 1), 1.0)
        h = 1e-2
        s = _series([phi * math.sin(t + (k - 1) * h) for k in range(3)], h, t0=t - h)
        err = sobolev_norm(observed_time_derivative(s, 1) - phi * math.cos(t))
        assert err <= h**2 / 6 * sobolev_norm(phi) * (1 + 1e-6) + 1e-15

    def test_boundary_index(self):
        a = low_pass(random_field(SpectralGrid(16), 0), 4)
        s = _series([a] * 3, 0.1)
        with pytest.raises(IndexError):
            observed_time_derivative(s, 0)
        with pytest.raises(IndexError):
            observed_time_derivative(s, 2)
        with pytest.raises(ValueError):
            observed_time_derivative(_series([a] * 2, 0.1), 1)

    def test_fd_converges_to_oracle_at_second_order(self):
        g = SpectralGrid(32)
        nu, N, dt = 0.05, 6, 2e-3
        f = ForcingSpec.static(random_field(g, 2, cutoff=4, l2_norm=0.5))
        cfg = IntegratorConfig(dt=dt, nu=nu)
        u0 = FlowState(random_field(g, 1, slope=1.5), 0.0)
        errs = []
        for stride in (20, 10):
            series, truth = record_observations(u0, f, cfg, N, 3, stride)
            series.nu = nu
            exact = oracle_time_derivative(truth[1], f, nu, N)
            errs.append(sobolev_norm(observed_time_derivative(series, 1) - exact))
        assert 3.2 <= errs[0] / errs[1] <= 4.8

    def test_oracle_matches_rhs_of_steady_state(self):
        g = SpectralGrid(16)
        us = low_pass(random_field(g, 3), 2)
        cfg = IntegratorConfig(dt=1e-3, nu=0.1)
        from nudgeforce.spectral import self_advection_coeffs

        b, _ = self_advection_coeffs(g, us.coeffs)
        f = ForcingSpec.static(SpectralField(g, 0.1 * g.k2 * us.coeffs + b))
        assert oracle_time_derivative(FlowState(us), f, 0.1, 5).max_abs() <= 1e-15
        later = integrate(FlowState(us), f, cfg, 10)[-1]
        assert sobolev_norm(later.velocity - us) <= 1e-14
