"""Low-mode observations, snapshot serialisation and observed time derivatives.

Snapshot layout (little endian)::

    magic          8 bytes   b"NSE2DSNP"
    version        uint32    1
    M              uint32    grid resolution
    N_obs          uint32    0 for a full field, else the ball radius
    time           float64
    nu             float64
    payload_count  uint64    number of complex scalars that follow
    payload        payload_count x (float64 real, float64 imag)

The payload walks ``kx = 0 .. M/2`` (outer) and ``ky = -M/2+1 .. M/2``
(inner) and stores both velocity components at each mode.  Observation
frames (``N_obs > 0``) keep only the modes with ``kx <= N``, ``|ky| <= N``
and ``kx^2 + ky^2 <= N^2``, in the same order.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dynamics import FlowState, ForcingSpec, IntegratorConfig, integrate
from .spectral import (
    SpectralField,
    SpectralGrid,
    _as_cutoff,
    high_pass,
    low_pass,
    self_advection_coeffs,
    sobolev_norm,
)

MAGIC = b"NSE2DSNP"
VERSION = 1
_HEADER = struct.Struct("<8sIIIddQ")
HEADER_SIZE = _HEADER.size


class SnapshotError(ValueError):
    pass


@dataclass(frozen=True)
class SnapshotHeader:
    M: int
    N_obs: int
    time: float
    nu: float
    payload_count: int
    magic: bytes = MAGIC
    version: int = VERSION

    def pack(self) -> bytes:
        return _HEADER.pack(self.magic, self.version, self.M, self.N_obs, self.time, self.nu,
                            self.payload_count)

    @classmethod
    def unpack(cls, data: bytes) -> "SnapshotHeader":
        if len(data) < HEADER_SIZE:
            raise SnapshotError(f"truncated header: {len(data)} < {HEADER_SIZE} bytes")
        magic, version, M, N_obs, time, nu, count = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise SnapshotError(f"bad magic {magic!r}")
        if version != VERSION:
            raise SnapshotError(f"unsupported snapshot version {version}")
        return cls(M=M, N_obs=N_obs, time=time, nu=nu, payload_count=count)


def _raster_index(M: int, N_obs: int) -> tuple[np.ndarray, np.ndarray]:
    """Row (ky FFT index) and column (kx) of every serialised mode, in order."""
    kx = np.arange(M // 2 + 1) if N_obs == 0 else np.arange(N_obs + 1)
    ky = np.arange(-M // 2 + 1, M // 2 + 1) if N_obs == 0 else np.arange(-N_obs, N_obs + 1)
    KX, KY = np.meshgrid(kx, ky, indexing="ij")
    KX, KY = KX.ravel(), KY.ravel()
    if N_obs:
        keep = KX**2 + KY**2 <= N_obs**2
        KX, KY = KX[keep], KY[keep]
    return KY % M, KX


def payload_count(M: int, N_obs: int = 0) -> int:
    rows, _ = _raster_index(M, N_obs)
    return 2 * rows.size


def write_snapshot(field: SpectralField, *, time: float = 0.0, nu: float = 0.0, N_obs: int = 0) -> bytes:
    """Serialise ``field``; with ``N_obs > 0`` only the ball ``|n| <= N_obs`` is kept."""
    M = field.grid.M
    if N_obs:
        if N_obs > M // 2:
            raise SnapshotError(f"N_obs={N_obs} exceeds M/2")
        if np.any(high_pass(field, N_obs).coeffs != 0):
            raise SnapshotError(f"field has energy outside |n| <= {N_obs}")
    rows, cols = _raster_index(M, N_obs)
    values = field.coeffs[:, rows, cols].T.reshape(-1)  # per mode: (u_x, u_y)
    header = SnapshotHeader(M=M, N_obs=N_obs, time=float(time), nu=float(nu), payload_count=values.size)
    return header.pack() + values.astype("<c16").tobytes()


def read_snapshot(data: bytes) -> tuple[SpectralField, dict]:
    header = SnapshotHeader.unpack(data)
    M, N_obs = header.M, header.N_obs
    if M < 4 or M % 2:
        raise SnapshotError(f"invalid resolution {M}")
    expected = payload_count(M, N_obs)
    if header.payload_count != expected:
        raise SnapshotError(f"payload_count {header.payload_count} does not match {expected} implied by M/N_obs")
    body = data[HEADER_SIZE:]
    if len(body) != 16 * expected:
        raise SnapshotError(f"truncated payload: {len(body)} bytes, expected {16 * expected}")
    values = np.frombuffer(body, dtype="<c16").astype(np.complex128)
    if not np.isfinite(values).all():
        raise SnapshotError("non-finite coefficient in payload")
    grid = SpectralGrid(M)
    coeffs = np.zeros(grid.shape, dtype=np.complex128)
    rows, cols = _raster_index(M, N_obs)
    coeffs[:, rows, cols] = values.reshape(-1, 2).T
    meta = {"M": M, "N_obs": N_obs, "time": header.time, "nu": header.nu}
    return SpectralField(grid, coeffs, copy=False), meta


# -- observation series -------------------------------------------------------


@dataclass(frozen=True)
class ObservationFrame:
    time: float
    field: SpectralField
    N: int


def sample_observation(state: FlowState, N) -> ObservationFrame:
    """``P_N u(t)`` tagged with ``t``; ``N`` must lie inside the dealiased band."""
    N = _as_cutoff(N)
    if N > state.grid.dealias_cutoff:
        raise ValueError(f"cutoff N={N} exceeds the dealiased band K_d={state.grid.dealias_cutoff}")
    return ObservationFrame(state.time, low_pass(state.velocity, N), N)


@dataclass
class ObservationSeries:
    """Equally spaced low-mode frames ``P_N u(t_start + k dt_obs)``.

    Append-only: frames are immutable once added.
    """

    N: int
    sample_interval: float
    t_start: float
    grid: SpectralGrid
    nu: float = 0.0
    frames: list = field(default_factory=list)

    def __post_init__(self):
        self.N = _as_cutoff(self.N)
        if not self.sample_interval > 0:
            raise ValueError("sample_interval must be positive")
        if self.N > self.grid.dealias_cutoff:
            raise ValueError(f"cutoff N={self.N} exceeds the dealiased band K_d={self.grid.dealias_cutoff}")
        frames, self.frames = list(self.frames), []
        for fr in frames:
            self.append(fr)

    def append(self, frame) -> None:
        if isinstance(frame, ObservationFrame):
            expected = self.time(len(self.frames))
            if abs(frame.time - expected) > 1e-9 * max(1.0, abs(expected)):
                raise ValueError(f"frame time {frame.time} breaks the sampling clock (expected {expected})")
            if frame.N != self.N:
                raise ValueError(f"frame cutoff {frame.N} does not match series cutoff {self.N}")
            frame = frame.field
        if frame.grid != self.grid:
            raise ValueError("frame grid does not match series grid")
        if np.any(high_pass(frame, self.N).coeffs != 0):
            raise ValueError(f"frame has energy outside |n| <= {self.N}")
        self.frames.append(frame)

    def __len__(self) -> int:
        return len(self.frames)

    def time(self, k: int) -> float:
        return self.t_start + k * self.sample_interval

    @property
    def times(self) -> np.ndarray:
        return self.t_start + np.arange(len(self.frames)) * self.sample_interval

    @property
    def t_end(self) -> float:
        return self.time(len(self.frames) - 1)

    def index_of(self, t: float) -> int:
        k = (t - self.t_start) / self.sample_interval
        j = int(round(k))
        if abs(k - j) > 1e-6 or not 0 <= j < len(self.frames):
            raise ValueError(f"t={t} is not a sample time of this series")
        return j

    def frame(self, k: int) -> SpectralField:
        return self.frames[k]


def observed_time_derivative(series: ObservationSeries, k: int) -> SpectralField:
    """Centred difference ``(frame[k+1] - frame[k-1]) / (2 dt_obs)`` at an interior index."""
    if len(series) < 3:
        raise ValueError("at least 3 frames are needed for differentiation")
    if not 1 <= k <= len(series) - 2:
        raise IndexError(f"index {k} is not interior to a series of {len(series)} frames")
    c = (series.frames[k + 1].coeffs - series.frames[k - 1].coeffs) / (2.0 * series.sample_interval)
    return SpectralField(series.grid, c, copy=False)


def oracle_time_derivative(state: FlowState, f: ForcingSpec, nu: float, N) -> SpectralField:
    """Exact ``d/dt P_N u = P_N (f - nu A u - B(u, u))`` from a full truth state."""
    grid = state.grid
    b, _ = self_advection_coeffs(grid, state.velocity.coeffs)
    rhs = -nu * grid.k2 * state.velocity.coeffs - b
    fc = f.coeffs_at(state.time)
    if fc is not None:
        rhs = rhs + fc
    return low_pass(SpectralField(grid, rhs, copy=False), N)


def record_observations(state: FlowState, f: ForcingSpec, cfg: IntegratorConfig, N, n_frames: int,
                        stride: int, keep_truth: bool = True) -> tuple[ObservationSeries, list[FlowState]]:
    """Run the truth and sample ``P_N u`` every ``stride`` steps.

    Returns the series and, when ``keep_truth``, the full truth states at the
    sample times (twin-experiment diagnostics only).
    """
    if n_frames < 1 or stride < 1:
        raise ValueError("n_frames and stride must be positive")
    N = _as_cutoff(N)
    series = ObservationSeries(N=N, sample_interval=stride * cfg.dt, t_start=state.time,
                               grid=state.grid, nu=cfg.nu)
    truth = []
    current = state
    for k in range(n_frames):
        if k:
            current = integrate(current, f, cfg, stride)[-1]
            current = FlowState(current.velocity, state.time + k * stride * cfg.dt)
        series.append(sample_observation(current, N))
        if keep_truth:
            truth.append(current)
    return series, truth


# -- on-disk series -------------------------------------------------------------


MANIFEST = "manifest.json"


def save_series(series: ObservationSeries, directory) -> Path:
    """Write one snapshot per frame plus a JSON manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for k, fr in enumerate(series.frames):
        name = f"frame_{k:06d}.snp"
        (d / name).write_bytes(write_snapshot(fr, time=series.time(k), nu=series.nu, N_obs=series.N))
        names.append(name)
    manifest = {
        "N": series.N,
        "delta_t_obs": series.sample_interval,
        "t_start": series.t_start,
        "frame_count": len(series),
        "nu": series.nu,
        "M": series.grid.M,
        "frames": names,
    }
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return d


def load_series(directory) -> ObservationSeries:
    d = Path(directory)
    path = d / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no observation manifest at {path}")
    m = json.loads(path.read_text())
    grid = SpectralGrid(int(m["M"]))
    series = ObservationSeries(N=int(m["N"]), sample_interval=float(m["delta_t_obs"]),
                               t_start=float(m["t_start"]), grid=grid, nu=float(m["nu"]))
    names = m.get("frames") or [f"frame_{k:06d}.snp" for k in range(int(m["frame_count"]))]
    if len(names) != int(m["frame_count"]):
        raise SnapshotError("manifest frame_count does not match its frame list")
    for k, name in enumerate(names):
        fld, meta = read_snapshot((d / name).read_bytes())
        if meta["M"] != grid.M or meta["N_obs"] != series.N:
            raise SnapshotError(f"{name}: header does not match manifest")
        series.append(fld)
    return series


def export_norms_csv(frames: Sequence[SpectralField], times: Sequence[float], path) -> None:
    """CSV with columns ``t, l2_norm, h1_norm``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "l2_norm", "h1_norm"])
        for t, fr in zip(times, frames):
            w.writerow([repr(float(t)), repr(sobolev_norm(fr, 0)), repr(sobolev_norm(fr, 1))])


def write_bytes_atomic(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
