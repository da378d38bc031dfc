"""Argument checks shared by the public entry points."""

from __future__ import annotations

import math

import numpy as np

from .spectral import SpectralField, SpectralGrid, high_pass


def check_positive(name: str, value, *, allow_zero: bool = False) -> float:
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise TypeError(f"{name} must be a real number, got {value!r}") from None
    if not math.isfinite(x) or x < 0 or (x == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ValueError(f"{name} must be finite and {bound}, got {value!r}")
    return x


def check_fraction(name: str, value) -> float:
    x = float(value)
    if not 0.0 < x < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value!r}")
    return x


def check_same_grid(*fields: SpectralField) -> SpectralGrid:
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise ValueError(f"grid mismatch: {f.grid} vs {grid}")
    return grid


def check_band_limited(field: SpectralField, N: int, name: str = "field") -> SpectralField:
    if np.any(high_pass(field, N).coeffs != 0):
        raise ValueError(f"{name} has energy outside |n| <= {N}")
    return field


def check_series(series, min_frames: int = 3):
    from .observations import ObservationSeries

    if not isinstance(series, ObservationSeries):
        raise TypeError(f"expected an ObservationSeries, got {type(series).__name__}")
    if len(series) < min_frames:
        raise ValueError(f"series has {len(series)} frames, at least {min_frames} are required")
    return series
