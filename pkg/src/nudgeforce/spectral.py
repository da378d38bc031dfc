"""Fourier representation of periodic, mean-free vector fields on [0, 2*pi]^2.

Coefficients are stored in the real-FFT half spectrum with shape
``(2, M, M//2 + 1)``: axis 0 is the velocity component (x, y), axis 1 is
``ky`` in FFT order and axis 2 is ``kx = 0 .. M/2``.  The normalisation is
``u_hat(n) = (2 pi)^-2 * integral(u exp(-i n.x))``, so that

    ||u||_{L^2}^2 = (2 pi)^2 * sum_n |u_hat(n)|^2.

Physical arrays have shape ``(2, M, M)`` indexed ``[component, y, x]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi
AREA = TWO_PI**2


@dataclass(frozen=True, eq=False)
class SpectralGrid:
    """Square periodic grid of ``M x M`` points with two-thirds dealiasing."""

    resolution: int
    kappa0: float = field(default=1.0, init=False)
    domain_length: float = field(default=TWO_PI, init=False)

    def __post_init__(self):
        M = self.resolution
        if not isinstance(M, (int, np.integer)) or M <= 0 or M % 2:
            raise ValueError(f"resolution must be a positive even integer, got {M!r}")
        if M < 4:
            raise ValueError("resolution must be at least 4")

    def __eq__(self, other):
        return isinstance(other, SpectralGrid) and other.resolution == self.resolution

    def __hash__(self):
        return hash(("SpectralGrid", self.resolution))

    def __repr__(self):
        return f"SpectralGrid(resolution={self.resolution})"

    @property
    def M(self) -> int:
        return self.resolution

    @property
    def dealias_cutoff(self) -> int:
        # largest K with 3K < M, so products up to 2K never alias into |k| <= K
        return (self.resolution - 1) // 3

    @property
    def shape(self) -> tuple[int, int, int]:
        return (2, self.M, self.M // 2 + 1)

    @cached_property
    def kx(self) -> np.ndarray:
        return np.arange(self.M // 2 + 1, dtype=float)[None, :]

    @cached_property
    def ky(self) -> np.ndarray:
        return np.fft.fftfreq(self.M, d=1.0 / self.M)[:, None]

    @cached_property
    def k2(self) -> np.ndarray:
        """|n|^2 on the half spectrum."""
        return (self.kx**2 + self.ky**2)

    @cached_property
    def kmag(self) -> np.ndarray:
        return np.sqrt(self.k2)

    @cached_property
    def k2_safe(self) -> np.ndarray:
        k2 = self.k2.copy()
        k2[0, 0] = 1.0
        return k2

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Storage mask ``|n|_inf <= K_d`` with the mean mode removed."""
        kd = self.dealias_cutoff
        mask = (np.abs(self.kx) <= kd) & (np.abs(self.ky) <= kd)
        mask = mask.copy()
        mask[0, 0] = False
        return mask

    @cached_property
    def parseval_weight(self) -> np.ndarray:
        """Multiplicity of each half-spectrum column in the full spectrum."""
        w = np.full((1, self.M // 2 + 1), 2.0)
        w[0, 0] = 1.0
        w[0, -1] = 1.0
        return w

    def ball_mask(self, N: float) -> np.ndarray:
        """Euclidean ball ``|n| <= N`` (mean mode excluded)."""
        mask = self.k2 <= float(N) ** 2 + 1e-9
        mask = mask.copy()
        mask[0, 0] = False
        return mask

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical ``(x, y)`` meshgrid, each of shape ``(M, M)`` indexed ``[y, x]``."""
        x = np.arange(self.M) * (TWO_PI / self.M)
        X, Y = np.meshgrid(x, x, indexing="xy")
        return X, Y

    def to_physical(self, coeffs: np.ndarray) -> np.ndarray:
        return sfft.irfft2(coeffs, s=(self.M, self.M), axes=(-2, -1), norm="forward")

    def to_spectral(self, values: np.ndarray) -> np.ndarray:
        return sfft.rfft2(values, axes=(-2, -1), norm="forward")


@dataclass(frozen=True)
class WavenumberBall:
    """Observation cutoff ``|n| <= N`` in the Euclidean norm."""

    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"cutoff must be a positive integer, got {self.N!r}")

    def check_observable(self, grid: SpectralGrid) -> None:
        if self.N > grid.dealias_cutoff:
            raise ValueError(
                f"cutoff N={self.N} exceeds the dealiased band K_d={grid.dealias_cutoff} "
                f"of an M={grid.M} grid; raise the resolution"
            )


def _as_cutoff(N) -> int:
    if isinstance(N, WavenumberBall):
        return N.N
    if int(N) != N or N < 1:
        raise ValueError(f"cutoff must be a positive integer, got {N!r}")
    return int(N)


class SpectralField:
    """Immutable vector field stored as half-spectrum Fourier coefficients.

    The constructor zeroes the mean mode and makes the coefficient array
    read-only; it does not project or truncate.  Use :func:`leray_project`
    and :meth:`dealiased` for that.
    """

    __slots__ = ("grid", "_coeffs")

    def __init__(self, grid: SpectralGrid, coeffs: np.ndarray, *, copy: bool = True):
        coeffs = np.array(coeffs, dtype=np.complex128, copy=copy)
        if coeffs.shape != grid.shape:
            raise ValueError(f"coefficient shape {coeffs.shape} does not match grid {grid.shape}")
        if coeffs[:, 0, 0].any():
            if not coeffs.flags.writeable:
                coeffs = coeffs.copy()
            coeffs[:, 0, 0] = 0.0
        coeffs.setflags(write=False)
        self.grid = grid
        self._coeffs = coeffs

    @property
    def coeffs(self) -> np.ndarray:
        return self._coeffs

    @classmethod
    def zeros(cls, grid: SpectralGrid) -> "SpectralField":
        return cls(grid, np.zeros(grid.shape, dtype=np.complex128), copy=False)

    @classmethod
    def from_physical(cls, grid: SpectralGrid, values: np.ndarray) -> "SpectralField":
        values = np.asarray(values, dtype=float)
        if values.shape != (2, grid.M, grid.M):
            raise ValueError(f"expected physical shape {(2, grid.M, grid.M)}, got {values.shape}")
        return cls(grid, grid.to_spectral(values), copy=False)

    def to_physical(self) -> np.ndarray:
        return self.grid.to_physical(self._coeffs)

    def dealiased(self) -> "SpectralField":
        return SpectralField(self.grid, self._coeffs * self.grid.dealias_mask, copy=False)

    def divergence_defect(self) -> float:
        """max |n . u_hat(n)| / max |n| |u_hat(n)|, zero for solenoidal fields."""
        g = self.grid
        div = g.kx * self._coeffs[0] + g.ky * self._coeffs[1]
        scale = np.max(g.kmag * np.abs(self._coeffs).max(axis=0))
        return float(np.max(np.abs(div)) / scale) if scale > 0 else 0.0

    def max_abs(self) -> float:
        return float(np.max(np.abs(self._coeffs)))

    def _check(self, other: "SpectralField") -> None:
        if not isinstance(other, SpectralField):
            raise TypeError(f"expected SpectralField, got {type(other).__name__}")
        if other.grid != self.grid:
            raise ValueError(f"grid mismatch: {self.grid} vs {other.grid}")

    def __add__(self, other):
        self._check(other)
        return SpectralField(self.grid, self._coeffs + other._coeffs, copy=False)

    def __sub__(self, other):
        self._check(other)
        return SpectralField(self.grid, self._coeffs - other._coeffs, copy=False)

    def __neg__(self):
        return SpectralField(self.grid, -self._coeffs, copy=False)

    def __mul__(self, scalar):
        if not np.isscalar(scalar):
            return NotImplemented
        return SpectralField(self.grid, self._coeffs * scalar, copy=False)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if not np.isscalar(scalar):
            return NotImplemented
        return SpectralField(self.grid, self._coeffs / scalar, copy=False)

    def bitwise_equal(self, other: "SpectralField") -> bool:
        return other.grid == self.grid and np.array_equal(self._coeffs, other._coeffs)

    def __repr__(self):
        return f"SpectralField(M={self.grid.M}, l2={sobolev_norm(self, 0):.6g})"


# -- operators ----------------------------------------------------------------


def leray_project_coeffs(grid: SpectralGrid, c: np.ndarray) -> np.ndarray:
    div = (grid.kx * c[0] + grid.ky * c[1]) / grid.k2_safe
    out = np.empty_like(c)
    out[0] = c[0] - div * grid.kx
    out[1] = c[1] - div * grid.ky
    out[:, 0, 0] = 0.0
    return out


def leray_project(field: SpectralField) -> SpectralField:
    """Remove the gradient part: ``u_hat - (n . u_hat) n / |n|^2``."""
    return SpectralField(field.grid, leray_project_coeffs(field.grid, field.coeffs), copy=False)


def low_pass(field: SpectralField, N) -> SpectralField:
    """Orthogonal projection onto ``|n| <= N``."""
    mask = field.grid.ball_mask(_as_cutoff(N))
    return SpectralField(field.grid, field.coeffs * mask, copy=False)


def high_pass(field: SpectralField, N) -> SpectralField:
    """Complementary projection ``I - P_N``."""
    mask = ~field.grid.ball_mask(_as_cutoff(N))
    return SpectralField(field.grid, field.coeffs * mask, copy=False)


def stokes_pow(field: SpectralField, half_exponent: float) -> SpectralField:
    """Apply ``A^s``: multiply mode ``n`` by ``|n|^(2s)``."""
    s = float(half_exponent)
    if s == 0.0:
        return field
    g = field.grid
    symbol = g.k2_safe ** s
    return SpectralField(g, field.coeffs * symbol, copy=False)


def inner_product(f: SpectralField, g: SpectralField) -> float:
    """Real L^2 pairing over the torus."""
    f._check(g)
    w = f.grid.parseval_weight
    return float(AREA * np.sum(w * (f.coeffs * np.conj(g.coeffs)).real))


def sobolev_norm(field: SpectralField, order: float = 0.0) -> float:
    """``||A^(order/2) u||_{L^2}`` via Parseval."""
    g = field.grid
    power = np.sum(np.abs(field.coeffs) ** 2, axis=0)
    if order != 0:
        power = power * g.k2_safe ** float(order)
    return float(np.sqrt(AREA * np.sum(g.parseval_weight * power)))


def _derivatives(grid: SpectralGrid, c: np.ndarray) -> np.ndarray:
    """Spectral ``(d/dx, d/dy)`` of each component, shape (2, 2, M, M//2+1)."""
    return np.stack([1j * grid.kx * c, 1j * grid.ky * c], axis=1)


def advection_coeffs(grid: SpectralGrid, cu: np.ndarray, cv: np.ndarray) -> np.ndarray:
    """Dealiased, projected coefficients of ``(u . grad) v``."""
    u = grid.to_physical(cu)
    dv = grid.to_physical(_derivatives(grid, cv))  # dv[i, j] = d_j v_i
    prod = u[0] * dv[:, 0] + u[1] * dv[:, 1]
    out = grid.to_spectral(prod) * grid.dealias_mask
    return leray_project_coeffs(grid, out)


def self_advection_coeffs(grid: SpectralGrid, c: np.ndarray) -> tuple[np.ndarray, float]:
    """``B(u, u)`` in divergence form plus ``max |u|`` on the grid.

    Uses the three distinct products ``u1 u1, u1 u2, u2 u2``; this is the
    kernel used by the time steppers.
    """
    u = grid.to_physical(c)
    prods = np.stack([u[0] * u[0], u[0] * u[1], u[1] * u[1]])
    p = grid.to_spectral(prods)
    ikx, iky = 1j * grid.kx, 1j * grid.ky
    out = np.empty_like(c)
    out[0] = ikx * p[0] + iky * p[1]
    out[1] = ikx * p[1] + iky * p[2]
    out *= grid.dealias_mask
    umax = float(np.sqrt(np.max(u[0] ** 2 + u[1] ** 2)))
    return leray_project_coeffs(grid, out), umax


def divergence_form_coeffs(grid: SpectralGrid, cu: np.ndarray, cv: np.ndarray) -> np.ndarray:
    """``P div(u v_i)`` for each component ``i``."""
    u = grid.to_physical(cu)
    v = grid.to_physical(cv)
    out = np.empty_like(cu)
    for i in range(2):
        p = grid.to_spectral(np.stack([u[0] * v[i], u[1] * v[i]]))
        out[i] = 1j * grid.kx * p[0] + 1j * grid.ky * p[1]
    out *= grid.dealias_mask
    return leray_project_coeffs(grid, out)


def bilinear(u: SpectralField, v: SpectralField, form: str = "advective") -> SpectralField:
    """Pseudo-spectral ``B(u, v) = P (u . grad) v`` with two-thirds dealiasing.

    ``form="divergence"`` evaluates ``P div(u v_i)`` instead; the two agree
    for solenoidal ``u``.
    """
    u._check(v)
    g = u.grid
    if form == "advective":
        c = advection_coeffs(g, u.coeffs, v.coeffs)
    elif form == "divergence":
        c = divergence_form_coeffs(g, u.coeffs, v.coeffs)
    else:
        raise ValueError(f"unknown form {form!r}")
    return SpectralField(g, c, copy=False)


# -- constructors ---------------------------------------------------------------


def taylor_green(grid: SpectralGrid, amplitude: float = 1.0) -> SpectralField:
    """``(cos x sin y, -sin x cos y)``, an eigenfunction of ``A`` with ``|n|^2 = 2``."""
    X, Y = grid.coordinates()
    u = np.stack([np.cos(X) * np.sin(Y), -np.sin(X) * np.cos(Y)]) * amplitude
    return SpectralField.from_physical(grid, u)


def single_mode(grid: SpectralGrid, n: tuple[int, int], amplitude: complex, direction=None) -> SpectralField:
    """Real solenoidal field carried by the mode pair ``+-n``.

    ``direction`` defaults to ``n`` rotated by 90 degrees so the mode is
    divergence free; pass an explicit vector to build non-solenoidal test
    fields.
    """
    kx, ky = n
    if direction is None:
        norm = np.hypot(kx, ky)
        direction = (-ky / norm, kx / norm)
    c = np.zeros(grid.shape, dtype=np.complex128)
    if kx < 0 or (kx == 0 and ky < 0):
        kx, ky, amplitude = -kx, -ky, np.conj(amplitude)
    iy = ky % grid.M
    c[0, iy, kx] = amplitude * direction[0]
    c[1, iy, kx] = amplitude * direction[1]
    if kx == 0:
        c[0, (-ky) % grid.M, 0] = np.conj(amplitude) * direction[0]
        c[1, (-ky) % grid.M, 0] = np.conj(amplitude) * direction[1]
    return SpectralField(grid, c, copy=False)


def shell_field(grid: SpectralGrid, k0: float, rng=None, l2_norm: float = 1.0) -> SpectralField:
    """Random solenoidal field supported on the shell ``|n| = k0``."""
    rng = np.random.default_rng(rng)
    g = grid
    mask = np.abs(g.k2 - float(k0) ** 2) < 1e-9
    if not mask.any():
        raise ValueError(f"no lattice modes with |n| = {k0}")
    c = (rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape)) * mask
    c = g.to_spectral(g.to_physical(c))
    f = leray_project(SpectralField(g, c * mask, copy=False))
    return f * (l2_norm / sobolev_norm(f))


def random_field(grid: SpectralGrid, rng=None, *, slope: float = 0.0, cutoff=None,
                 l2_norm: float | None = 1.0, h1_norm: float | None = None) -> SpectralField:
    """Random real solenoidal dealiased field with ``|u_hat(n)| ~ |n|^-slope``.

    ``cutoff`` restricts the support to the ball ``|n| <= cutoff``.  The
    result is scaled to the requested ``l2_norm`` or ``h1_norm`` (the
    latter takes precedence when given).
    """
    rng = np.random.default_rng(rng)
    g = grid
    c = rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape)
    c *= g.k2_safe ** (-0.5 * slope)
    mask = g.dealias_mask
    if cutoff is not None:
        mask = mask & g.ball_mask(_as_cutoff(cutoff))
    c = g.to_spectral(g.to_physical(c * mask)) * mask
    f = leray_project(SpectralField(g, c, copy=False))
    if h1_norm is not None:
        return f * (h1_norm / sobolev_norm(f, 1))
    if l2_norm is not None:
        return f * (l2_norm / sobolev_norm(f))
    return f
