"""Closed-form quantities of the radial flux-limited chemotaxis model.

The accumulated density U(xi, t) is the mass inside the ball of radius
xi**(1/N), divided by the measure of the unit sphere. All profiles in this
module are expressed either as radial densities u(r) or as U(xi).
"""
import math
from dataclasses import dataclass, field
from typing import Self

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import integrate, optimize


class InvalidDimensionError(ValueError):
    """Raised when the space dimension is not an integer N >= 2."""


class LevelOutOfRangeError(ValueError):
    """Raised when a boundary level is outside the open interval (0, A)."""


class RegimeError(ValueError):
    """Raised when a quantity is requested outside the mass regime it is defined in."""


def _check_dimension(N: int) -> int:
    if isinstance(N, bool) or not isinstance(N, (int, np.integer)) or N < 2:
        raise InvalidDimensionError(f"Dimension N must be an integer >= 2, got {N!r}")
    return int(N)


def omega(N: int) -> float:
    """Measure of the unit sphere S^(N-1) in R^N.

    Uses the recurrence omega_(N+2) = 2*pi*omega_N / N starting from
    omega_1 = 2 and omega_2 = 2*pi, which equals 2*pi**(N/2) / Gamma(N/2).
    """
    N = _check_dimension(N)
    value, k = (2.0 * math.pi, 2) if N % 2 == 0 else (2.0, 1)
    while k < N:
        value *= 2.0 * math.pi / k
        k += 2
    return value


def amplitude_A(N: int) -> float:
    """Asymptotic level A = (N**2 / (N - 1))**(N - 1) of the steady profiles."""
    N = _check_dimension(N)
    return (N * N / (N - 1)) ** (N - 1)


def critical_mass(N: int) -> float:
    """Critical mass m_c = omega_N * A separating blow-up from global existence."""
    return omega(N) * amplitude_A(N)


@dataclass(frozen=True)
class ModelParams:
    """Dimension and total mass of a radial solution, with derived constants."""

    N: int
    m: float
    omega_N: float = field(init=False)
    A: float = field(init=False)
    m_c: float = field(init=False)

    def __post_init__(self):
        N = _check_dimension(self.N)
        if not math.isfinite(self.m) or self.m <= 0:
            raise ValueError(f"Total mass m must be positive and finite, got {self.m!r}")
        object.__setattr__(self, "N", N)
        object.__setattr__(self, "m", float(self.m))
        object.__setattr__(self, "omega_N", omega(N))
        object.__setattr__(self, "A", amplitude_A(N))
        object.__setattr__(self, "m_c", self.omega_N * self.A)

    @classmethod
    def from_mass_ratio(cls, N: int, ratio: float) -> Self:
        """Build parameters for the mass ratio * m_c."""
        return cls(N=N, m=ratio * critical_mass(N))

    @classmethod
    def from_level(cls, N: int, level: float) -> Self:
        """Build parameters whose boundary level m / omega_N equals ``level``."""
        return cls(N=N, m=level * omega(N))

    @property
    def boundary_level(self) -> float:
        """Dirichlet value U(1, t) = m / omega_N."""
        return self.m / self.omega_N

    @property
    def mass_ratio(self) -> float:
        return self.m / self.m_c

    def is_critical(self, rtol: float = 1e-9) -> bool:
        return abs(self.m - self.m_c) <= rtol * self.m_c

    @property
    def regime(self) -> str:
        """One of ``subcritical``, ``critical`` or ``supercritical``."""
        if self.is_critical():
            return "critical"
        return "subcritical" if self.m < self.m_c else "supercritical"


@dataclass(frozen=True, eq=False)
class RadialProfile:
    """Samples of a radial function r -> f(r) on increasing radii in [0, 1]."""

    r: NDArray[np.float64]
    values: NDArray[np.float64]

    def __post_init__(self):
        r = np.array(self.r, dtype=float)
        values = np.array(self.values, dtype=float)
        if r.ndim != 1 or r.shape != values.shape:
            raise ValueError("Radii and values must be 1-D arrays of the same length")
        if r.size < 2 or np.any(np.diff(r) <= 0) or r[0] < 0 or r[-1] > 1:
            raise ValueError("Radii must be strictly increasing within [0, 1]")
        r.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "values", values)

    def __repr__(self) -> str:
        return f"<RadialProfile(points={self.r.size}, max={self.values.max():.6g})>"


def w0(xi: ArrayLike, N: int) -> NDArray[np.float64] | float:
    """Steady accumulated density W_0(xi) = A xi (1 + xi**(1/(N-1)))**(1-N).

    Evaluated as A (s / (1 + s))**(N-1) with s = xi**(1/(N-1)), which is the
    same function and stays accurate for very large xi.
    """
    A = amplitude_A(N)
    xi_arr = np.asarray(xi, dtype=float)
    if np.any(xi_arr < 0):
        raise ValueError("w0 is defined for xi >= 0 only")
    s = xi_arr ** (1.0 / (N - 1))
    with np.errstate(invalid="ignore"):
        value = A * (s / (1.0 + s)) ** (N - 1)
    value = np.where(np.isinf(s), A, value)
    return float(value) if np.ndim(value) == 0 else value


def w0_prime(xi: ArrayLike, N: int) -> NDArray[np.float64] | float:
    """Derivative A (1 + xi**(1/(N-1)))**(-N) of the steady profile."""
    A = amplitude_A(N)
    xi_arr = np.asarray(xi, dtype=float)
    if np.any(xi_arr < 0):
        raise ValueError("w0_prime is defined for xi >= 0 only")
    value = A * (1.0 + xi_arr ** (1.0 / (N - 1))) ** (-N)
    return float(value) if np.ndim(value) == 0 else value


def _check_lambda(lam: float):
    if not lam > 0 or not math.isfinite(lam):
        raise ValueError(f"Dilation parameter lambda must be positive, got {lam!r}")


def w_lambda(xi: ArrayLike, lam: float, N: int) -> NDArray[np.float64] | float:
    """Dilated steady profile W_lambda(xi) = W_0(lambda**N * xi)."""
    _check_lambda(lam)
    return w0(lam**N * np.asarray(xi, dtype=float), N)


def x_lambda(r: ArrayLike, lam: float, N: int) -> NDArray[np.float64] | float:
    """Steady radial density whose accumulated density is W_lambda."""
    _check_lambda(lam)
    N = _check_dimension(N)
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise ValueError("x_lambda is defined for r >= 0 only")
    scale = N ** (2 * N - 1) / (N - 1) ** (N - 1)
    value = scale * lam**N / (1.0 + (lam * r_arr) ** (N / (N - 1))) ** N
    return float(value) if np.ndim(value) == 0 else value


def lambda_from_level(ell: float, N: int) -> float:
    """Dilation lambda of the steady profile with W_0(lambda**N) = ell.

    The map lambda -> W_0(lambda**N) is strictly increasing from 0 to A, so a
    bracket is grown geometrically around lambda = 1 and then bisected.

    Raises:
        LevelOutOfRangeError: If ell is not in (0, A); no steady state exists
            there.
    """
    A = amplitude_A(N)
    if not 0 < ell < A:
        raise LevelOutOfRangeError(f"Steady level ell must lie in (0, {A:g}), got {ell!r}")

    def residual(lam: float) -> float:
        return w0(lam**N, N) - ell

    lo, hi = 1.0, 1.0
    for _ in range(2000):
        if residual(lo) <= 0:
            break
        lo /= 2.0
    for _ in range(2000):
        if residual(hi) >= 0:
            break
        hi *= 2.0
    if residual(lo) > 0 or residual(hi) < 0:
        raise LevelOutOfRangeError(
            f"Steady level ell={ell!r} is too close to A={A:g} to be resolved"
        )
    if residual(lo) == 0:
        return lo
    if residual(hi) == 0:
        return hi
    return optimize.bisect(residual, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=400)


@dataclass(frozen=True)
class SteadyProfile:
    """Stationary solution identified by its boundary level ell and dilation lambda."""

    ell: float
    lam: float
    N: int

    @classmethod
    def from_level(cls, ell: float, N: int) -> Self:
        return cls(ell=float(ell), lam=lambda_from_level(ell, N), N=_check_dimension(N))

    @classmethod
    def from_params(cls, params: ModelParams) -> Self:
        """Steady state with the same mass as ``params`` (subcritical masses only)."""
        if params.regime != "subcritical":
            raise RegimeError(
                f"No steady state exists for m={params.m:g} >= m_c={params.m_c:g}"
            )
        return cls.from_level(params.boundary_level, params.N)

    def evaluate(self, xi: ArrayLike) -> NDArray[np.float64] | float:
        """Accumulated density phi_ell(xi) = W_lambda(xi)."""
        return w_lambda(xi, self.lam, self.N)

    def density(self, r: ArrayLike) -> NDArray[np.float64] | float:
        """Radial density X_lambda(r)."""
        return x_lambda(r, self.lam, self.N)


def _nodes(grid) -> NDArray[np.float64]:
    """Node array of a Grid, or the argument itself when it already is one."""
    return np.asarray(getattr(grid, "xi", grid), dtype=float)


def accumulate_density(u0: RadialProfile, N: int, grid) -> NDArray[np.float64]:
    """Accumulated density U_0(xi_i) of a radial density at the grid nodes.

    The integrand u0(r) r**(N-1) is sampled on the radii xi_i**(1/N)
    (linear interpolation of the profile) and integrated by the composite
    trapezoid rule.

    Raises:
        ValueError: If the profile has negative samples.
    """
    N = _check_dimension(N)
    if np.any(u0.values < 0):
        raise ValueError("Density profile has negative samples")
    radii = _nodes(grid) ** (1.0 / N)
    u = np.interp(radii, u0.r, u0.values)
    U = integrate.cumulative_trapezoid(u * radii ** (N - 1), radii, initial=0.0)
    return np.maximum.accumulate(U)


def density_from_U(U: ArrayLike, grid, N: int) -> RadialProfile:
    """Radial density u(r) = N U_xi(r**N) by second-order finite differences.

    Slopes below zero (round-off on flat stretches) are clamped to zero.
    """
    N = _check_dimension(N)
    xi = _nodes(grid)
    slope = np.gradient(np.asarray(U, dtype=float), xi, edge_order=2)
    return RadialProfile(r=xi ** (1.0 / N), values=N * np.maximum(slope, 0.0))


def signal_gradient_from_U(U: ArrayLike, grid, N: int) -> RadialProfile:
    """Signal gradient -v_r(rho) = rho**(1-N) U(rho**N); zero at the origin."""
    N = _check_dimension(N)
    xi = _nodes(grid)
    U = np.asarray(U, dtype=float)
    values = np.zeros_like(U)
    inner = xi > 0
    values[inner] = U[inner] / xi[inner] ** ((N - 1) / N)
    return RadialProfile(r=xi ** (1.0 / N), values=values)


def blow_up_time_bound(m: float, N: int) -> float:
    """Upper bound T* on the blow-up time of a solution with supercritical mass m.

    Raises:
        RegimeError: If m <= m_c, where no finite bound exists.
    """
    m_c = critical_mass(N)
    if not m > m_c:
        raise RegimeError(f"Blow-up time bound needs m > m_c={m_c:g}, got m={m!r}")
    return 1.0 / (2 * N) / ((m / m_c) ** (1.0 / (N - 1)) - 1.0)


def second_moment_from_psi(psi: float, params: ModelParams) -> float:
    """Second moment of the density, m - (2 omega_N / N) psi."""
    return params.m - 2.0 * params.omega_N / params.N * psi
