"""Functionals monitored along trajectories and the checks built on them."""
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray
from scipy import integrate

from fluxlim.discretization import Grid, State
from fluxlim.model import ModelParams, RegimeError, SteadyProfile

if TYPE_CHECKING:
    from fluxlim.integrator import RunRecord

logger = logging.getLogger(__name__)

STATION_XIS = (0.05, 0.1, 0.3)
COMPARISON_RTOL = 1e-10
MOMENT_RTOL = 1e-4


class InconsistentLevelError(ValueError):
    """Raised when a steady profile does not match the boundary level of a state."""


@dataclass(frozen=True)
class DiagnosticsSample:
    """Monitored functionals at one sample time; NaN where a regime leaves them undefined."""

    t: float
    psi: float
    psi_lower: float
    Psi_ell: float
    Psi_c: float
    R_ell_L1: float
    R_c_L1: float
    origin_slope: float
    steady_dist: float
    second_moment: float
    sharp_rate: float


COLUMNS: tuple[str, ...] = tuple(f.name for f in fields(DiagnosticsSample))


@dataclass(frozen=True)
class CheckReport:
    """Outcome of an inequality check over samples or sample intervals.

    ``margins`` holds, per sample or interval, how far the checked quantity
    lies on the wrong side of its bound (positive means violated before
    tolerance).
    """

    name: str
    passed: bool
    margins: tuple[float, ...] = ()
    failed: tuple[int, ...] = ()
    note: str = ""

    @property
    def worst(self) -> float:
        finite = [m for m in self.margins if math.isfinite(m)]
        return max(finite) if finite else 0.0

    def describe(self) -> str:
        status = "pass" if self.passed else "FAIL"
        text = f"{status} (worst margin {self.worst:.3e}, {len(self.failed)} failed of {len(self.margins)})"
        return f"{text}; {self.note}" if self.note else text


def weighted_integral(values: ArrayLike, xi: ArrayLike, N: int) -> float:
    """Integral of xi**(2/N - 1) f(xi) over [0, 1] from nodal values of f.

    Composite trapezoid rule, except on the first cell where the weight is
    integrated exactly against the linear interpolant of f; for N > 2 the
    weight is singular at the origin.
    """
    f = np.asarray(values, dtype=float)
    xi = np.asarray(xi, dtype=float)
    p = 2.0 / N - 1.0
    x1 = xi[1]
    first = x1 ** (p + 1.0) * (f[0] / (p + 1.0) + (f[1] - f[0]) / (p + 2.0))
    rest = integrate.trapezoid(xi[1:] ** p * f[1:], xi[1:])
    return float(first + rest)


def _plain_integral(values: ArrayLike, xi: ArrayLike) -> float:
    return float(integrate.trapezoid(values, xi))


def moment_psi(state: State, grid: Grid, N: int) -> float:
    """Moment functional psi = integral of U xi**(2/N - 1)."""
    return weighted_integral(state.U, grid.xi, N)


def moment_lower_bound(t: float, params: ModelParams) -> float:
    """Guaranteed growth of psi over [0, t]; negative for subcritical masses."""
    N, m = params.N, params.m
    return N * N * m / params.omega_N * ((m / params.m_c) ** (1.0 / (N - 1)) - 1.0) * t


def moment_ceiling(params: ModelParams) -> float:
    """Upper bound N m / (2 omega_N) of psi."""
    return params.N * params.boundary_level / 2.0


def steady_on_nodes(steady: SteadyProfile, grid: Grid) -> NDArray[np.float64]:
    phi = np.asarray(steady.evaluate(grid.xi), dtype=float).copy()
    phi[0] = 0.0
    phi[-1] = steady.ell
    return phi


def _check_level(state: State, steady: SteadyProfile):
    if abs(steady.ell - state.level) > 1e-9 * max(1.0, steady.ell):
        raise InconsistentLevelError(
            f"Steady level ell={steady.ell!r} does not match boundary value U(1)={state.level!r}"
        )


def lyapunov_psi_ell(state: State, steady: SteadyProfile, grid: Grid, N: int) -> float:
    """Weighted L1 distance Psi_ell to the steady profile with the same level.

    Raises:
        InconsistentLevelError: If steady.ell differs from U(1) by more than 1e-9.
    """
    _check_level(state, steady)
    R = state.U - steady_on_nodes(steady, grid)
    return weighted_integral((2.0 - grid.xi) * np.abs(R), grid.xi, N)


def _psi_c(U: NDArray[np.float64], grid: Grid, params: ModelParams) -> float:
    return weighted_integral((2.0 - grid.xi) * (params.A - U), grid.xi, params.N)


def _require_critical(params: ModelParams):
    if not params.is_critical():
        raise RegimeError(
            f"Critical functionals need m = m_c={params.m_c:g}, got m={params.m:g}"
        )


def lyapunov_psi_c(state: State, grid: Grid, params: ModelParams) -> float:
    """Weighted integral Psi_c of A - U for critical-mass states.

    Raises:
        RegimeError: If the mass is not critical.
    """
    _require_critical(params)
    return _psi_c(state.U, grid, params)


def origin_slope(state: State, grid: Grid) -> float:
    """Reconstructed density at the origin, N U(xi_1) / xi_1."""
    return grid.N * float(state.U[1]) / float(grid.xi[1])


def _boundary_slope(U: NDArray[np.float64], xi: NDArray[np.float64]) -> float:
    return float(np.gradient(U[-3:], xi[-3:], edge_order=2)[-1])


class DiagnosticsMonitor:
    """Samples every functional of a trajectory with fixed grid and parameters."""

    def __init__(self, grid: Grid, params: ModelParams):
        self.grid = grid
        self.params = params
        self.regime = params.regime
        self.steady = SteadyProfile.from_params(params) if self.regime == "subcritical" else None
        self.phi = steady_on_nodes(self.steady, grid) if self.steady else None
        self.psi0: float | None = None

    def _sharp_rate(self, U: NDArray[np.float64]) -> float:
        N, xi = self.params.N, self.grid.xi
        power = N / (N - 1.0)
        Up = np.maximum(U, 0.0) ** power
        if self.phi is not None:
            R = np.abs(U - self.phi)
            return (
                -2.0 * N * N * _plain_integral(R, xi)
                + (N - 1.0) * _plain_integral(np.abs(Up - self.phi**power), xi)
            )
        if self.regime == "critical":
            A = self.params.A
            return (
                -N * N * _boundary_slope(U, xi)
                - N * N * A
                + 2.0 * N * N * _plain_integral(U, xi)
                - (N - 1.0) * _plain_integral(Up, xi)
            )
        return math.nan

    def sample(self, state: State) -> DiagnosticsSample:
        params, grid = self.params, self.grid
        U = state.U
        psi = moment_psi(state, grid, params.N)
        if self.psi0 is None:
            self.psi0 = psi
        if self.phi is not None:
            R = U - self.phi
            Psi_ell = lyapunov_psi_ell(state, self.steady, grid, params.N)
            R_ell_L1 = _plain_integral(np.abs(R), grid.xi)
            steady_dist = float(np.max(np.abs(R)))
        else:
            Psi_ell = R_ell_L1 = steady_dist = math.nan
        return DiagnosticsSample(
            t=state.t,
            psi=psi,
            psi_lower=self.psi0 + moment_lower_bound(state.t, params),
            Psi_ell=Psi_ell,
            Psi_c=_psi_c(U, grid, params),
            R_ell_L1=R_ell_L1,
            R_c_L1=_plain_integral(params.A - U, grid.xi),
            origin_slope=origin_slope(state, grid),
            steady_dist=steady_dist,
            second_moment=params.m - 2.0 * params.omega_N / params.N * psi,
            sharp_rate=self._sharp_rate(U),
        )


def samples_to_frame(samples: Iterable[DiagnosticsSample]) -> pd.DataFrame:
    return pd.DataFrame([asdict(s) for s in samples], columns=list(COLUMNS))


def samples_from_frame(frame: pd.DataFrame) -> list[DiagnosticsSample]:
    return [DiagnosticsSample(**row) for row in frame[list(COLUMNS)].to_dict("records")]


def moment_inequality_check(samples: Sequence[DiagnosticsSample], params: ModelParams) -> CheckReport:
    """Moment growth and ceiling along a trajectory.

    For supercritical masses every sample must satisfy
    psi >= psi_lower - 1e-4 N m / (2 omega_N); in every regime psi stays below
    N m / (2 omega_N).
    """
    ceiling = moment_ceiling(params)
    tol = MOMENT_RTOL * ceiling
    growth = params.regime == "supercritical"
    margins, failed = [], []
    for k, s in enumerate(samples):
        margin = s.psi - ceiling
        if growth:
            margin = max(margin, s.psi_lower - tol - s.psi)
        margins.append(margin)
        if margin > 0 or s.psi >= ceiling:
            failed.append(k)
    note = "" if growth else "growth bound only informative for m > m_c"
    return CheckReport("moment_inequality", not failed, tuple(margins), tuple(failed), note)


def _dissipation_series(samples, params: ModelParams, sharp: bool):
    N = params.N
    regime = params.regime
    if regime == "supercritical":
        raise RegimeError("No Lyapunov functional is monitored for supercritical masses")
    if regime == "subcritical":
        values = [s.Psi_ell for s in samples]
        if sharp:
            bounds = [s.sharp_rate for s in samples]
        elif N == 2:
            ell = params.boundary_level
            bounds = [-(8.0 - 2.0 * ell) * s.R_ell_L1 for s in samples]
        else:
            bounds = [(2.0 - N) * N * N / (N - 1.0) * s.R_ell_L1 for s in samples]
        return "Psi_ell", values, bounds, 0.0
    values = [s.Psi_c for s in samples]
    if sharp:
        return "Psi_c", values, [s.sharp_rate for s in samples], 0.0
    if N == 2:
        return "Psi_c", values, [-(s.Psi_c**2) / 4.0 for s in samples], 0.0
    bounds = [-(N - 2.0) * N * N / (N - 1.0) * s.R_c_L1 for s in samples]
    return "Psi_c", values, bounds, 1.0


def dissipation_bound_check(
    samples: Sequence[DiagnosticsSample],
    params: ModelParams,
    sharp: bool = False,
    spatial_error: float = 0.0,
) -> CheckReport:
    """Compare sampled Lyapunov slopes with their dissipation bounds.

    Each interval [t_k, t_k+1] passes when the finite-difference slope is at
    most the bound evaluated at t_k plus
    1e-6 + 10 (|bound_k+1 - bound_k| + spatial_error).

    Args:
        samples: Diagnostics in increasing time order
        params: Model parameters of the trajectory
        sharp: Check against the sharper pre-estimate rate instead
        spatial_error: Estimate of the spatial discretization error

    Returns:
        CheckReport with one margin per interval; intervals where the bound
        does not apply carry a NaN margin.

    Raises:
        ValueError: If fewer than 3 samples are given.
        RegimeError: If the mass is supercritical.
    """
    if len(samples) < 3:
        raise ValueError(f"Dissipation check needs at least 3 samples, got {len(samples)}")
    name, values, bounds, t_start = _dissipation_series(samples, params, sharp)
    margins, failed = [], []
    for k in range(len(samples) - 1):
        if samples[k].t < t_start:
            margins.append(math.nan)
            continue
        dt = samples[k + 1].t - samples[k].t
        slope = (values[k + 1] - values[k]) / dt
        tol = 1e-6 + 10.0 * (abs(bounds[k + 1] - bounds[k]) + spatial_error)
        margin = slope - bounds[k]
        margins.append(margin)
        if not margin <= tol:
            failed.append(k)
    note = f"{name}, bound applied from t >= {t_start:g}" if t_start else name
    if sharp:
        note += " (sharp)"
    return CheckReport("dissipation" + ("_sharp" if sharp else ""), not failed, tuple(margins), tuple(failed), note)


def check_comparison(lower: "RunRecord", upper: "RunRecord", atol: float = 0.0) -> CheckReport:
    """Nodewise ordering lower <= upper at every retained snapshot.

    The tolerance is 1e-10 times the upper boundary level plus ``atol``.

    Raises:
        ValueError: If the trajectories were not sampled on the same nodes
            and times.
    """
    lows, ups = lower.snapshots, upper.snapshots
    if not lows or not ups:
        raise ValueError("Comparison needs trajectories with retained snapshots")
    if len(lows) != len(ups):
        raise ValueError(f"Trajectories have {len(lows)} and {len(ups)} snapshots")
    margins, failed = [], []
    tol = COMPARISON_RTOL * ups[0].level + atol
    for k, (lo, up) in enumerate(zip(lows, ups)):
        if lo.U.shape != up.U.shape:
            raise ValueError("Trajectories live on different grids")
        if abs(lo.t - up.t) > 1e-12 * max(1.0, up.t):
            raise ValueError(f"Snapshot times differ: {lo.t!r} vs {up.t!r}")
        margin = float(np.max(lo.U - up.U))
        margins.append(margin)
        if margin > tol:
            failed.append(k)
    return CheckReport("comparison", not failed, tuple(margins), tuple(failed))


def scaling_invariance_check(
    fine: "RunRecord", coarse: "RunRecord", rho: float, N: int, atol: float = 0.0
) -> CheckReport:
    """Compare a trajectory with its dilation V(xi, t) = U(rho xi, rho^(2/N) t).

    ``coarse`` must start from the fine initial data on the first nodes of the
    fine grid (those at rho times the coarse nodes) and keep its boundary at
    U0(rho). Coarse snapshot k is compared with fine snapshot k, taken
    rho^(2/N) times earlier. The fine value at xi = rho moves while the
    coarse boundary stays put, so the largest drift of that value so far
    bounds the defect together with ``atol``.

    Raises:
        ValueError: If the snapshots do not pair up in number or time.
    """
    if not fine.snapshots or len(fine.snapshots) != len(coarse.snapshots):
        raise ValueError(
            f"Trajectories have {len(fine.snapshots)} and {len(coarse.snapshots)} snapshots"
        )
    time_scale = rho ** (2.0 / N)
    size = coarse.snapshots[0].U.size
    edge0 = float(fine.snapshots[0].U[size - 1])
    margins, failed = [], []
    drift = 0.0
    for k, (f, c) in enumerate(zip(fine.snapshots, coarse.snapshots)):
        if abs(f.t - time_scale * c.t) > 1e-9 * max(1.0, f.t):
            raise ValueError(f"Snapshot times do not scale: {f.t!r} vs {time_scale!r} * {c.t!r}")
        drift = max(drift, abs(float(f.U[size - 1]) - edge0))
        margin = float(np.max(np.abs(f.U[:size] - c.U))) - drift
        margins.append(margin)
        if margin > atol:
            failed.append(k)
    return CheckReport("scaling_invariance", not failed, tuple(margins), tuple(failed), f"rho={rho:g}")


def collapse_metric(
    state: State, grid: Grid, params: ModelParams, station_xis: Sequence[float] = STATION_XIS
) -> NDArray[np.float64]:
    """A - U at each station followed by the L1 norm of A - U."""
    _require_critical(params)
    stations = params.A - np.interp(np.asarray(station_xis, dtype=float), grid.xi, state.U)
    return np.append(stations, _plain_integral(params.A - state.U, grid.xi))


def collapse_trend_check(
    record: "RunRecord",
    grid: Grid,
    params: ModelParams,
    times: Sequence[float],
    station_xis: Sequence[float] = STATION_XIS,
) -> CheckReport:
    """Strict decrease of every collapse metric across the given snapshot times."""
    by_time = {s.t: s for s in record.snapshots}
    metrics = []
    for t in times:
        match = [s for st, s in by_time.items() if abs(st - t) <= 1e-9 * max(1.0, t)]
        if not match:
            raise ValueError(f"No snapshot retained at t={t!r}")
        metrics.append(collapse_metric(match[0], grid, params, station_xis))
    diffs = np.diff(np.array(metrics), axis=0)
    margins = tuple(float(d) for d in diffs.max(axis=1))
    failed = tuple(k for k, m in enumerate(margins) if not m < 0)
    return CheckReport("collapse_trend", not failed, margins, failed)


def empirical_decay_rate(samples: Sequence[DiagnosticsSample], floor: float = 1e-12) -> float:
    """Least-squares exponential decay rate of steady_dist; NaN when undetermined."""
    points = [(s.t, s.steady_dist) for s in samples if math.isfinite(s.steady_dist) and s.steady_dist > floor]
    if len(points) < 2:
        return math.nan
    t, d = np.array(points).T
    slope, _ = np.polyfit(t, np.log(d), 1)
    return float(-slope)
