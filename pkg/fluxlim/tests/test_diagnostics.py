"""Tests for monitored functionals and trajectory checks."""
import math

import numpy as np
import pytest
from scipy import integrate

from fluxlim.diagnostics import (
    COLUMNS,
    DiagnosticsMonitor,
    DiagnosticsSample,
    InconsistentLevelError,
    check_comparison,
    collapse_metric,
    dissipation_bound_check,
    empirical_decay_rate,
    lyapunov_psi_c,
    lyapunov_psi_ell,
    moment_ceiling,
    moment_inequality_check,
    moment_lower_bound,
    moment_psi,
    origin_slope,
    samples_from_frame,
    samples_to_frame,
    scaling_invariance_check,
    weighted_integral,
)
from fluxlim.discretization import State, build_grid, steady_state_on_grid
from fluxlim.integrator import Outcome, RunRecord
from fluxlim.model import ModelParams, RegimeError, SteadyProfile, amplitude_A


def _sample(t, **values):
    base = dict.fromkeys(COLUMNS, 0.0)
    base.update(t=t, **values)
    return DiagnosticsSample(**base)


def _record(*profiles, times=None):
    times = times or range(len(profiles))
    snapshots = [State(U=np.asarray(U, dtype=float), t=t) for U, t in zip(profiles, times)]
    return RunRecord(
        outcome=Outcome.REACHED_HORIZON,
        t_event=None,
        final_state=snapshots[-1],
        T_end=snapshots[-1].t,
        snapshots=snapshots,
    )


def test_psi_of_linear_profile_two_dimensions():
    """Test that psi of U = xi is 1/2 for N = 2."""
    grid = build_grid(64, 2.0, 2)
    assert moment_psi(State(U=grid.xi), grid, 2) == pytest.approx(0.5, rel=1e-12)


def test_psi_of_linear_profile_three_dimensions():
    """Test that psi of U = xi is the integral of xi^(2/3), which is 3/5."""
    grid = build_grid(256, 2.0, 3)
    assert moment_psi(State(U=grid.xi), grid, 3) == pytest.approx(0.6, rel=1e-4)


def test_weighted_integral_first_cell_is_exact():
    """Test that a singular weight on the first cell is integrated exactly for linear data."""
    xi = np.array([0.0, 1.0])
    # integral of xi^(-1/3) * (1 + xi) = 3/2 + 3/5
    assert weighted_integral([1.0, 2.0], xi, 3) == pytest.approx(2.1, rel=1e-14)


def test_weighted_integral_against_simpson():
    """Test the weighted rule against Simpson on a four times finer uniform grid."""
    coarse = build_grid(256, 1.0, 2).xi
    fine = np.linspace(0.0, 1.0, 4 * 256 + 1)

    def f(x):
        return np.sin(3.0 * x) * (1.0 + x)

    oracle = integrate.simpson(f(fine), x=fine)
    assert weighted_integral(f(coarse), coarse, 2) == pytest.approx(oracle, rel=1e-4)


def test_moment_lower_bound():
    """Test the growth rate of psi for twice the critical mass in two dimensions."""
    assert moment_lower_bound(1.0, ModelParams.from_mass_ratio(2, 2.0)) == pytest.approx(32.0)
    assert moment_lower_bound(5.0, ModelParams.from_mass_ratio(2, 1.0)) == pytest.approx(0.0, abs=1e-12)
    assert moment_lower_bound(1.0, ModelParams.from_mass_ratio(2, 0.5)) < 0


def test_moment_ceiling():
    """Test that the ceiling is N U(1) / 2."""
    params = ModelParams.from_level(3, 4.0)
    assert moment_ceiling(params) == pytest.approx(6.0)


def test_psi_ell_against_closed_form():
    """Test Psi_ell of U = 2 xi against its closed form for N = 2."""
    grid = build_grid(512, 1.0, 2)
    steady = SteadyProfile.from_level(2.0, 2)
    value = lyapunov_psi_ell(State(U=2.0 * grid.xi), steady, grid, 2)

    assert value == pytest.approx(26.0 / 3.0 - 12.0 * math.log(2.0), rel=1e-4)


def test_psi_ell_vanishes_at_steady_state():
    """Test that the steady state has zero distance to itself."""
    grid = build_grid(128, 2.0, 3)
    steady = SteadyProfile.from_level(5.0, 3)
    state = steady_state_on_grid(grid, 5.0)

    assert lyapunov_psi_ell(state, steady, grid, 3) == pytest.approx(0.0, abs=1e-12)


def test_psi_ell_rejects_mismatched_level():
    """Test that the steady level must equal U(1)."""
    grid = build_grid(32, 2.0, 2)
    with pytest.raises(InconsistentLevelError):
        lyapunov_psi_ell(State(U=grid.xi), SteadyProfile.from_level(2.0, 2), grid, 2)


def test_psi_c_two_dimensions():
    """Test Psi_c for the zero state and U = A xi at critical mass."""
    grid = build_grid(256, 1.0, 2)
    params = ModelParams.from_mass_ratio(2, 1.0)

    assert lyapunov_psi_c(State(U=np.zeros(257)), grid, params) == pytest.approx(6.0, rel=1e-12)
    assert lyapunov_psi_c(State(U=params.A * grid.xi), grid, params) == pytest.approx(10.0 / 3.0, rel=1e-5)


def test_psi_c_three_dimensions():
    """Test Psi_c of the zero state with the singular weight for N = 3."""
    grid = build_grid(512, 2.0, 3)
    params = ModelParams.from_mass_ratio(3, 1.0)

    value = lyapunov_psi_c(State(U=np.zeros(513)), grid, params)
    assert value == pytest.approx(2.4 * amplitude_A(3), rel=1e-3)


def test_psi_c_requires_critical_mass():
    """Test that Psi_c is refused away from the critical mass."""
    grid = build_grid(32, 2.0, 2)
    with pytest.raises(RegimeError):
        lyapunov_psi_c(State(U=grid.xi), grid, ModelParams.from_mass_ratio(2, 0.9))


def test_origin_slope():
    """Test the reconstructed density N U_1 / xi_1."""
    grid = build_grid(16, 1.0, 3)
    assert origin_slope(State(U=2.0 * grid.xi), grid) == pytest.approx(6.0)


def test_collapse_metric():
    """Test the collapse metric of U = A xi at a boundary station."""
    grid = build_grid(64, 1.0, 2)
    params = ModelParams.from_mass_ratio(2, 1.0)
    metric = collapse_metric(State(U=params.A * grid.xi), grid, params, station_xis=(0.5, 1.0))

    np.testing.assert_allclose(metric, [2.0, 0.0, 2.0], atol=1e-12)


def test_monitor_subcritical_sample():
    """Test that a subcritical monitor sees zero distance at the steady state."""
    params = ModelParams.from_mass_ratio(2, 0.5)
    grid = build_grid(128, 2.0, 2)
    monitor = DiagnosticsMonitor(grid, params)
    sample = monitor.sample(steady_state_on_grid(grid, params.boundary_level))

    assert sample.steady_dist == pytest.approx(0.0, abs=1e-12)
    assert sample.Psi_ell == pytest.approx(0.0, abs=1e-12)
    assert sample.psi_lower == sample.psi
    assert math.isfinite(sample.sharp_rate)


def test_monitor_supercritical_sample():
    """Test that steady-state quantities are NaN above the critical mass."""
    params = ModelParams.from_mass_ratio(2, 1.5)
    grid = build_grid(32, 2.0, 2)
    sample = DiagnosticsMonitor(grid, params).sample(State(U=params.boundary_level * grid.xi))

    assert math.isnan(sample.Psi_ell)
    assert math.isnan(sample.steady_dist)
    assert math.isnan(sample.sharp_rate)
    assert sample.second_moment == pytest.approx(params.m - 2.0 * params.omega_N / 2 * sample.psi)


def test_frame_columns_and_round_trip():
    """Test that the frame follows the sample field order."""
    samples = [_sample(0.0, psi=1.0), _sample(0.1, psi=1.5, Psi_ell=math.nan)]
    frame = samples_to_frame(samples)

    assert list(frame.columns) == list(COLUMNS)
    assert COLUMNS[:3] == ("t", "psi", "psi_lower")
    restored = samples_from_frame(frame)
    assert restored[1].psi == 1.5
    assert math.isnan(restored[1].Psi_ell)


def test_moment_inequality_check():
    """Test the ceiling and growth parts of the moment check."""
    sub = ModelParams.from_level(2, 2.0)
    assert moment_inequality_check([_sample(0.0, psi=1.0), _sample(1.0, psi=1.5)], sub).passed
    assert not moment_inequality_check([_sample(0.0, psi=2.5)], sub).passed

    sup = ModelParams.from_mass_ratio(2, 1.5)
    slow = [_sample(0.0, psi=1.0, psi_lower=1.0), _sample(1.0, psi=1.0, psi_lower=2.0)]
    report = moment_inequality_check(slow, sup)
    assert not report.passed
    assert report.failed == (1,)


def test_dissipation_check_needs_three_samples():
    """Test that the dissipation check refuses short series."""
    params = ModelParams.from_mass_ratio(2, 0.5)
    with pytest.raises(ValueError, match="at least 3 samples"):
        dissipation_bound_check([_sample(0.0), _sample(1.0)], params)


def test_dissipation_check_rejects_supercritical():
    """Test that no Lyapunov functional is checked above the critical mass."""
    params = ModelParams.from_mass_ratio(2, 1.5)
    with pytest.raises(RegimeError):
        dissipation_bound_check([_sample(0.0), _sample(1.0), _sample(2.0)], params)


def test_dissipation_check_on_steady_series():
    """Test that a constant zero series satisfies the subcritical bound."""
    params = ModelParams.from_mass_ratio(3, 0.5)
    report = dissipation_bound_check([_sample(float(t)) for t in range(4)], params)

    assert report.passed
    assert report.margins == (0.0, 0.0, 0.0)


def test_dissipation_check_detects_growth():
    """Test that an increasing Lyapunov functional fails the check."""
    params = ModelParams.from_mass_ratio(2, 0.5)
    samples = [_sample(float(t), Psi_ell=float(t), R_ell_L1=0.1) for t in range(3)]
    report = dissipation_bound_check(samples, params)

    assert not report.passed
    assert report.failed == (0, 1)


def test_critical_bound_starts_at_unit_time():
    """Test that the critical N >= 3 bound is only applied from t = 1."""
    params = ModelParams.from_mass_ratio(3, 1.0)
    samples = [_sample(t, Psi_c=5.0 + 10 * t) for t in (0.0, 0.5, 1.0, 1.5)]
    report = dissipation_bound_check(samples, params)

    assert math.isnan(report.margins[0]) and math.isnan(report.margins[1])
    assert report.failed == (2,)


def test_comparison_of_identical_records():
    """Test that a trajectory is ordered with respect to itself."""
    xi = np.linspace(0.0, 1.0, 17)
    record = _record(xi, 2 * xi)

    assert check_comparison(record, record).passed


def test_comparison_detects_crossing():
    """Test that a lower trajectory exceeding the upper one fails."""
    xi = np.linspace(0.0, 1.0, 17)
    report = check_comparison(_record(xi, 2 * xi), _record(xi, 1.5 * xi))

    assert not report.passed
    assert report.failed == (1,)


def test_comparison_requires_matching_samples():
    """Test that trajectories must share nodes and times."""
    xi = np.linspace(0.0, 1.0, 17)
    with pytest.raises(ValueError, match="snapshots"):
        check_comparison(_record(xi), _record(xi, xi))
    with pytest.raises(ValueError, match="different grids"):
        check_comparison(_record(xi), _record(np.linspace(0.0, 1.0, 9)))
    with pytest.raises(ValueError, match="times differ"):
        check_comparison(_record(xi, times=[0.0]), _record(xi, times=[0.5]))


def test_empirical_decay_rate():
    """Test the fitted exponent of an exactly exponential decay."""
    samples = [_sample(t, steady_dist=math.exp(-2.0 * t)) for t in np.linspace(0.0, 5.0, 11)]
    assert empirical_decay_rate(samples) == pytest.approx(2.0, rel=1e-10)
    assert math.isnan(empirical_decay_rate([_sample(0.0, steady_dist=math.nan)]))


def test_scaling_invariance_check_subtracts_boundary_drift():
    """Test that only the defect beyond the drift of the fine value at xi = rho counts."""
    U0 = np.linspace(0.0, 2.0, 9)
    U1 = U0 + 0.1 * np.sin(np.pi * np.linspace(0.0, 1.0, 9))
    fine = _record(U0, U1, times=[0.0, 0.5])
    coarse = _record(U0[:5], U0[:5], times=[0.0, 1.0])

    report = scaling_invariance_check(fine, coarse, 0.5, 2)
    assert report.passed
    assert report.margins == pytest.approx((0.0, 0.0), abs=1e-15)

    shifted = U0[:5].copy()
    shifted[2] += 0.3
    report = scaling_invariance_check(fine, _record(U0[:5], shifted, times=[0.0, 1.0]), 0.5, 2, atol=1e-3)
    assert not report.passed
    assert report.failed == (1,)
    assert report.note == "rho=0.5"


def test_scaling_invariance_check_rejects_unpaired_trajectories():
    """Test that snapshot counts and times must pair up."""
    U0 = np.linspace(0.0, 2.0, 9)
    fine = _record(U0, U0, times=[0.0, 0.5])

    with pytest.raises(ValueError, match="snapshots"):
        scaling_invariance_check(fine, _record(U0[:5], times=[0.0]), 0.5, 2)
    with pytest.raises(ValueError, match="do not scale"):
        scaling_invariance_check(fine, _record(U0[:5], U0[:5], times=[0.0, 0.5]), 0.5, 2)
