"""Tests for backward-Euler stepping and full integrations."""
import math

import numpy as np
import pytest

from fluxlim.diagnostics import collapse_trend_check, dissipation_bound_check, moment_inequality_check
from fluxlim.discretization import (
    State,
    apply_P_rhs,
    build_grid,
    steady_residual_norm,
    steady_state_on_grid,
)
from fluxlim.integrator import (
    GrowthLadder,
    Outcome,
    SolverConfig,
    StalledError,
    StepFailure,
    blow_up_threshold,
    detect_blow_up,
    integrate,
    step,
    steady_tolerance,
)
from fluxlim.model import ModelParams, blow_up_time_bound


def test_solver_config_validation():
    """Test that inconsistent step sizes and unknown drift modes are rejected."""
    with pytest.raises(ValueError, match="Time steps must satisfy"):
        SolverConfig(dt_min=1e-3, dt_init=1e-4)
    with pytest.raises(ValueError, match="Time steps must satisfy"):
        SolverConfig(dt_init=1.0, dt_max=0.5)
    with pytest.raises(ValueError, match="Unknown drift mode"):
        SolverConfig(drift="backward")
    with pytest.raises(ValueError, match="eps"):
        SolverConfig(eps=-1.0)


def test_step_keeps_zero_state():
    """Test that a step from the zero state returns the zero state."""
    grid = build_grid(32, 2.0, 2)
    params = ModelParams.from_level(2, 1.0)
    new = step(State(U=np.zeros(33)), grid, params, SolverConfig(), 1e-2)

    assert not np.any(new.U)
    assert new.t == pytest.approx(1e-2)


def test_step_rejects_non_positive_dt():
    """Test that dt must be positive."""
    grid = build_grid(32, 2.0, 2)
    with pytest.raises(ValueError, match="positive"):
        step(State(U=grid.xi), grid, ModelParams.from_level(2, 1.0), SolverConfig(), 0.0)


def test_step_from_steady_state_barely_moves():
    """Test that a step from the sampled steady state moves by about dt times its residual."""
    grid = build_grid(64, 2.0, 2)
    params = ModelParams.from_level(2, 2.0)
    config = SolverConfig(drift="central")
    state = steady_state_on_grid(grid, 2.0)
    dt = 1e-3

    new = step(state, grid, params, config, dt)
    residual = steady_residual_norm(grid, 2.0)
    assert np.max(np.abs(new.U - state.U)) <= 2.0 * dt * residual + 1e-10
    assert new.U[0] == 0.0
    assert new.U[-1] == 2.0


def test_small_step_matches_explicit_euler():
    """Test that a tiny backward-Euler step agrees with the explicit increment."""
    grid = build_grid(32, 1.0, 2)
    params = ModelParams.from_level(2, 2.0)
    config = SolverConfig(drift="central", newton_tol=1e-14)
    state = State(U=2.0 * grid.xi * (2.0 - grid.xi))
    dt = 1e-8

    new = step(state, grid, params, config, dt)
    F = apply_P_rhs(state, grid, 2)
    increment = (new.U[1:-1] - state.U[1:-1]) / dt
    assert np.max(np.abs(increment - F)) <= 1e-3 * np.max(np.abs(F))


def test_step_failure_when_newton_cannot_converge():
    """Test that an exhausted Newton iteration raises StepFailure."""
    grid = build_grid(32, 2.0, 2)
    params = ModelParams.from_level(2, 2.0)
    config = SolverConfig(newton_max_iter=1, newton_tol=1e-300)

    with pytest.raises(StepFailure, match="did not converge"):
        step(State(U=2.0 * grid.xi), grid, params, config, 1e-2)


def test_detect_blow_up():
    """Test the origin-slope and step-failure criteria."""
    grid = build_grid(16, 1.0, 2)
    params = ModelParams.from_level(2, 1.0)
    config = SolverConfig(blowup_slope_factor=10.0)
    calm = State(U=grid.xi)
    U = grid.xi.copy()
    U[1:-1] = 1.0
    spiked = State(U=U)

    assert not detect_blow_up(calm, grid, params, config)
    assert detect_blow_up(spiked, grid, params, config)
    assert detect_blow_up(calm, grid, params, config, 3, [1.0, 2.0, 3.0, 4.0, 5.0])
    assert not detect_blow_up(calm, grid, params, config, 3, [1.0, 2.0, 2.0, 4.0, 5.0])
    assert not detect_blow_up(calm, grid, params, config, 2, [1.0, 2.0, 3.0, 4.0, 5.0])
    assert not detect_blow_up(calm, grid, params, config, 3, [1.0, 2.0, 3.0])


def test_blow_up_threshold_follows_resolution():
    """Test that fine grids classify against the density the first cell can hold."""
    params = ModelParams.from_mass_ratio(2, 1.0)
    baseline = 2 * params.boundary_level
    fine = build_grid(1024, 2.0, 2)
    coarse = build_grid(16, 1.0, 2)

    assert blow_up_threshold(fine, params, SolverConfig()) == pytest.approx(0.25 * baseline / fine.xi[1])
    assert blow_up_threshold(coarse, params, SolverConfig()) == pytest.approx(1e3 * baseline)
    with pytest.raises(ValueError, match="capacity_fraction"):
        SolverConfig(capacity_fraction=1.5)


def test_growth_ladder_separates_finite_time_growth():
    """Test that 1/(T - t) growth accelerates and exponential growth does not."""
    singular = GrowthLadder(baseline=1.0)
    for t in 1.0 - np.geomspace(1.0, 1e-6, 400):
        singular.observe(t, 1.0 / (1.0 - t))
    np.testing.assert_allclose(singular.crossings[:3], [0.9, 0.99, 0.999], rtol=1e-9)
    assert singular.accelerating

    exponential = GrowthLadder(baseline=1.0)
    for t in np.arange(0.0, 10.0, 0.01):
        exponential.observe(t, math.exp(2.0 * t))
    assert len(exponential.crossings) >= 3
    assert not exponential.accelerating

    short = GrowthLadder(baseline=1.0)
    short.observe(0.0, 50.0)
    short.observe(1.0, 5000.0)
    assert short.crossings == pytest.approx([0.01 / 0.0198, 0.019 / 0.0198])
    assert short.accelerating


def test_slow_collapse_is_not_blow_up():
    """Test that a saturated first cell reached at a steady pace is not reported."""
    grid = build_grid(256, 2.0, 2)
    params = ModelParams.from_mass_ratio(2, 1.0)
    config = SolverConfig()
    U = np.full(257, params.boundary_level)
    U[0] = 0.0
    saturated = State(U=U)
    steady_pace = GrowthLadder(baseline=2 * params.boundary_level)
    for t in np.arange(0.0, 20.0, 0.05):
        steady_pace.observe(t, 2 * params.boundary_level * math.exp(t))

    assert detect_blow_up(saturated, grid, params, config)
    assert not detect_blow_up(saturated, grid, params, config, ladder=steady_pace)


def test_steady_tolerance_scales_with_level():
    """Test the relative steady threshold on a coarse grid."""
    grid = build_grid(32, 1.0, 2)
    config = SolverConfig(steady_tol_factor=1e-6)

    assert steady_tolerance(State(U=3.0 * grid.xi), grid, config) == pytest.approx(3e-6)
    assert steady_tolerance(State(U=np.zeros(33)), grid, config) == pytest.approx(1e-6)


def test_integrate_rejects_inconsistent_initial_data():
    """Test that initial data must match the boundary level and be nondecreasing."""
    grid = build_grid(32, 2.0, 2)
    params = ModelParams.from_level(2, 2.0)

    with pytest.raises(ValueError, match="U\\(1\\)"):
        integrate(grid.xi, grid, params, SolverConfig())
    with pytest.raises(ValueError, match="nondecreasing"):
        integrate(2.0 * grid.xi + np.sin(40.0 * grid.xi) * grid.xi * (1 - grid.xi), grid, params, SolverConfig())
    with pytest.raises(ValueError, match="shape"):
        integrate(np.zeros(10), grid, params, SolverConfig())


def test_integrate_reaches_horizon():
    """Test a short run with samples on every multiple of the interval."""
    grid = build_grid(64, 2.0, 2)
    params = ModelParams.from_mass_ratio(2, 0.2)
    config = SolverConfig(T_end=0.01, sample_interval=0.005, stop_on_steady=False)

    record = integrate(params.boundary_level * grid.xi, grid, params, config)

    assert record.outcome == Outcome.REACHED_HORIZON
    assert record.t_event is None
    assert [s.t for s in record.samples] == pytest.approx([0.0, 0.005, 0.01])
    assert record.final_state.t == pytest.approx(0.01)
    assert record.final_state.U[-1] == params.boundary_level
    assert np.all(np.diff(record.final_state.U) >= -1e-10 * params.boundary_level)


def test_supercritical_run_blows_up_before_bound():
    """Test that 1.5 m_c blows up before T* = 1/2 in two dimensions."""
    grid = build_grid(128, 2.0, 2)
    params = ModelParams.from_mass_ratio(2, 1.5)
    config = SolverConfig(T_end=1.0, sample_interval=0.05, drift="hybrid")

    record = integrate(params.boundary_level * grid.xi, grid, params, config)

    assert record.outcome == Outcome.BLEW_UP
    t_star = blow_up_time_bound(params.m, 2)
    assert t_star == pytest.approx(0.5)
    assert record.t_event < t_star
    assert record.blowup_threshold == blow_up_threshold(grid, params, config)
    assert moment_inequality_check(record.samples, params).passed


@pytest.mark.parametrize("N", [2, 3])
def test_subcritical_run_converges_to_steady_state(N):
    """Test that half the critical mass relaxes to the steady profile."""
    grid = build_grid(1024, 2.0, N)
    params = ModelParams.from_mass_ratio(N, 0.5)
    config = SolverConfig(T_end=50.0, sample_interval=0.5, dt_max=0.5)

    record = integrate(params.boundary_level * grid.xi, grid, params, config)

    assert record.outcome == Outcome.CONVERGED
    assert record.t_event < 10.0
    assert record.samples[-1].steady_dist < 1e-3
    assert record.steady_residual <= record.steady_tol
    assert moment_inequality_check(record.samples, params).passed
    spatial_error = steady_residual_norm(grid, params.boundary_level)
    assert dissipation_bound_check(record.samples, params, spatial_error=spatial_error).passed


def test_time_step_error_is_first_order():
    """Test that halving the step roughly halves the distance to a fine-step run."""
    grid = build_grid(64, 2.0, 2)
    params = ModelParams.from_mass_ratio(2, 0.5)
    U0 = params.boundary_level * grid.xi

    def final_profile(dt):
        config = SolverConfig(
            T_end=0.1, sample_interval=0.1, dt_init=dt, dt_max=dt, stop_on_steady=False, newton_tol=1e-13
        )
        return integrate(U0, grid, params, config).final_state.U

    reference = final_profile(0.000625)
    defects = [float(np.max(np.abs(final_profile(dt) - reference))) for dt in (0.02, 0.01, 0.005)]

    assert defects[0] > defects[1] > defects[2] > 0
    for coarse, fine in zip(defects, defects[1:]):
        assert 1.6 <= coarse / fine <= 2.5


def test_stalled_run_raises():
    """Test that repeated failures at dt_min without blow-up signature raise StalledError."""
    grid = build_grid(32, 2.0, 2)
    params = ModelParams.from_mass_ratio(2, 0.5)
    config = SolverConfig(newton_max_iter=1, newton_tol=1e-300, dt_min=1e-8)

    with pytest.raises(StalledError):
        integrate(params.boundary_level * grid.xi, grid, params, config)


def test_critical_run_two_dimensions_collapses_without_blow_up():
    """Test that critical mass concentrates monotonically without finite-time blow-up on a fine grid."""
    grid = build_grid(1024, 2.0, 2)
    params = ModelParams.from_mass_ratio(2, 1.0)
    config = SolverConfig(
        T_end=10.0, sample_interval=2.5, drift="hybrid", keep_snapshots=True, stop_on_steady=False
    )
    U0 = 2.0 * steady_state_on_grid(grid, 0.5 * params.A).U

    record = integrate(U0, grid, params, config)

    assert record.outcome == Outcome.REACHED_HORIZON
    assert record.t_event is None
    assert collapse_trend_check(record, grid, params, [2.5, 5.0, 10.0]).passed
    assert dissipation_bound_check(record.samples, params).passed


def test_critical_run_three_dimensions_collapses_without_blow_up():
    """Test the critical collapse for N = 3 past t = 1 on a fine grid."""
    grid = build_grid(512, 2.0, 3)
    params = ModelParams.from_mass_ratio(3, 1.0)
    config = SolverConfig(
        T_end=4.0, sample_interval=1.0, drift="hybrid", keep_snapshots=True, stop_on_steady=False
    )
    U0 = 2.0 * steady_state_on_grid(grid, 0.5 * params.A).U

    record = integrate(U0, grid, params, config)

    assert record.outcome == Outcome.REACHED_HORIZON
    assert len(record.snapshots) == 5
    assert collapse_trend_check(record, grid, params, [1.0, 2.0, 4.0]).passed
    assert dissipation_bound_check(record.samples, params).passed
