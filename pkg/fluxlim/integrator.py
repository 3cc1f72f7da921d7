"""Backward-Euler time integration with adaptive steps and blow-up detection."""
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Sequence

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike
from scipy import linalg

from fluxlim.diagnostics import DiagnosticsMonitor, DiagnosticsSample, origin_slope, samples_to_frame
from fluxlim.discretization import (
    DRIFT_MODES,
    DriftMode,
    Grid,
    State,
    drift_weights,
    evaluate_jacobian,
    evaluate_rhs,
)
from fluxlim.model import ModelParams

logger = logging.getLogger(__name__)

SLOPE_HISTORY = 5
FAILURES_AT_FLOOR = 3
LINE_SEARCH_MIN = 1.0 / 64.0
LADDER_RATIO = 10.0
ACCELERATION = 1.5


class StepFailure(RuntimeError):
    """Raised when a backward-Euler step cannot be completed with the given dt."""


class StalledError(RuntimeError):
    """Raised when dt underflows without a blow-up signature."""


class Outcome(StrEnum):
    BLEW_UP = "BlewUp"
    REACHED_HORIZON = "ReachedHorizon"
    CONVERGED = "ConvergedToSteady"


@dataclass(frozen=True)
class SolverConfig:
    """Time-stepping, Newton and event-detection settings."""

    T_end: float = 1.0
    dt_init: float = 1e-4
    dt_min: float = 1e-12
    dt_max: float = 0.1
    dt_growth: float = 1.2
    newton_tol: float = 1e-12
    newton_max_iter: int = 25
    blowup_slope_factor: float = 1e3
    capacity_fraction: float = 0.25
    eps: float = 0.0
    drift: DriftMode = "central"
    sample_interval: float = 0.1
    steady_tol_factor: float = 1e-9
    stop_on_steady: bool = True
    monotone_tol: float = 1e-10
    keep_snapshots: bool = False

    def __post_init__(self):
        if not 0 < self.dt_min < self.dt_init <= self.dt_max:
            raise ValueError(
                f"Time steps must satisfy 0 < dt_min < dt_init <= dt_max, got "
                f"dt_min={self.dt_min!r}, dt_init={self.dt_init!r}, dt_max={self.dt_max!r}"
            )
        if not self.T_end > 0:
            raise ValueError(f"Horizon T_end must be positive, got {self.T_end!r}")
        if not self.newton_tol > 0:
            raise ValueError(f"newton_tol must be positive, got {self.newton_tol!r}")
        if self.newton_max_iter < 1:
            raise ValueError(f"newton_max_iter must be at least 1, got {self.newton_max_iter!r}")
        if not self.blowup_slope_factor > 1:
            raise ValueError(
                f"blowup_slope_factor must exceed 1, got {self.blowup_slope_factor!r}"
            )
        if not 0 < self.capacity_fraction <= 1:
            raise ValueError(f"capacity_fraction must lie in (0, 1], got {self.capacity_fraction!r}")
        if not self.dt_growth >= 1:
            raise ValueError(f"dt_growth must be at least 1, got {self.dt_growth!r}")
        if not self.eps >= 0:
            raise ValueError(f"Regularization eps must be >= 0, got {self.eps!r}")
        if self.drift not in DRIFT_MODES:
            raise ValueError(f"Unknown drift mode {self.drift!r}, expected one of {DRIFT_MODES}")
        if not self.sample_interval > 0:
            raise ValueError(f"sample_interval must be positive, got {self.sample_interval!r}")
        if not self.steady_tol_factor > 0 or not self.monotone_tol >= 0:
            raise ValueError("steady_tol_factor must be positive and monotone_tol non-negative")


@dataclass
class RunRecord:
    """Result of one integration."""

    outcome: Outcome
    t_event: float | None
    final_state: State
    T_end: float
    samples: list[DiagnosticsSample] = field(default_factory=list)
    snapshots: list[State] = field(default_factory=list)
    steps: int = 0
    rejected: int = 0
    blowup_threshold: float = math.nan
    steady_tol: float = math.nan
    steady_residual: float = math.nan
    steady_tol_roundoff: bool = False

    def to_frame(self) -> pd.DataFrame:
        return samples_to_frame(self.samples)

    def __repr__(self) -> str:
        return (
            f"<RunRecord(outcome={self.outcome}, t_event={self.t_event}, "
            f"samples={len(self.samples)}, steps={self.steps})>"
        )


def _tolerance_scale(U: np.ndarray) -> float:
    level = float(U[-1])
    return level if level > 0 else 1.0


def step(state: State, grid: Grid, params: ModelParams, config: SolverConfig, dt: float) -> State:
    """Advance ``state`` by one backward-Euler step of size dt.

    The nonlinear system V - dt F(V) = U_old is solved for the interior
    values by Newton's method with a halving line search. Boundary values are
    carried over unchanged. The drift stencil is chosen once from U_old.

    Raises:
        StepFailure: If Newton does not converge within newton_max_iter
            iterations, produces non-finite values, or the result is not
            nondecreasing within monotone_tol.
    """
    if not dt > 0:
        raise ValueError(f"Time step must be positive, got {dt!r}")
    U_old = state.U
    scale = _tolerance_scale(U_old)
    tol = config.newton_tol * scale
    weights = drift_weights(U_old, grid, config.drift, config.eps)
    t_new = state.t + dt

    def residual(V: np.ndarray) -> np.ndarray:
        rhs = evaluate_rhs(State(U=V, t=t_new), grid, config.eps, weights=weights)
        return V[1:-1] - U_old[1:-1] - dt * rhs

    V = U_old.copy()
    G = residual(V)
    norm = float(np.max(np.abs(G)))
    for iteration in range(config.newton_max_iter + 1):
        if not math.isfinite(norm):
            raise StepFailure(f"Newton produced non-finite residual at dt={dt:.3e}")
        if norm <= tol:
            break
        if iteration == config.newton_max_iter:
            raise StepFailure(
                f"Newton did not converge in {config.newton_max_iter} iterations "
                f"(residual {norm:.3e}, dt={dt:.3e})"
            )
        J = evaluate_jacobian(State(U=V, t=t_new), grid, config.eps, weights=weights)
        try:
            delta = linalg.solve_banded((1, 1), J.banded(scale=-dt, shift=1.0), -G)
        except (linalg.LinAlgError, ValueError) as err:
            raise StepFailure(f"Newton linear solve failed at dt={dt:.3e}: {err}") from err
        damping = 1.0
        while True:
            trial = V.copy()
            trial[1:-1] += damping * delta
            G_trial = residual(trial)
            norm_trial = float(np.max(np.abs(G_trial)))
            if norm_trial < norm or damping <= LINE_SEARCH_MIN:
                break
            damping /= 2.0
        V, G, norm = trial, G_trial, norm_trial
    logger.debug("Newton converged in %d iterations at dt=%.3e", iteration, dt)

    if np.min(np.diff(V)) < -config.monotone_tol * scale:
        raise StepFailure(f"Step of size dt={dt:.3e} broke monotonicity")
    return State(U=V, t=t_new)


def _crossing_time(t0: float, s0: float, t1: float, s1: float, level: float) -> float:
    # linear in 1/s, exact for a density growing like 1/(T - t)
    if s0 <= 0:
        return t1
    fraction = (1.0 / s0 - 1.0 / level) / (1.0 / s0 - 1.0 / s1)
    return t0 + fraction * (t1 - t0)


@dataclass
class GrowthLadder:
    """First times at which the origin density climbed past successive decades of the uniform density.

    Levels are baseline * 10^k above the initial origin density. A finite-time
    singularity climbs each decade faster than the previous one; a collapse
    that only completes as t grows does not.
    """

    baseline: float
    crossings: list[float] = field(default_factory=list)
    level: float = math.nan
    last: tuple[float, float] | None = None

    def observe(self, t: float, slope: float) -> None:
        if self.last is None:
            self.level = self.baseline * LADDER_RATIO
            while self.level <= slope:
                self.level *= LADDER_RATIO
        else:
            t0, s0 = self.last
            while slope >= self.level:
                self.crossings.append(_crossing_time(t0, s0, t, slope, self.level))
                self.level *= LADDER_RATIO
        self.last = (t, slope)

    @property
    def accelerating(self) -> bool:
        """Whether the last decade took ACCELERATION times less than the one before.

        True while fewer than three crossings are known.
        """
        if len(self.crossings) < 3:
            return True
        a, b, c = self.crossings[-3:]
        return ACCELERATION * (c - b) < b - a


def blow_up_threshold(grid: Grid, params: ModelParams, config: SolverConfig) -> float:
    """Origin density at which a run may be classified as blown up.

    capacity_fraction of the largest density the grid can hold, N U(1) / xi_1
    (all mass in the first cell), and never less than blowup_slope_factor
    times the uniform density N U(1).
    """
    baseline = params.N * params.boundary_level
    capacity = baseline / float(grid.xi[1])
    return max(config.capacity_fraction * capacity, config.blowup_slope_factor * baseline)


def detect_blow_up(
    state: State,
    grid: Grid,
    params: ModelParams,
    config: SolverConfig,
    consecutive_failures: int = 0,
    recent_slopes: Sequence[float] = (),
    ladder: GrowthLadder | None = None,
) -> bool:
    """Numerical surrogate for the unbounded growth of the density.

    Fires when the reconstructed origin density N U_1 / xi_1 reaches
    blow_up_threshold while ``ladder`` (if given) still shows accelerating
    growth, or when the step size has failed at dt_min three consecutive
    times while the origin slope grew strictly over the last five accepted
    steps. Without a ladder the threshold alone decides.
    """
    if origin_slope(state, grid) >= blow_up_threshold(grid, params, config):
        if ladder is None or ladder.accelerating:
            return True
    if consecutive_failures >= FAILURES_AT_FLOOR and len(recent_slopes) >= SLOPE_HISTORY:
        last = np.asarray(recent_slopes[-SLOPE_HISTORY:], dtype=float)
        return bool(np.all(np.diff(last) > 0))
    return False


def steady_tolerance(state: State, grid: Grid, config: SolverConfig) -> float:
    """Convergence threshold on the sup-norm of the right-hand side.

    steady_tol_factor * U(1), raised to the round-off level of the diffusion
    stencil when that is larger.
    """
    U = state.U
    roundoff = 16.0 * np.finfo(float).eps * float(np.max(np.abs(grid.c2 * grid.d2[1] * U[1:-1])))
    return max(config.steady_tol_factor * _tolerance_scale(U), roundoff)


def _initial_state(U0: ArrayLike, grid: Grid, params: ModelParams) -> State:
    U = np.array(U0, dtype=float)
    level = params.boundary_level
    if U.shape != (grid.n + 1,):
        raise ValueError(f"Initial data has shape {U.shape}, expected ({grid.n + 1},)")
    if abs(U[0]) > 1e-12 * level or abs(U[-1] - level) > 1e-9 * level:
        raise ValueError(
            f"Initial data must satisfy U(0)=0 and U(1)={level!r}, got {U[0]!r} and {U[-1]!r}"
        )
    U[0], U[-1] = 0.0, level
    if np.min(np.diff(U)) < -1e-10 * level:
        raise ValueError("Initial data must be nondecreasing")
    return State(U=U, t=0.0)


def integrate(U0: ArrayLike, grid: Grid, params: ModelParams, config: SolverConfig) -> RunRecord:
    """Evolve U0 until blow-up, steady convergence or the horizon T_end.

    Step sizes are truncated so samples land exactly on multiples of
    sample_interval (and on T_end). A rejected step halves dt; an accepted,
    untruncated step grows it by dt_growth up to dt_max.

    Raises:
        StalledError: If steps keep failing at dt_min without a blow-up
            signature.
    """
    state = _initial_state(U0, grid, params)
    monitor = DiagnosticsMonitor(grid, params)
    record = RunRecord(
        outcome=Outcome.REACHED_HORIZON,
        t_event=None,
        final_state=state,
        T_end=config.T_end,
        samples=[monitor.sample(state)],
        snapshots=[state] if config.keep_snapshots else [],
    )
    record.blowup_threshold = blow_up_threshold(grid, params, config)
    logger.info(
        "Integrating N=%d m=%.6g (m/m_c=%.6g) on n=%d up to T=%g",
        params.N, params.m, params.mass_ratio, grid.n, config.T_end,
    )

    dt = config.dt_init
    sample_index = 1
    failures = 0
    slopes: deque[float] = deque(maxlen=SLOPE_HISTORY)
    ladder = GrowthLadder(baseline=params.N * params.boundary_level)
    ladder.observe(state.t, origin_slope(state, grid))

    def next_target() -> float:
        return min(sample_index * config.sample_interval, config.T_end)

    while True:
        if detect_blow_up(state, grid, params, config, ladder=ladder):
            record.outcome, record.t_event = Outcome.BLEW_UP, state.t
            break
        if state.t >= config.T_end:
            break
        target = next_target()
        dt_try = min(dt, target - state.t)
        truncated = dt_try < dt
        try:
            new_state = step(state, grid, params, config, dt_try)
        except StepFailure as err:
            record.rejected += 1
            logger.debug("Rejected step at t=%.6g: %s", state.t, err)
            if dt_try <= config.dt_min:
                failures += 1
                if failures >= FAILURES_AT_FLOOR:
                    if detect_blow_up(state, grid, params, config, failures, list(slopes), ladder):
                        record.outcome, record.t_event = Outcome.BLEW_UP, state.t
                        break
                    raise StalledError(
                        f"Time step underflow at t={state.t:.6g} without a blow-up signature"
                    ) from err
            dt = max(dt_try / 2.0, config.dt_min)
            continue

        failures = 0
        record.steps += 1
        if target - new_state.t <= 1e-12 * max(1.0, target):
            new_state = State(U=new_state.U, t=target)
        state = new_state
        slopes.append(origin_slope(state, grid))
        ladder.observe(state.t, slopes[-1])
        if not truncated:
            dt = min(dt * config.dt_growth, config.dt_max)

        if state.t == target:
            record.samples.append(monitor.sample(state))
            if config.keep_snapshots:
                record.snapshots.append(state)
            sample_index += 1

        if config.stop_on_steady:
            rhs = evaluate_rhs(state, grid, config.eps, config.drift)
            if np.max(np.abs(rhs)) < steady_tolerance(state, grid, config):
                record.outcome, record.t_event = Outcome.CONVERGED, state.t
                break

    if state.t > record.samples[-1].t:
        record.samples.append(monitor.sample(state))
        if config.keep_snapshots:
            record.snapshots.append(state)
    record.final_state = state
    record.steady_tol = steady_tolerance(state, grid, config)
    record.steady_tol_roundoff = record.steady_tol > config.steady_tol_factor * _tolerance_scale(state.U)
    record.steady_residual = float(np.max(np.abs(evaluate_rhs(state, grid, config.eps, config.drift))))
    logger.info(
        "Finished with %s at t=%.6g after %d steps (%d rejected)",
        record.outcome, state.t, record.steps, record.rejected,
    )
    return record
