"""Experiment orchestration: single runs, mass sweeps, convergence and epsilon studies, comparisons."""
import asyncio
import logging
import math
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from contextlib import asynccontextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import AsyncGenerator, Callable, Iterable, TypeVar

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from fluxlim.config import ConfigError, ExperimentSpec, InitialData, get_default_jobs
from fluxlim.diagnostics import (
    CheckReport,
    check_comparison,
    dissipation_bound_check,
    empirical_decay_rate,
    moment_inequality_check,
    scaling_invariance_check,
)
from fluxlim.discretization import Grid, build_grid, steady_residual_norm, steady_state_on_grid
from fluxlim.integrator import Outcome, RunRecord, SolverConfig, integrate
from fluxlim.model import (
    ModelParams,
    RadialProfile,
    accumulate_density,
    amplitude_A,
    blow_up_time_bound,
    critical_mass,
    density_from_U,
    omega,
    signal_gradient_from_U,
)

logger = logging.getLogger(__name__)

CSV_OPTIONS = {"float_format": "%.17g", "na_rep": "nan", "index": False}
EPSILON_ORDER_ATOL = 1e-8
MAX_SWEEP_ROUNDS = 64
SCALING_SOLVE_FACTOR = 10.0

T = TypeVar("T")
R = TypeVar("R")


class BracketError(ValueError):
    """Raised when a mass bracket does not separate blow-up from global existence."""


class WorkPool:
    """Runs independent members on an executor; results keep input order."""

    def __init__(self, executor: Executor):
        self.executor = executor

    async def map(self, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        loop = asyncio.get_running_loop()
        return list(await asyncio.gather(*(loop.run_in_executor(self.executor, fn, item) for item in items)))


@asynccontextmanager
async def get_pool(jobs: int) -> AsyncGenerator[WorkPool, None]:
    """Get a work pool with ``jobs`` workers.

    Usage:
        async with get_pool(4) as pool:
            records = await pool.map(run_member, tasks)
    """
    if jobs < 1:
        raise ValueError(f"Worker count must be positive, got {jobs!r}")
    executor: Executor = ThreadPoolExecutor(max_workers=1) if jobs == 1 else ProcessPoolExecutor(max_workers=jobs)
    try:
        yield WorkPool(executor)
    finally:
        executor.shutdown(wait=True, cancel_futures=True)


@dataclass(frozen=True, eq=False)
class MemberTask:
    """Everything a worker needs to integrate one trajectory."""

    params: ModelParams
    n: int
    gamma: float
    solver: SolverConfig
    U0: NDArray[np.float64]


def run_member(task: MemberTask) -> RunRecord:
    grid = build_grid(task.n, task.gamma, task.params.N)
    return integrate(task.U0, grid, task.params, task.solver)


def resolve_jobs(spec: ExperimentSpec) -> int:
    return spec.jobs if spec.jobs is not None else get_default_jobs()


def requested_mass(N: int, mass: float | None, mass_ratio: float | None) -> float | None:
    if mass is not None:
        return mass
    if mass_ratio is not None:
        return mass_ratio * critical_mass(N)
    return None


def read_table(path: Path, grid: Grid, N: int) -> NDArray[np.float64]:
    """Accumulated density at the grid nodes from a CSV table.

    A table with ``xi,U`` columns is interpolated directly; one with ``r,u``
    columns is a radial density and is accumulated.

    Raises:
        ConfigError: If the file cannot be read or has neither column pair.
    """
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as err:
        raise ConfigError(f"Cannot read table {path}: {err}") from err
    if {"xi", "U"} <= set(frame.columns):
        return np.interp(grid.xi, frame["xi"].to_numpy(float), frame["U"].to_numpy(float))
    if {"r", "u"} <= set(frame.columns):
        try:
            profile = RadialProfile(r=frame["r"].to_numpy(float), values=frame["u"].to_numpy(float))
            return accumulate_density(profile, N, grid)
        except ValueError as err:
            raise ConfigError(f"Invalid density table {path}: {err}") from err
    raise ConfigError(f"Table {path} needs xi,U or r,u columns, got {list(frame.columns)}")


def _steady_level(initial: InitialData, N: int) -> float | None:
    if initial.ell is not None:
        return initial.ell
    if initial.ell_ratio is not None:
        return initial.ell_ratio * amplitude_A(N)
    return None


def _check_level(level: float, target: float | None, kind: str):
    if target is not None and abs(level - target) > 1e-12 * target:
        raise ConfigError(
            f"{kind} initial data has boundary level {level!r} but the mass requires {target!r}"
        )


def initial_profile(
    initial: InitialData, grid: Grid, N: int, mass: float | None
) -> tuple[NDArray[np.float64], ModelParams]:
    """Initial accumulated density at the nodes and the parameters it implies.

    Raises:
        ConfigError: If the descriptor and the mass are inconsistent or
            neither fixes the boundary level.
    """
    target = mass / omega(N) if mass is not None else None
    ell = _steady_level(initial, N)
    match initial.kind:
        case "constant":
            if target is None:
                raise ConfigError("Constant initial data needs a mass")
            U = target * grid.xi
            level = target
        case "steady":
            ell = ell if ell is not None else target
            if ell is None:
                raise ConfigError("Steady initial data needs initial.ell, initial.ell_ratio or a mass")
            _check_level(ell, target, "Steady")
            U = steady_state_on_grid(grid, ell).U.copy()
            level = ell
        case "scaled_steady":
            factor = initial.factor
            if ell is None and target is not None and factor is not None:
                ell = target / factor
            if ell is None:
                raise ConfigError("Scaled steady initial data needs initial.ell or initial.ell_ratio")
            if factor is None:
                factor = target / ell if target is not None else 1.0
            level = factor * ell
            _check_level(level, target, "Scaled steady")
            U = factor * steady_state_on_grid(grid, ell).U
        case "table":
            U = read_table(initial.path, grid, N)
            if U[-1] <= 0:
                raise ConfigError(f"Table {initial.path} carries no mass")
            if target is not None:
                U = U * (target / U[-1])
            level = float(U[-1])
    params = ModelParams(N=N, m=mass) if mass is not None else ModelParams.from_level(N, level)
    U = np.array(U, dtype=float)
    U[0], U[-1] = 0.0, params.boundary_level
    return U, params


def profile_frame(record: RunRecord, grid: Grid, N: int) -> pd.DataFrame:
    U = record.final_state.U
    return pd.DataFrame(
        {
            "xi": grid.xi,
            "U": U,
            "u": density_from_U(U, grid, N).values,
            "neg_v_r": signal_gradient_from_U(U, grid, N).values,
        }
    )


def write_summary(path: Path, items: dict) -> None:
    lines = []
    for key, value in items.items():
        if isinstance(value, float):
            value = "nan" if math.isnan(value) else f"{value:.17g}"
        lines.append(f"{key}: {value}")
    path.write_text("\n".join(lines) + "\n")


def _t_star(params: ModelParams) -> float:
    return blow_up_time_bound(params.m, params.N) if params.regime == "supercritical" else math.inf


def blow_up_time_check(record: RunRecord, params: ModelParams) -> CheckReport:
    """Blow-up no later than T* for supercritical runs whose horizon reaches T*."""
    t_star = _t_star(params)
    if record.outcome == Outcome.BLEW_UP:
        margin = record.t_event - t_star
        return CheckReport("blow_up_time", margin <= 0, (margin,), () if margin <= 0 else (0,))
    if record.T_end < t_star:
        return CheckReport("blow_up_time", True, (), (), "horizon ends before T*")
    return CheckReport("blow_up_time", False, (record.T_end - t_star,), (0,), "no blow-up before T*")


def run_checks(record: RunRecord, grid: Grid, params: ModelParams) -> list[CheckReport]:
    checks = [moment_inequality_check(record.samples, params)]
    if params.regime == "supercritical":
        checks.append(blow_up_time_check(record, params))
    elif len(record.samples) >= 3:
        spatial_error = steady_residual_norm(grid, params.boundary_level) if params.regime == "subcritical" else 0.0
        checks.append(dissipation_bound_check(record.samples, params, spatial_error=spatial_error))
    return checks


@dataclass
class RunResult:
    params: ModelParams
    grid: Grid
    record: RunRecord
    checks: list[CheckReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def summary(self) -> dict:
        record, params = self.record, self.params
        items = {
            "kind": "single",
            "outcome": str(record.outcome),
            "t_event": record.t_event if record.t_event is not None else math.nan,
            "T_end": record.T_end,
            "T_star": _t_star(params),
            "N": params.N,
            "m": params.m,
            "m_c": params.m_c,
            "mass_ratio": params.mass_ratio,
            "n": self.grid.n,
            "gamma": self.grid.gamma,
            "steps": record.steps,
            "rejected": record.rejected,
            "blowup_threshold": record.blowup_threshold,
            "final_origin_slope": record.samples[-1].origin_slope,
            "steady_dist": record.samples[-1].steady_dist,
            "decay_rate": empirical_decay_rate(record.samples),
            "steady_tol": record.steady_tol,
            "steady_tol_roundoff": record.steady_tol_roundoff,
            "steady_residual": record.steady_residual,
        }
        for check in self.checks:
            items[f"check.{check.name}"] = check.describe()
        items["checks_passed"] = self.passed
        return items


def write_run_files(result: RunResult, out_dir: Path) -> None:
    """Write diagnostics.csv, profile_final.csv and summary.txt into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    result.record.to_frame().to_csv(out_dir / "diagnostics.csv", **CSV_OPTIONS)
    profile_frame(result.record, result.grid, result.params.N).to_csv(out_dir / "profile_final.csv", **CSV_OPTIONS)
    write_summary(out_dir / "summary.txt", result.summary())
    logger.info("Wrote run files to %s", out_dir)


async def run_single(spec: ExperimentSpec, write: bool = True) -> RunResult:
    """Integrate one trajectory, check it and write its files."""
    grid = build_grid(spec.n, spec.gamma, spec.N)
    mass = requested_mass(spec.N, spec.mass, spec.mass_ratio)
    U0, params = initial_profile(spec.initial, grid, spec.N, mass)
    task = MemberTask(params=params, n=spec.n, gamma=spec.gamma, solver=spec.solver, U0=U0)
    async with get_pool(1) as pool:
        (record,) = await pool.map(run_member, [task])
    result = RunResult(params=params, grid=grid, record=record, checks=run_checks(record, grid, params))
    logger.info("Run finished: %s at t=%s", record.outcome, record.t_event)
    if write:
        write_run_files(result, spec.output_dir)
    return result


@dataclass(frozen=True)
class SweepRun:
    mass: float
    outcome: Outcome
    t_event: float | None

    @property
    def blew_up(self) -> bool:
        return self.outcome == Outcome.BLEW_UP


def classify_mass(task: MemberTask) -> SweepRun:
    record = run_member(task)
    return SweepRun(mass=task.params.m, outcome=record.outcome, t_event=record.t_event)


@dataclass
class SweepResult:
    """Bracket [lo, hi] around the numerical threshold mass."""

    N: int
    lo: float
    hi: float
    m_c: float
    runs: list[SweepRun] = field(default_factory=list)

    @property
    def estimate(self) -> float:
        return 0.5 * (self.lo + self.hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def relative_error(self) -> float:
        return abs(self.estimate - self.m_c) / self.m_c

    @property
    def passed(self) -> bool:
        """A sweep reports a bracket; it asserts no inequality."""
        return True

    def to_frame(self) -> pd.DataFrame:
        runs = sorted(self.runs, key=lambda run: run.mass)
        return pd.DataFrame(
            {
                "mass": [run.mass for run in runs],
                "mass_ratio": [run.mass / self.m_c for run in runs],
                "outcome": [str(run.outcome) for run in runs],
                "t_event": [run.t_event if run.t_event is not None else math.nan for run in runs],
            }
        )

    def summary(self) -> dict:
        return {
            "kind": "mass_sweep",
            "N": self.N,
            "m_c": self.m_c,
            "m_lo": self.lo,
            "m_hi": self.hi,
            "estimate": self.estimate,
            "width": self.width,
            "relative_error": self.relative_error,
            "runs": len(self.runs),
            "checks_passed": True,
        }


async def mass_sweep(spec: ExperimentSpec, write: bool = True) -> SweepResult:
    """Locate the threshold mass by k-section on run outcomes.

    Each round classifies ``jobs`` interior masses concurrently and keeps the
    sub-bracket where the classification changes; with one job this is
    bisection. Stops once the width is at most rtol * m_c.

    Raises:
        BracketError: If the bracket is degenerate or both ends classify
            identically.
    """
    N = spec.N
    m_c = critical_mass(N)
    lo, hi = spec.mass_lo_ratio * m_c, spec.mass_hi_ratio * m_c
    if not lo < hi:
        raise BracketError(f"Degenerate mass bracket [{lo!r}, {hi!r}]")
    if spec.initial.kind == "steady":
        raise ConfigError("Mass sweeps need constant, scaled_steady or table initial data")
    jobs = resolve_jobs(spec)
    grid = build_grid(spec.n, spec.gamma, N)

    def task(mass: float) -> MemberTask:
        U0, params = initial_profile(spec.initial, grid, N, mass)
        return MemberTask(params=params, n=spec.n, gamma=spec.gamma, solver=spec.solver, U0=U0)

    result = SweepResult(N=N, lo=lo, hi=hi, m_c=m_c)
    async with get_pool(jobs) as pool:
        ends = await pool.map(classify_mass, [task(lo), task(hi)])
        result.runs.extend(ends)
        if ends[0].blew_up == ends[1].blew_up:
            raise BracketError(
                f"Both bracket ends classify identically: m={lo:.6g} -> {ends[0].outcome}, "
                f"m={hi:.6g} -> {ends[1].outcome}"
            )
        low_class = ends[0].blew_up
        for _ in range(MAX_SWEEP_ROUNDS):
            if result.width <= spec.sweep_rtol * m_c:
                break
            span = result.hi - result.lo
            masses = [result.lo + span * k / (jobs + 1) for k in range(1, jobs + 1)]
            runs = await pool.map(classify_mass, [task(m) for m in masses])
            result.runs.extend(runs)
            left, right = result.lo, result.hi
            for run in runs:
                if run.blew_up != low_class:
                    right = run.mass
                    break
                left = run.mass
            result.lo, result.hi = left, right
            logger.info("Sweep bracket [%.6g, %.6g] (m/m_c in [%.4f, %.4f])", left, right, left / m_c, right / m_c)
    logger.info("Threshold estimate %.6g, relative error to m_c %.3e", result.estimate, result.relative_error)
    if write:
        spec.output_dir.mkdir(parents=True, exist_ok=True)
        result.to_frame().to_csv(spec.output_dir / "sweep.csv", **CSV_OPTIONS)
        write_summary(spec.output_dir / "summary.txt", result.summary())
    return result


@dataclass
class ConvergenceReport:
    mode: str
    N: int
    n_list: tuple[int, ...]
    values: list[float]
    orders: list[float]
    extrapolated: float = math.nan
    observed_order: float = math.nan
    checks: list[CheckReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def to_frame(self) -> pd.DataFrame:
        column = "residual" if self.mode == "steady_residual" else "t_event"
        return pd.DataFrame({"n": list(self.n_list), column: self.values, "order": self.orders})

    def summary(self) -> dict:
        items = {
            "kind": "grid_convergence",
            "mode": self.mode,
            "N": self.N,
            "n_list": " ".join(str(n) for n in self.n_list),
            "extrapolated": self.extrapolated,
            "observed_order": self.observed_order,
        }
        for check in self.checks:
            items[f"check.{check.name}"] = check.describe()
        items["checks_passed"] = self.passed
        return items


def _check_n_list(n_list) -> tuple[int, ...]:
    n_list = tuple(int(n) for n in n_list)
    if len(n_list) < 3:
        raise ValueError(f"Convergence study needs at least 3 grids, got {n_list!r}")
    if any(b != 2 * a for a, b in zip(n_list, n_list[1:])):
        raise ValueError(f"Grid sizes must double successively, got {n_list!r}")
    return n_list


def refinement_orders(values: list[float]) -> list[float]:
    """Observed orders log2(e_k / e_k+1); NaN where undefined. First entry is NaN."""
    orders = [math.nan]
    for a, b in zip(values, values[1:]):
        orders.append(math.log2(a / b) if a > 0 and b > 0 else math.nan)
    return orders


def richardson_limit(values: list[float]) -> tuple[float, float]:
    """Extrapolated limit and observed order from the last three values.

    Falls back to order 1 when the observed order is not positive and finite.
    """
    v1, v2, v3 = values[-3:]
    order = math.nan
    if v2 != v3 and (v1 - v2) / (v2 - v3) > 0:
        order = math.log2((v1 - v2) / (v2 - v3))
    if not (math.isfinite(order) and order > 0):
        order = 1.0
    return v3 + (v3 - v2) / (2.0**order - 1.0), order


def steady_residual_study(N: int, gamma: float, n_list, ell: float) -> ConvergenceReport:
    """Sup-norm of the discrete operator on the sampled steady profile per grid."""
    n_list = _check_n_list(n_list)
    residuals = [steady_residual_norm(build_grid(n, gamma, N), ell) for n in n_list]
    orders = refinement_orders(residuals)
    finite = [o for o in orders if math.isfinite(o)]
    return ConvergenceReport(
        mode="steady_residual",
        N=N,
        n_list=n_list,
        values=residuals,
        orders=orders,
        observed_order=min(finite) if finite else math.nan,
    )


async def blowup_time_study(spec: ExperimentSpec, n_list) -> ConvergenceReport:
    """Blow-up times per grid with their Richardson-extrapolated limit."""
    n_list = _check_n_list(n_list)
    mass = requested_mass(spec.N, spec.mass, spec.mass_ratio)
    tasks = []
    for n in n_list:
        grid = build_grid(n, spec.gamma, spec.N)
        U0, params = initial_profile(spec.initial, grid, spec.N, mass)
        tasks.append(MemberTask(params=params, n=n, gamma=spec.gamma, solver=spec.solver, U0=U0))
    async with get_pool(resolve_jobs(spec)) as pool:
        runs = await pool.map(classify_mass, tasks)
    times = [run.t_event if run.blew_up else math.nan for run in runs]
    report = ConvergenceReport(
        mode="blowup_time", N=spec.N, n_list=n_list, values=times, orders=[math.nan] * len(times)
    )
    if all(math.isfinite(t) for t in times):
        report.extrapolated, report.observed_order = richardson_limit(times)
    t_star = _t_star(tasks[0].params)
    margin = report.extrapolated - t_star
    report.checks.append(
        CheckReport("blow_up_time", margin <= 0, (margin,), () if margin <= 0 else (0,), f"T*={t_star:.6g}")
    )
    return report


@dataclass
class ScalingReport:
    N: int
    n: int
    rho: float
    times: list[float]
    check: CheckReport

    @property
    def passed(self) -> bool:
        return self.check.passed

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.times, "excess_defect": list(self.check.margins)})

    def summary(self) -> dict:
        return {
            "kind": "grid_convergence",
            "mode": "scaling_invariance",
            "N": self.N,
            "n_fine": 2 * self.n,
            "n_coarse": self.n,
            "rho": self.rho,
            "check.scaling_invariance": self.check.describe(),
            "checks_passed": self.passed,
        }


def _dilated_solver(solver: SolverConfig, time_scale: float) -> SolverConfig:
    return replace(
        solver,
        T_end=solver.T_end / time_scale,
        dt_init=solver.dt_init / time_scale,
        dt_min=solver.dt_min / time_scale,
        dt_max=solver.dt_max / time_scale,
        sample_interval=solver.sample_interval / time_scale,
    )


async def scaling_invariance_study(spec: ExperimentSpec) -> ScalingReport:
    """Check a trajectory on 2n intervals against its dilation run on n intervals.

    The first n + 1 fine nodes are rho = 2^-gamma times the coarse nodes, so
    the coarse run from U0(rho xi) with time scaled by rho^(-2/N) takes the
    same steps as the fine one. Beyond the drift of the fine value at
    xi = rho, the allowed defect is ten times the Newton tolerance summed
    over the steps taken.
    """
    N, n = spec.N, spec.n
    fine_grid = build_grid(2 * n, spec.gamma, N)
    U0, params = initial_profile(spec.initial, fine_grid, N, requested_mass(N, spec.mass, spec.mass_ratio))
    rho = 2.0**-spec.gamma
    time_scale = rho ** (2.0 / N)
    solver = replace(spec.solver, keep_snapshots=True, stop_on_steady=False)
    tasks = [
        MemberTask(params=params, n=2 * n, gamma=spec.gamma, solver=solver, U0=U0),
        MemberTask(
            params=ModelParams.from_level(N, float(U0[n])),
            n=n,
            gamma=spec.gamma,
            solver=_dilated_solver(solver, time_scale),
            U0=U0[: n + 1].copy(),
        ),
    ]
    async with get_pool(resolve_jobs(spec)) as pool:
        fine, coarse = await pool.map(run_member, tasks)
    atol = SCALING_SOLVE_FACTOR * solver.newton_tol * params.boundary_level * max(fine.steps, coarse.steps, 1)
    check = scaling_invariance_check(fine, coarse, rho, N, atol)
    logger.info("Scaling invariance rho=%g: %s", rho, check.describe())
    return ScalingReport(N=N, n=n, rho=rho, times=[s.t for s in fine.snapshots], check=check)


async def grid_convergence(spec: ExperimentSpec, write: bool = True) -> ConvergenceReport | ScalingReport:
    if spec.convergence_mode == "scaling_invariance":
        report = await scaling_invariance_study(spec)
        logger.info("Convergence study scaling_invariance: %s", report.check.describe())
        if write:
            spec.output_dir.mkdir(parents=True, exist_ok=True)
            report.to_frame().to_csv(spec.output_dir / "convergence.csv", **CSV_OPTIONS)
            write_summary(spec.output_dir / "summary.txt", report.summary())
        return report
    if spec.convergence_mode == "steady_residual":
        ell = _steady_level(spec.initial, spec.N)
        if ell is None:
            mass = requested_mass(spec.N, spec.mass, spec.mass_ratio)
            if mass is None:
                raise ConfigError("Steady residual study needs a mass or initial.ell")
            ell = mass / omega(spec.N)
        report = steady_residual_study(spec.N, spec.gamma, spec.n_list, ell)
    else:
        report = await blowup_time_study(spec, spec.n_list)
    logger.info("Convergence study %s: values %s", report.mode, report.values)
    if write:
        spec.output_dir.mkdir(parents=True, exist_ok=True)
        report.to_frame().to_csv(spec.output_dir / "convergence.csv", **CSV_OPTIONS)
        write_summary(spec.output_dir / "summary.txt", report.summary())
    return report


def _ordered_solver(solver: SolverConfig, eps: float | None = None) -> SolverConfig:
    changes = {"keep_snapshots": True, "stop_on_steady": False}
    if eps is not None:
        changes["eps"] = eps
    return replace(solver, **changes)


@dataclass
class EpsilonReport:
    N: int
    eps_list: tuple[float, ...]
    gaps: list[float] = field(default_factory=list)
    checks: list[CheckReport] = field(default_factory=list)
    skipped: bool = False
    note: str = ""

    @property
    def decreasing(self) -> bool:
        order = sorted(range(len(self.eps_list)), key=lambda k: -self.eps_list[k])
        ordered = [self.gaps[k] for k in order]
        return all(b < a for a, b in zip(ordered, ordered[1:]))

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "eps": list(self.eps_list),
                "gap": self.gaps,
                "ordered": [check.passed for check in self.checks],
                "worst_margin": [check.worst for check in self.checks],
            }
        )

    def summary(self) -> dict:
        items = {"kind": "epsilon_study", "N": self.N, "skipped": self.skipped}
        if self.note:
            items["note"] = self.note
        if not self.skipped:
            items["gaps_decreasing"] = self.decreasing
        items["checks_passed"] = self.passed
        return items


async def epsilon_study(spec: ExperimentSpec, write: bool = True) -> EpsilonReport:
    """Compare regularized trajectories with the plain one from identical data.

    Each regularized solution must stay below the plain one (within 1e-8);
    the reported gap is the sup-norm difference at T_end.
    """
    eps_list = tuple(spec.eps_list)
    report = EpsilonReport(N=spec.N, eps_list=eps_list)
    if spec.N == 2:
        report.skipped = True
        report.note = "N=2: the regularization exponent is zero, regularized and plain equations coincide"
        logger.info("Epsilon study skipped: %s", report.note)
    else:
        if any(not eps > 0 for eps in eps_list):
            raise ValueError(f"epsilon values must be positive, got {eps_list!r}")
        grid = build_grid(spec.n, spec.gamma, spec.N)
        mass = requested_mass(spec.N, spec.mass, spec.mass_ratio)
        U0, params = initial_profile(spec.initial, grid, spec.N, mass)
        tasks = [
            MemberTask(params=params, n=spec.n, gamma=spec.gamma, solver=_ordered_solver(spec.solver, eps), U0=U0)
            for eps in (0.0, *eps_list)
        ]
        async with get_pool(resolve_jobs(spec)) as pool:
            plain, *regularized = await pool.map(run_member, tasks)
        for eps, record in zip(eps_list, regularized):
            report.checks.append(check_comparison(record, plain, atol=EPSILON_ORDER_ATOL))
            report.gaps.append(float(np.max(np.abs(record.final_state.U - plain.final_state.U))))
            logger.info("eps=%g: gap %.3e", eps, report.gaps[-1])
    if write:
        spec.output_dir.mkdir(parents=True, exist_ok=True)
        if not report.skipped:
            report.to_frame().to_csv(spec.output_dir / "epsilon.csv", **CSV_OPTIONS)
        write_summary(spec.output_dir / "summary.txt", report.summary())
    return report


@dataclass
class ComparisonResult:
    lower: RunRecord
    upper: RunRecord
    check: CheckReport

    @property
    def passed(self) -> bool:
        return self.check.passed

    def summary(self) -> dict:
        return {
            "kind": "comparison",
            "lower_outcome": str(self.lower.outcome),
            "upper_outcome": str(self.upper.outcome),
            "snapshots": len(self.upper.snapshots),
            "worst_margin": self.check.worst,
            "check.comparison": self.check.describe(),
            "checks_passed": self.passed,
        }


async def run_comparison(spec: ExperimentSpec, write: bool = True) -> ComparisonResult:
    """Run the [comparison] member below the main member and check the ordering.

    Raises:
        ValueError: If the initial data or boundary levels are not ordered.
    """
    if spec.comparison is None:
        raise ConfigError("A [comparison] section is required for comparison experiments")
    grid = build_grid(spec.n, spec.gamma, spec.N)
    U_up, params_up = initial_profile(
        spec.initial, grid, spec.N, requested_mass(spec.N, spec.mass, spec.mass_ratio)
    )
    U_lo, params_lo = initial_profile(
        spec.comparison, grid, spec.N, requested_mass(spec.N, spec.comparison_mass, spec.comparison_mass_ratio)
    )
    tol = 1e-10 * params_up.boundary_level
    if np.max(U_lo - U_up) > tol:
        raise ValueError("Comparison initial data are not ordered: lower exceeds upper somewhere")
    atol = EPSILON_ORDER_ATOL if spec.comparison_eps else 0.0
    tasks = [
        MemberTask(params=params_lo, n=spec.n, gamma=spec.gamma, solver=_ordered_solver(spec.solver, spec.comparison_eps), U0=U_lo),
        MemberTask(params=params_up, n=spec.n, gamma=spec.gamma, solver=_ordered_solver(spec.solver), U0=U_up),
    ]
    async with get_pool(resolve_jobs(spec)) as pool:
        lower, upper = await pool.map(run_member, tasks)
    result = ComparisonResult(lower=lower, upper=upper, check=check_comparison(lower, upper, atol=atol))
    logger.info("Comparison %s", result.check.describe())
    if write:
        spec.output_dir.mkdir(parents=True, exist_ok=True)
        write_summary(spec.output_dir / "comparison.txt", result.summary())
    return result


async def run_experiment(spec: ExperimentSpec, write: bool = True):
    """Dispatch on spec.kind."""
    match spec.kind:
        case "single":
            return await run_single(spec, write)
        case "mass_sweep":
            return await mass_sweep(spec, write)
        case "grid_convergence":
            return await grid_convergence(spec, write)
        case "comparison":
            return await run_comparison(spec, write)
        case "epsilon_study":
            return await epsilon_study(spec, write)
    raise ConfigError(f"Unknown experiment kind {spec.kind!r}")
