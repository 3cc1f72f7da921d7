"""Experiment files, environment settings and logging setup.

Experiment files are INI files::

    [experiment]
    kind = single
    output_dir = runs/supercritical

    [model]
    N = 2
    mass_ratio = 1.5

    [grid]
    n = 1024
    gamma = 2

    [solver]
    T_end = 1.0

    [initial]
    kind = constant

Unknown sections or keys are rejected.
"""
import configparser
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from fluxlim.discretization import DRIFT_MODES
from fluxlim.integrator import SolverConfig

LOG_FORMAT = "%(levelname)-5.5s [%(name)s] %(message)s"
LOG_LEVELS = {"off": None, "info": logging.INFO, "debug": logging.DEBUG}

EXPERIMENT_KINDS = ("single", "mass_sweep", "grid_convergence", "comparison", "epsilon_study")
INITIAL_KINDS = ("constant", "steady", "scaled_steady", "table")
CONVERGENCE_MODES = ("steady_residual", "blowup_time", "scaling_invariance")


class ConfigError(ValueError):
    """Raised for unreadable or invalid experiment files and settings."""


def get_log_level() -> int | None:
    """Get the logging level from the FLUXLIM_LOG environment variable.

    Returns:
        A logging level, or None when logging is switched off

    Raises:
        ConfigError: If FLUXLIM_LOG is not one of off, info or debug.
    """
    value = os.getenv("FLUXLIM_LOG", "info").strip().lower()
    if value not in LOG_LEVELS:
        raise ConfigError(f"FLUXLIM_LOG must be one of off, info, debug; got {value!r}")
    return LOG_LEVELS[value]


def get_default_jobs() -> int:
    """Get the default worker count from the FLUXLIM_JOBS environment variable."""
    value = os.getenv("FLUXLIM_JOBS", "1")
    try:
        jobs = int(value)
    except ValueError:
        raise ConfigError(f"FLUXLIM_JOBS must be a positive integer, got {value!r}") from None
    if jobs < 1:
        raise ConfigError(f"FLUXLIM_JOBS must be a positive integer, got {value!r}")
    return jobs


def configure_logging() -> None:
    """Send package log records to stderr at the level chosen by FLUXLIM_LOG."""
    level = get_log_level()
    logger = logging.getLogger("fluxlim")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.propagate = False
    if level is None:
        logger.addHandler(logging.NullHandler())
        logger.setLevel(logging.CRITICAL + 1)
        return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(handler)
    logger.setLevel(level)


@dataclass(frozen=True)
class InitialData:
    """Descriptor of initial data.

    ``ell`` is the level of the steady profile, ``factor`` scales it, and
    ``path`` names a CSV table with either ``xi,U`` or ``r,u`` columns.
    """

    kind: str = "constant"
    ell: float | None = None
    ell_ratio: float | None = None
    factor: float | None = None
    path: Path | None = None

    def __post_init__(self):
        if self.kind not in INITIAL_KINDS:
            raise ConfigError(f"initial.kind must be one of {INITIAL_KINDS}, got {self.kind!r}")
        if self.ell is not None and self.ell_ratio is not None:
            raise ConfigError("Give either initial.ell or initial.ell_ratio, not both")
        if self.kind == "table" and self.path is None:
            raise ConfigError("initial.path is required for table initial data")
        if self.factor is not None and not self.factor > 0:
            raise ConfigError(f"initial.factor must be positive, got {self.factor!r}")


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str = "single"
    N: int = 2
    mass: float | None = None
    mass_ratio: float | None = None
    n: int = 256
    gamma: float = 2.0
    solver: SolverConfig = field(default_factory=SolverConfig)
    initial: InitialData = field(default_factory=InitialData)
    output_dir: Path = Path("runs")
    jobs: int | None = None
    mass_lo_ratio: float = 0.8
    mass_hi_ratio: float = 1.3
    sweep_rtol: float = 0.02
    convergence_mode: str = "steady_residual"
    n_list: tuple[int, ...] = (128, 256, 512, 1024)
    eps_list: tuple[float, ...] = (1e-1, 1e-2, 1e-3)
    comparison: InitialData | None = None
    comparison_mass: float | None = None
    comparison_mass_ratio: float | None = None
    comparison_eps: float | None = None

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"experiment.kind must be one of {EXPERIMENT_KINDS}, got {self.kind!r}")
        if self.mass is not None and self.mass_ratio is not None:
            raise ConfigError("Give either model.mass or model.mass_ratio, not both")
        for name in ("mass", "mass_ratio", "comparison_mass", "comparison_mass_ratio"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigError(f"{name} must be positive, got {value!r}")
        if self.mass is None and self.mass_ratio is None and self.initial.kind == "constant" and self.kind != "mass_sweep":
            raise ConfigError("model.mass or model.mass_ratio is required for constant initial data")
        if self.jobs is not None and self.jobs < 1:
            raise ConfigError(f"experiment.jobs must be positive, got {self.jobs!r}")
        if self.kind == "mass_sweep" and not self.mass_lo_ratio < self.mass_hi_ratio:
            raise ConfigError(
                f"Sweep bracket is empty: mass_lo_ratio={self.mass_lo_ratio!r}, "
                f"mass_hi_ratio={self.mass_hi_ratio!r}"
            )
        if self.convergence_mode not in CONVERGENCE_MODES:
            raise ConfigError(
                f"convergence.mode must be one of {CONVERGENCE_MODES}, got {self.convergence_mode!r}"
            )
        if self.kind == "grid_convergence":
            if len(self.n_list) < 3:
                raise ConfigError(f"convergence.n_list needs at least 3 entries, got {self.n_list!r}")
            if any(n < 1 or n & (n - 1) for n in self.n_list):
                raise ConfigError(f"convergence.n_list entries must be powers of two, got {self.n_list!r}")
        if self.kind == "comparison" and self.comparison is None:
            raise ConfigError("A [comparison] section is required for comparison experiments")


def _parse_float(section: str, key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{section}.{key} must be a number, got {value!r}") from None


def _parse_int(section: str, key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{section}.{key} must be an integer, got {value!r}") from None


def _parse_bool(section: str, key: str, value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{section}.{key} must be a boolean, got {value!r}")


def _parse_list(section: str, key: str, value: str, parse) -> tuple:
    items = [item for item in value.replace(",", " ").split() if item]
    if not items:
        raise ConfigError(f"{section}.{key} must not be empty")
    return tuple(parse(section, key, item) for item in items)


_SOLVER_TYPES = {f.name: f.type for f in fields(SolverConfig)}

_SECTIONS: dict[str, set[str]] = {
    "experiment": {"kind", "output_dir", "jobs"},
    "model": {"N", "mass", "mass_ratio"},
    "grid": {"n", "gamma"},
    "solver": set(_SOLVER_TYPES),
    "initial": {"kind", "ell", "ell_ratio", "factor", "path"},
    "sweep": {"mass_lo_ratio", "mass_hi_ratio", "rtol"},
    "convergence": {"mode", "n_list"},
    "epsilon": {"eps_list"},
    "comparison": {"kind", "ell", "ell_ratio", "factor", "path", "mass", "mass_ratio", "eps"},
}


def _check_known(parser: configparser.ConfigParser):
    problems = []
    for section in parser.sections():
        if section not in _SECTIONS:
            problems.append(f"unknown section [{section}]")
            continue
        for key in parser[section]:
            if key not in _SECTIONS[section]:
                problems.append(f"unknown key {section}.{key}")
    if problems:
        raise ConfigError("Invalid experiment file: " + "; ".join(problems))


def _parse_solver(section: configparser.SectionProxy) -> SolverConfig:
    values = {}
    for key, raw in section.items():
        kind = _SOLVER_TYPES[key]
        if kind is bool or kind == "bool":
            values[key] = _parse_bool("solver", key, raw)
        elif kind is int or kind == "int":
            values[key] = _parse_int("solver", key, raw)
        elif key == "drift":
            if raw not in DRIFT_MODES:
                raise ConfigError(f"solver.drift must be one of {DRIFT_MODES}, got {raw!r}")
            values[key] = raw
        else:
            values[key] = _parse_float("solver", key, raw)
    try:
        return SolverConfig(**values)
    except ValueError as err:
        raise ConfigError(f"Invalid [solver] section: {err}") from err


def _parse_initial(name: str, section, base: Path) -> InitialData:
    values = {}
    for key, raw in section.items():
        if key == "kind":
            values[key] = raw.strip()
        elif key == "path":
            path = Path(raw.strip())
            values[key] = path if path.is_absolute() else base / path
        elif key in ("ell", "ell_ratio", "factor"):
            values[key] = _parse_float(name, key, raw)
    return InitialData(**values)


def parse_experiment(parser: configparser.ConfigParser, base: Path = Path(".")) -> ExperimentSpec:
    """Build an ExperimentSpec from a parsed INI document.

    Relative table paths are resolved against ``base``.
    """
    _check_known(parser)
    values: dict = {}
    if parser.has_section("experiment"):
        section = parser["experiment"]
        if "kind" in section:
            values["kind"] = section["kind"].strip()
        if "output_dir" in section:
            values["output_dir"] = Path(section["output_dir"].strip())
        if "jobs" in section:
            values["jobs"] = _parse_int("experiment", "jobs", section["jobs"])
    if parser.has_section("model"):
        section = parser["model"]
        if "N" in section:
            values["N"] = _parse_int("model", "N", section["N"])
        for key in ("mass", "mass_ratio"):
            if key in section:
                values[key] = _parse_float("model", key, section[key])
    if parser.has_section("grid"):
        section = parser["grid"]
        if "n" in section:
            values["n"] = _parse_int("grid", "n", section["n"])
        if "gamma" in section:
            values["gamma"] = _parse_float("grid", "gamma", section["gamma"])
    if parser.has_section("solver"):
        values["solver"] = _parse_solver(parser["solver"])
    if parser.has_section("initial"):
        values["initial"] = _parse_initial("initial", parser["initial"], base)
    if parser.has_section("sweep"):
        section = parser["sweep"]
        for key, target in (("mass_lo_ratio", "mass_lo_ratio"), ("mass_hi_ratio", "mass_hi_ratio"), ("rtol", "sweep_rtol")):
            if key in section:
                values[target] = _parse_float("sweep", key, section[key])
    if parser.has_section("convergence"):
        section = parser["convergence"]
        if "mode" in section:
            values["convergence_mode"] = section["mode"].strip()
        if "n_list" in section:
            values["n_list"] = _parse_list("convergence", "n_list", section["n_list"], _parse_int)
    if parser.has_section("epsilon") and "eps_list" in parser["epsilon"]:
        values["eps_list"] = _parse_list("epsilon", "eps_list", parser["epsilon"]["eps_list"], _parse_float)
    if parser.has_section("comparison"):
        section = parser["comparison"]
        values["comparison"] = _parse_initial("comparison", section, base)
        for key in ("mass", "mass_ratio", "eps"):
            if key in section:
                values[f"comparison_{key}"] = _parse_float("comparison", key, section[key])
    return ExperimentSpec(**values)


def load_experiment(path: str | Path) -> ExperimentSpec:
    """Read an experiment file.

    Raises:
        ConfigError: If the file cannot be read or holds invalid settings.
    """
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with path.open() as handle:
            parser.read_file(handle)
    except (OSError, configparser.Error) as err:
        raise ConfigError(f"Cannot read experiment file {path}: {err}") from err
    return parse_experiment(parser, base=path.parent)


def with_overrides(spec: ExperimentSpec, output_dir: str | Path | None = None, jobs: int | None = None) -> ExperimentSpec:
    """Apply command line overrides to a spec."""
    changes = {}
    if output_dir is not None:
        changes["output_dir"] = Path(output_dir)
    if jobs is not None:
        changes["jobs"] = jobs
    return replace(spec, **changes) if changes else spec
