"""Finite-difference semi-discretization of the accumulated-density equation.

The operator is

    U_t = c2(xi) U_xixi + b(xi, U) U_xi,    c2 = N^2 xi^(2 - 2/N),

with the plain drift coefficient b = c1 max(U, 0)^(1/(N-1)), c1 = N xi^(1 - 2/N),
or the regularized coefficient b = N (eps + xi^(2/N - 2) U^2)^((2-N)/(2N-2)) U.
Only interior nodes carry unknowns; U_0 = 0 and U_n = m / omega_N are Dirichlet
data and never enter a coefficient evaluation at xi = 0.
"""
import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import sparse

from fluxlim.model import w_lambda, lambda_from_level

logger = logging.getLogger(__name__)

DriftMode = Literal["central", "upwind", "hybrid"]
DRIFT_MODES: tuple[str, ...] = ("central", "upwind", "hybrid")

MIN_NODES = 16
POWER_CLAMP = 1e-30


def graded_nodes(n: int, gamma: float) -> NDArray[np.float64]:
    """Nodes (i/n)**gamma for i = 0..n; endpoints are exactly 0 and 1."""
    if n < 1:
        raise ValueError(f"Number of intervals n must be positive, got {n!r}")
    if not gamma >= 1:
        raise ValueError(f"Grading exponent gamma must be >= 1, got {gamma!r}")
    xi = (np.arange(n + 1, dtype=float) / n) ** gamma
    xi[0], xi[-1] = 0.0, 1.0
    return xi


@dataclass(frozen=True, eq=False)
class Grid:
    """Graded mesh on [0, 1] with the stencil weights of every interior node.

    Arrays prefixed ``d1_``/``d2_``/``up_`` hold (minus, centre, plus) weights of
    the first-derivative, second-derivative and forward-difference stencils,
    one entry per interior node.
    """

    n: int
    gamma: float
    N: int
    xi: NDArray[np.float64] = field(init=False, repr=False)
    h: NDArray[np.float64] = field(init=False, repr=False)
    c2: NDArray[np.float64] = field(init=False, repr=False)
    c1: NDArray[np.float64] = field(init=False, repr=False)
    d1: tuple[NDArray[np.float64], ...] = field(init=False, repr=False)
    d2: tuple[NDArray[np.float64], ...] = field(init=False, repr=False)
    up: tuple[NDArray[np.float64], ...] = field(init=False, repr=False)

    def __post_init__(self):
        xi = graded_nodes(self.n, self.gamma)
        h = np.diff(xi)
        hm, hp = h[:-1], h[1:]
        inner = xi[1:-1]
        N = self.N
        values = {
            "xi": xi,
            "h": h,
            "c2": N * N * inner ** (2.0 - 2.0 / N),
            "c1": N * inner ** (1.0 - 2.0 / N),
            "d1": (
                -hp / (hm * (hm + hp)),
                (hp - hm) / (hm * hp),
                hm / (hp * (hm + hp)),
            ),
            "d2": (
                2.0 / (hm * (hm + hp)),
                -2.0 / (hm * hp),
                2.0 / (hp * (hm + hp)),
            ),
            "up": (np.zeros_like(hp), -1.0 / hp, 1.0 / hp),
        }
        for name, value in values.items():
            for array in value if isinstance(value, tuple) else (value,):
                array.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def interior(self) -> NDArray[np.float64]:
        return self.xi[1:-1]

    @property
    def radii(self) -> NDArray[np.float64]:
        """Radii r = xi**(1/N) of the nodes."""
        return self.xi ** (1.0 / self.N)

    def __repr__(self) -> str:
        return f"<Grid(n={self.n}, gamma={self.gamma}, N={self.N})>"


def build_grid(n: int, gamma: float, N: int) -> Grid:
    """Graded grid with n intervals, clustered at the origin for gamma > 1."""
    if n < MIN_NODES:
        raise ValueError(f"Grid needs n >= {MIN_NODES} intervals, got {n!r}")
    if not gamma >= 1:
        raise ValueError(f"Grading exponent gamma must be >= 1, got {gamma!r}")
    if N < 2:
        raise ValueError(f"Dimension N must be >= 2, got {N!r}")
    return Grid(n=int(n), gamma=float(gamma), N=int(N))


@dataclass(frozen=True, eq=False)
class State:
    """Accumulated density at every grid node at time t (read-only)."""

    U: NDArray[np.float64]
    t: float = 0.0

    def __post_init__(self):
        U = np.array(self.U, dtype=float)
        if U.ndim != 1 or U.size < 3:
            raise ValueError("State needs a 1-D array with at least three nodes")
        U.setflags(write=False)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "t", float(self.t))

    @property
    def level(self) -> float:
        return float(self.U[-1])

    def __repr__(self) -> str:
        return f"<State(t={self.t:.6g}, nodes={self.U.size}, level={self.level:.6g})>"


@dataclass(frozen=True, eq=False)
class TridiagonalMatrix:
    """Square tridiagonal matrix over interior unknowns.

    ``lower[i]`` multiplies unknown i-1 in row i, ``upper[i]`` unknown i+1;
    ``lower[0]`` and ``upper[-1]`` couple to boundary values and lie outside
    the matrix.
    """

    lower: NDArray[np.float64]
    diag: NDArray[np.float64]
    upper: NDArray[np.float64]

    @property
    def size(self) -> int:
        return self.diag.size

    def to_sparse(self) -> sparse.csr_array:
        return sparse.diags_array(
            [self.lower[1:], self.diag, self.upper[:-1]], offsets=[-1, 0, 1], format="csr"
        )

    def matvec(self, x: ArrayLike) -> NDArray[np.float64]:
        return self.to_sparse() @ np.asarray(x, dtype=float)

    def banded(self, scale: float = 1.0, shift: float = 0.0) -> NDArray[np.float64]:
        """(shift * I + scale * self) in the (1, 1) band layout of scipy.linalg.solve_banded."""
        ab = np.zeros((3, self.size))
        ab[0, 1:] = scale * self.upper[:-1]
        ab[1, :] = shift + scale * self.diag
        ab[2, :-1] = scale * self.lower[1:]
        return ab


def _check_dimension(grid: Grid, N: int):
    if N != grid.N:
        raise ValueError(f"Grid was built for N={grid.N}, got N={N}")


def drift_coefficient(
    U: ArrayLike, grid: Grid, eps: float = 0.0
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Drift coefficient b and its derivative db/dU at the interior nodes."""
    N = grid.N
    Ui = np.asarray(U, dtype=float)[1:-1]
    if eps == 0:
        alpha = 1.0 / (N - 1)
        positive = np.maximum(Ui, 0.0)
        b = grid.c1 * positive**alpha
        with np.errstate(divide="ignore", invalid="ignore"):
            db = np.where(
                Ui > POWER_CLAMP, grid.c1 * alpha * positive ** (alpha - 1.0), 0.0
            )
        return b, db
    s = grid.interior ** (2.0 / N - 2.0)
    p = (2.0 - N) / (2.0 * N - 2.0)
    q = eps + s * Ui * Ui
    b = N * q**p * Ui
    db = N * q ** (p - 1.0) * (eps + s * Ui * Ui / (N - 1))
    return b, db


def drift_weights(
    U: ArrayLike, grid: Grid, drift: DriftMode = "central", eps: float = 0.0
) -> tuple[NDArray[np.float64], ...]:
    """First-derivative stencil weights applied to the drift term.

    ``hybrid`` uses the forward difference where the cell Peclet number
    b h+ / (2 c2) exceeds one and the central stencil elsewhere.
    """
    if drift == "central":
        return grid.d1
    if drift == "upwind":
        return grid.up
    if drift != "hybrid":
        raise ValueError(f"Unknown drift mode {drift!r}, expected one of {DRIFT_MODES}")
    b, _ = drift_coefficient(U, grid, eps)
    upwind = b * grid.h[1:] / (2.0 * grid.c2) > 1.0
    return tuple(np.where(upwind, u, c) for u, c in zip(grid.up, grid.d1))


def _stencil(U: NDArray[np.float64], weights) -> NDArray[np.float64]:
    wm, wc, wp = weights
    return wm * U[:-2] + wc * U[1:-1] + wp * U[2:]


def _rhs(state: State, grid: Grid, eps: float, drift: DriftMode, weights) -> NDArray[np.float64]:
    U = state.U
    if U.size != grid.n + 1:
        raise ValueError(f"State has {U.size} nodes but grid has {grid.n + 1}")
    if weights is None:
        weights = drift_weights(U, grid, drift, eps)
    b, _ = drift_coefficient(U, grid, eps)
    return grid.c2 * _stencil(U, grid.d2) + b * _stencil(U, weights)


def _jacobian(state: State, grid: Grid, eps: float, drift: DriftMode, weights) -> TridiagonalMatrix:
    U = state.U
    if weights is None:
        weights = drift_weights(U, grid, drift, eps)
    b, db = drift_coefficient(U, grid, eps)
    wm, wc, wp = weights
    d2m, d2c, d2p = grid.d2
    return TridiagonalMatrix(
        lower=grid.c2 * d2m + b * wm,
        diag=grid.c2 * d2c + b * wc + db * _stencil(U, weights),
        upper=grid.c2 * d2p + b * wp,
    )


def apply_P_rhs(
    state: State, grid: Grid, N: int, drift: DriftMode = "central", weights=None
) -> NDArray[np.float64]:
    """Time derivative of U at the interior nodes for the unregularized operator.

    Args:
        state: Nodal values, boundary nodes included
        grid: Grid the state lives on
        N: Space dimension (must match the grid)
        drift: Stencil for the drift term
        weights: Precomputed drift weights; overrides ``drift`` when given

    Returns:
        Array of length n - 1
    """
    _check_dimension(grid, N)
    return _rhs(state, grid, 0.0, drift, weights)


def apply_regularized_rhs(
    state: State, grid: Grid, N: int, eps: float, drift: DriftMode = "central", weights=None
) -> NDArray[np.float64]:
    """Time derivative of U for the eps-regularized operator.

    Raises:
        ValueError: If eps is not positive.
    """
    _check_dimension(grid, N)
    if not eps > 0:
        raise ValueError(f"Regularization eps must be positive, got {eps!r}")
    return _rhs(state, grid, eps, drift, weights)


def jacobian_P(
    state: State, grid: Grid, N: int, drift: DriftMode = "central", weights=None
) -> TridiagonalMatrix:
    """Analytic Jacobian of apply_P_rhs with respect to the interior values."""
    _check_dimension(grid, N)
    return _jacobian(state, grid, 0.0, drift, weights)


def regularized_jacobian(
    state: State, grid: Grid, N: int, eps: float, drift: DriftMode = "central", weights=None
) -> TridiagonalMatrix:
    """Analytic Jacobian of apply_regularized_rhs."""
    _check_dimension(grid, N)
    if not eps > 0:
        raise ValueError(f"Regularization eps must be positive, got {eps!r}")
    return _jacobian(state, grid, eps, drift, weights)


def evaluate_rhs(
    state: State, grid: Grid, eps: float = 0.0, drift: DriftMode = "central", weights=None
) -> NDArray[np.float64]:
    """Right-hand side for either operator; eps = 0 selects the plain one."""
    if eps == 0:
        return apply_P_rhs(state, grid, grid.N, drift, weights)
    return apply_regularized_rhs(state, grid, grid.N, eps, drift, weights)


def evaluate_jacobian(
    state: State, grid: Grid, eps: float = 0.0, drift: DriftMode = "central", weights=None
) -> TridiagonalMatrix:
    if eps == 0:
        return jacobian_P(state, grid, grid.N, drift, weights)
    return regularized_jacobian(state, grid, grid.N, eps, drift, weights)


def steady_state_on_grid(grid: Grid, ell: float) -> State:
    """Steady profile with boundary level ell sampled at the nodes.

    ell = 0 gives the zero state.
    """
    if ell == 0:
        return State(U=np.zeros(grid.n + 1))
    U = np.asarray(w_lambda(grid.xi, lambda_from_level(ell, grid.N), grid.N))
    U[0] = 0.0
    U[-1] = ell
    return State(U=U)


def steady_residual_norm(grid: Grid, ell: float, drift: DriftMode = "central") -> float:
    """Sup-norm of the discrete operator on the sampled steady profile."""
    rhs = apply_P_rhs(steady_state_on_grid(grid, ell), grid, grid.N, drift)
    return float(np.max(np.abs(rhs)))


def scaling_identity_defect(U_fine: ArrayLike, n: int, gamma: float, N: int, drift: DriftMode = "central") -> float:
    """Relative defect of the discrete scaling invariance of the operator.

    ``U_fine`` holds values on the grid with 2n intervals. Its first n + 1
    nodes are rho times the nodes of the n-interval grid, rho = 2**(-gamma),
    so V(xi) = U(rho xi) lives on the coarse grid and the right-hand sides
    must satisfy RHS_fine = rho**(-2/N) RHS_coarse(V) on the shared nodes.
    """
    fine = build_grid(2 * n, gamma, N)
    coarse = build_grid(n, gamma, N)
    U_fine = np.asarray(U_fine, dtype=float)
    if U_fine.size != fine.n + 1:
        raise ValueError(f"Expected {fine.n + 1} fine-grid values, got {U_fine.size}")
    rho = 2.0 ** (-gamma)
    rhs_fine = apply_P_rhs(State(U=U_fine), fine, N, drift)[: n - 1]
    rhs_coarse = apply_P_rhs(State(U=U_fine[: n + 1]), coarse, N, drift)
    defect = np.max(np.abs(rhs_fine - rho ** (-2.0 / N) * rhs_coarse))
    scale = max(float(np.max(np.abs(rhs_fine))), np.finfo(float).tiny)
    logger.debug("Scaling identity defect %.3e (scale %.3e)", defect, scale)
    return float(defect / scale)
