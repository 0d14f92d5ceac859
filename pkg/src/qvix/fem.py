"""1D piecewise-linear finite elements with lumped mass on a uniform grid.

Functions are stored as nodal value vectors and loads as nodal densities
paired through the lumped mass weights, so order statements (u <= v,
f >= 0) reduce to plain nodal comparisons.  The assembled reaction-
diffusion matrix is a symmetric tridiagonal M-matrix for either boundary
condition; that structure is what makes the comparison principles used
by the solvers exact on the grid rather than asymptotic.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Literal

import numpy as np
from scipy.linalg import solveh_banded

BoundaryCondition = Literal["neumann", "dirichlet"]


class GridMismatchError(ValueError):
    """Operands live on different grids."""


class SingularOperatorError(ValueError):
    """The requested operator or reduced system has no unique solution."""


@dataclass(frozen=True)
class Grid:
    """Uniform grid with ``n_nodes`` nodes spanning a closed interval."""

    n_nodes: int
    span: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ValueError(f"need at least 2 nodes, got {self.n_nodes}")
        lo, hi = float(self.span[0]), float(self.span[1])
        if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
            raise ValueError(f"invalid interval {self.span!r}")
        object.__setattr__(self, "span", (lo, hi))

    @property
    def h(self) -> float:
        lo, hi = self.span
        return (hi - lo) / (self.n_nodes - 1)

    @property
    def measure(self) -> float:
        lo, hi = self.span
        return hi - lo

    @cached_property
    def nodes(self) -> np.ndarray:
        x = np.linspace(self.span[0], self.span[1], self.n_nodes)
        x.flags.writeable = False
        return x

    @cached_property
    def mass(self) -> np.ndarray:
        """Lumped mass weights: h at interior nodes, h/2 at the ends."""
        m = np.full(self.n_nodes, self.h)
        m[0] *= 0.5
        m[-1] *= 0.5
        m.flags.writeable = False
        return m


class _GridVector:
    """Immutable vector of per-node reals tied to a grid."""

    __slots__ = ("_grid", "_values")

    def __init__(self, grid: Grid, values):
        v = np.array(values, dtype=float, copy=True).reshape(-1)
        if v.shape != (grid.n_nodes,):
            raise ValueError(f"expected {grid.n_nodes} values, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite nodal values")
        v.flags.writeable = False
        self._grid = grid
        self._values = v

    @property
    def grid(self) -> Grid:
        return self._grid

    @property
    def values(self) -> np.ndarray:
        return self._values

    @classmethod
    def constant(cls, grid: Grid, value: float):
        return cls(grid, np.full(grid.n_nodes, float(value)))

    @classmethod
    def zeros(cls, grid: Grid):
        return cls(grid, np.zeros(grid.n_nodes))

    def _check_same(self, other):
        if type(other) is not type(self):
            raise TypeError(f"cannot combine {type(self).__name__} with {type(other).__name__}")
        if other.grid != self.grid:
            raise GridMismatchError("operands live on different grids")

    def __add__(self, other):
        self._check_same(other)
        return type(self)(self.grid, self.values + other.values)

    def __sub__(self, other):
        self._check_same(other)
        return type(self)(self.grid, self.values - other.values)

    def __neg__(self):
        return type(self)(self.grid, -self.values)

    def __mul__(self, scalar):
        return type(self)(self.grid, self.values * float(scalar))

    __rmul__ = __mul__

    def __repr__(self):
        return f"{type(self).__name__}(n={self.grid.n_nodes}, values={self.values!r})"


class NodalFunction(_GridVector):
    """Piecewise-linear function given by its nodal values."""


class DualElement(_GridVector):
    """Load given by nodal densities; pairs with functions through the lumped mass."""


class TridiagonalSpd:
    """Symmetric positive-definite tridiagonal matrix in banded storage."""

    __slots__ = ("diag", "upper")

    def __init__(self, diag, upper):
        d = np.array(diag, dtype=float, copy=True)
        u = np.array(upper, dtype=float, copy=True)
        if u.shape != (d.shape[0] - 1,):
            raise ValueError("upper band must have length n-1")
        d.flags.writeable = False
        u.flags.writeable = False
        self.diag = d
        self.upper = u

    @property
    def n(self) -> int:
        return self.diag.shape[0]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = self.diag * x
        y[:-1] += self.upper * x[1:]
        y[1:] += self.upper * x[:-1]
        return y

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.n == 1:  # banded LAPACK drivers reject 1x1 systems
            return np.asarray(rhs) / self.diag
        ab = np.zeros((2, self.n))
        ab[0, 1:] = self.upper
        ab[1, :] = self.diag
        try:
            return solveh_banded(ab, rhs)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded at assembly
            raise SingularOperatorError(str(exc)) from exc

    def submatrix(self, idx: np.ndarray) -> "TridiagonalSpd":
        """Principal submatrix on a sorted index set (still tridiagonal)."""
        d = self.diag[idx]
        adjacent = np.diff(idx) == 1
        u = np.where(adjacent, self.upper[idx[:-1]], 0.0)
        return TridiagonalSpd(d, u)

    def to_dense(self) -> np.ndarray:
        a = np.diag(self.diag)
        a += np.diag(self.upper, 1)
        a += np.diag(self.upper, -1)
        return a


def _pencil_extremes(grid: Grid, bc: str) -> tuple[float, float]:
    """Extreme eigenvalues of the stiffness/lumped-mass pencil (closed form)."""
    n, h = grid.n_nodes, grid.h
    if bc == "neumann":
        return 0.0, 4.0 / h**2
    m = n - 2  # interior nodes
    lo = (4.0 / h**2) * np.sin(np.pi / (2 * (m + 1))) ** 2
    hi = (4.0 / h**2) * np.sin(m * np.pi / (2 * (m + 1))) ** 2
    return lo, hi


@dataclass(frozen=True, eq=False)
class EllipticOperator:
    """Assembled form of ``-laplace + c*identity`` with one of two boundary conditions.

    ``c_a`` and ``c_b`` are the exact coercivity and boundedness constants
    of the discrete bilinear form with respect to the discrete H1 norm,
    obtained from the extreme eigenvalues of the stiffness/mass pencil.
    """

    grid: Grid
    c: float
    bc: str
    matrix: TridiagonalSpd
    c_a: float
    c_b: float

    def apply(self, u: NodalFunction) -> DualElement:
        """Image of ``u`` under the operator, as a nodal density."""
        if u.grid != self.grid:
            raise GridMismatchError("function grid does not match operator grid")
        return DualElement(self.grid, self.matrix.matvec(u.values) / self.grid.mass)

    def solve(self, f: DualElement) -> NodalFunction:
        """Solve ``A u = f``; for Dirichlet the boundary values are forced to zero."""
        if f.grid != self.grid:
            raise GridMismatchError("load grid does not match operator grid")
        rhs = self.grid.mass * f.values
        if self.bc == "dirichlet":
            rhs[0] = 0.0
            rhs[-1] = 0.0
        return NodalFunction(self.grid, self.matrix.solve(rhs))

    @property
    def boundary_nodes(self) -> np.ndarray:
        if self.bc == "dirichlet":
            return np.array([0, self.grid.n_nodes - 1])
        return np.array([], dtype=int)


def assemble_operator(grid: Grid, c: float, bc: BoundaryCondition) -> EllipticOperator:
    """Assemble the tridiagonal M-matrix for ``-laplace + c*identity``.

    Neumann requires c > 0 (otherwise constants are in the kernel);
    Dirichlet eliminates the two boundary rows/columns and needs at least
    one interior node.
    """
    if bc not in ("neumann", "dirichlet"):
        raise ValueError(f"unknown boundary condition {bc!r}")
    c = float(c)
    if c < 0:
        raise ValueError("reaction coefficient must be >= 0")
    if bc == "neumann" and c == 0.0:
        raise SingularOperatorError("Neumann with c = 0 is singular (constants in the kernel)")
    if bc == "dirichlet" and grid.n_nodes < 3:
        raise SingularOperatorError("Dirichlet needs at least one interior node")

    h = grid.h
    diag = np.full(grid.n_nodes, 2.0 / h)
    diag[0] = diag[-1] = 1.0 / h
    diag += c * grid.mass
    upper = np.full(grid.n_nodes - 1, -1.0 / h)
    if bc == "dirichlet":
        diag[0] = diag[-1] = 1.0
        upper[0] = upper[-1] = 0.0

    # M-matrix checks: positive diagonal, nonpositive off-diagonals, weak
    # row dominance.  These guarantee inverse positivity and hence the
    # discrete comparison principle.
    if np.any(upper > 0) or np.any(diag <= 0):
        raise AssertionError("assembled matrix lost the M-matrix sign pattern")
    row_sums = diag.copy()
    row_sums[:-1] += upper
    row_sums[1:] += upper
    if np.any(row_sums < -1e-12 * max(1.0, diag.max())):
        raise AssertionError("assembled matrix is not weakly diagonally dominant")

    rho_lo, rho_hi = _pencil_extremes(grid, bc)
    lam = lambda rho: (rho + c) / (rho + 1.0)
    c_a = min(lam(rho_lo), lam(rho_hi))
    c_b = max(lam(rho_lo), lam(rho_hi))
    return EllipticOperator(grid=grid, c=c, bc=bc, matrix=TridiagonalSpd(diag, upper),
                            c_a=c_a, c_b=c_b)


def positive_part(u: NodalFunction) -> NodalFunction:
    """Nodewise ``max(u, 0)``."""
    return NodalFunction(u.grid, np.maximum(u.values, 0.0))


def leq(u: NodalFunction, v: NodalFunction, tol: float = 0.0) -> bool:
    """True iff ``u <= v + tol`` at every node."""
    if u.grid != v.grid:
        raise GridMismatchError("cannot compare functions on different grids")
    return bool(np.all(u.values <= v.values + tol))


def h_norm(u: NodalFunction) -> float:
    """Lumped L2 norm."""
    return float(np.sqrt(np.dot(u.grid.mass, u.values**2)))


def seminorm(u: NodalFunction) -> float:
    """Discrete Dirichlet energy seminorm."""
    d = np.diff(u.values)
    return float(np.sqrt(np.dot(d, d) / u.grid.h))


def v_norm(u: NodalFunction) -> float:
    """Discrete H1 norm: sqrt(h_norm^2 + seminorm^2)."""
    d = np.diff(u.values)
    return float(np.sqrt(np.dot(u.grid.mass, u.values**2) + np.dot(d, d) / u.grid.h))


def pair(f: DualElement, v: NodalFunction) -> float:
    """Duality pairing through the lumped mass weights."""
    if f.grid != v.grid:
        raise GridMismatchError("pairing needs a common grid")
    return float(np.dot(f.grid.mass * f.values, v.values))


def _h1_matrix(grid: Grid) -> TridiagonalSpd:
    """Stiffness plus lumped mass: the Riesz matrix of the discrete H1 product."""
    h = grid.h
    diag = np.full(grid.n_nodes, 2.0 / h)
    diag[0] = diag[-1] = 1.0 / h
    diag += grid.mass
    upper = np.full(grid.n_nodes - 1, -1.0 / h)
    return TridiagonalSpd(diag, upper)


def riesz_representative(f: DualElement) -> NodalFunction:
    """Function z with (z, v)_H1 = <f, v> for all v."""
    z = _h1_matrix(f.grid).solve(f.grid.mass * f.values)
    return NodalFunction(f.grid, z)


def dual_norm(f: DualElement) -> float:
    """Dual norm via the H1 Riesz representative."""
    z = _h1_matrix(f.grid).solve(f.grid.mass * f.values)
    return float(np.sqrt(np.dot(f.grid.mass * f.values, z)))


def sup_embedding_constant(grid: Grid) -> float:
    """Largest ratio of sup norm to H1 norm over grid functions.

    Equals the square root of the largest diagonal entry of the inverse
    H1 matrix; computed densely, so intended for moderate grids.
    """
    a = _h1_matrix(grid)
    ab = np.zeros((2, grid.n_nodes))
    ab[0, 1:] = a.upper
    ab[1, :] = a.diag
    inv = solveh_banded(ab, np.eye(grid.n_nodes))
    return float(np.sqrt(np.max(np.diag(inv))))
