"""Obstacle-constrained solves for the assembled elliptic operator.

``solve_vi`` finds u <= phi with a nonnegative complementary multiplier
via a primal-dual active set loop.  On M-matrices the loop terminates in
finitely many set changes and the returned active set is exact, which is
what the sensitivity machinery relies on.  ``oracle_vi`` re-derives the
same solution by brute force over all active sets on small grids and is
the independent cross-check for the fast path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import (
    DualElement,
    EllipticOperator,
    GridMismatchError,
    NodalFunction,
    TridiagonalSpd,
)


class ViSolveError(RuntimeError):
    """The active set loop failed to deliver a valid complementarity point."""


@dataclass(frozen=True)
class SolverOptions:
    """Tolerances and limits for the active set loop."""

    tol: float = 1e-10
    max_iter: int = 200
    c_pdas: float = 1.0


@dataclass(frozen=True)
class ActiveSetPartition:
    """Per-node split of the coincidence set by multiplier support.

    ``strict`` nodes touch the obstacle with a positive multiplier,
    ``biactive`` nodes touch it with a vanishing multiplier, ``inactive``
    nodes are strictly below.  The union of strict and biactive is the
    discrete coincidence set.
    """

    inactive: np.ndarray
    strict: np.ndarray
    biactive: np.ndarray

    def __post_init__(self):
        for name in ("inactive", "strict", "biactive"):
            arr = np.asarray(getattr(self, name), dtype=int)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        n_total = self.inactive.size + self.strict.size + self.biactive.size
        merged = np.concatenate([self.inactive, self.strict, self.biactive])
        if np.unique(merged).size != n_total:
            raise ValueError("partition sets overlap")

    @property
    def coincidence(self) -> np.ndarray:
        return np.sort(np.concatenate([self.strict, self.biactive]))

    def labels(self, n_nodes: int) -> list[str]:
        out = ["I"] * n_nodes
        for i in self.strict:
            out[i] = "S"
        for i in self.biactive:
            out[i] = "B"
        return out


@dataclass(frozen=True)
class ViSolution:
    """Solution, multiplier and diagnostics of one obstacle solve."""

    u: NodalFunction
    lam: DualElement
    partition: ActiveSetPartition
    iterations: int
    residual: float
    active_mask: np.ndarray | None = field(repr=False, default=None)


def _partition_from(u_vals, phi_vals, lam_vals, tol_a, tol_lam) -> ActiveSetPartition:
    coincidence = (phi_vals - u_vals) <= tol_a
    strict = coincidence & (lam_vals > tol_lam)
    biactive = coincidence & ~strict
    return ActiveSetPartition(
        inactive=np.flatnonzero(~coincidence),
        strict=np.flatnonzero(strict),
        biactive=np.flatnonzero(biactive),
    )


def default_tol_active(phi: NodalFunction) -> float:
    return 1e-8 * (1.0 + float(np.max(np.abs(phi.values))))


def default_tol_multiplier(f: DualElement) -> float:
    return 1e-8 * (1.0 + float(np.max(np.abs(f.values))))


def classify_active(A: EllipticOperator, f: DualElement, u: NodalFunction,
                    phi: NodalFunction, tol_a: float | None = None,
                    tol_lam: float | None = None) -> ActiveSetPartition:
    """Classify nodes of a feasible point into inactive/strict/biactive."""
    if tol_a is None:
        tol_a = default_tol_active(phi)
    if tol_lam is None:
        tol_lam = default_tol_multiplier(f)
    lam = (f - A.apply(u)).values.copy()
    lam[A.boundary_nodes] = 0.0
    return _partition_from(u.values, phi.values, lam, tol_a, tol_lam)


def _pdas(matrix: TridiagonalSpd, mass, load, bound, eq_mask, eq_values,
          free_mask, opts: SolverOptions, active0=None):
    """Active set loop over nodes split into equality / obstacle / free roles.

    Equality nodes are pinned to prescribed values, free nodes carry the
    plain equation, obstacle nodes carry the upper bound with the usual
    complementarity update rule.  Returns nodal values, multiplier
    densities (zero on solved rows) and the iteration count.
    """
    n = load.shape[0]
    obstacle_mask = ~(eq_mask | free_mask)
    if active0 is None:
        active = np.zeros(n, dtype=bool)
    else:
        active = np.asarray(active0, dtype=bool) & obstacle_mask

    pin_values = np.where(eq_mask, eq_values, bound)
    u = np.zeros(n)
    lam = np.zeros(n)
    changed = 0
    for it in range(1, opts.max_iter + 1):
        pinned = eq_mask | active
        u = np.where(pinned, pin_values, 0.0)
        solve_idx = np.flatnonzero(~pinned)
        if solve_idx.size:
            coupling = matrix.matvec(u)
            sub = matrix.submatrix(solve_idx)
            u[solve_idx] = sub.solve(load[solve_idx] - coupling[solve_idx])
        lam = (load - matrix.matvec(u)) / mass
        lam[~pinned] = 0.0
        new_active = obstacle_mask & (lam + opts.c_pdas * (u - bound) > 0)
        if np.array_equal(new_active, active):
            return u, lam, it
        # degenerate nodes (multiplier at roundoff scale) can flip forever;
        # a vanishing KKT residual is just as final as a settled set
        if _kkt_residual(u, bound, lam, obstacle_mask) <= opts.tol:
            return u, lam, it
        changed = int(np.sum(new_active != active))
        active = new_active
    raise ViSolveError(
        f"active set did not settle within {opts.max_iter} iterations "
        f"(last change touched {changed} nodes)")


def _kkt_residual(u_vals, phi_vals, lam_vals, obstacle_mask) -> float:
    gap = phi_vals - u_vals
    feas = float(np.max(np.maximum(-gap[obstacle_mask], 0.0), initial=0.0))
    neg = float(np.max(np.maximum(-lam_vals[obstacle_mask], 0.0), initial=0.0))
    comp = float(np.max(np.abs(lam_vals[obstacle_mask] * gap[obstacle_mask]), initial=0.0))
    return max(feas, neg, comp)


def solve_vi(A: EllipticOperator, f: DualElement, phi: NodalFunction,
             opts: SolverOptions | None = None,
             active0: np.ndarray | None = None) -> ViSolution:
    """Solve the upper-obstacle problem for the given load and obstacle.

    Returns the unique nodal solution of the complementarity system
    together with the multiplier density f - Au and the active set
    partition.  A non-converged loop or an invalid terminal point raises,
    never returns silently.
    """
    if opts is None:
        opts = SolverOptions()
    grid = A.grid
    if f.grid != grid or phi.grid != grid:
        raise GridMismatchError("load/obstacle grid does not match operator grid")

    eq_mask = np.zeros(grid.n_nodes, dtype=bool)
    if A.bc == "dirichlet":
        eq_mask[[0, -1]] = True
        if np.any(phi.values[[0, -1]] < -opts.tol):
            raise ViSolveError("obstacle below zero at a Dirichlet boundary node: empty constraint set")
    free_mask = np.zeros(grid.n_nodes, dtype=bool)
    load = grid.mass * f.values
    load[eq_mask] = 0.0

    u_vals, lam_vals, iters = _pdas(A.matrix, grid.mass, load, phi.values,
                                    eq_mask, np.zeros(grid.n_nodes), free_mask,
                                    opts, active0=active0)
    lam_vals = lam_vals.copy()
    lam_vals[eq_mask] = 0.0
    residual = _kkt_residual(u_vals, phi.values, lam_vals, ~eq_mask)
    if residual > opts.tol:
        raise ViSolveError(f"terminal complementarity residual {residual:.3e} exceeds {opts.tol:.1e}")

    partition = _partition_from(u_vals, phi.values, lam_vals,
                                default_tol_active(phi), default_tol_multiplier(f))
    active_mask = np.zeros(grid.n_nodes, dtype=bool)
    active_mask[partition.coincidence] = True
    return ViSolution(u=NodalFunction(grid, u_vals),
                      lam=DualElement(grid, lam_vals),
                      partition=partition, iterations=iters, residual=residual,
                      active_mask=active_mask)


def oracle_vi(A: EllipticOperator, f: DualElement, phi: NodalFunction,
              max_nodes: int = 14) -> ViSolution:
    """Brute-force reference solve: enumerate every active set.

    For each candidate set the equality system (u = phi on the set, the
    plain equation off it) is solved densely; the unique candidate that is
    feasible with a nonnegative multiplier is returned.  Complexity is
    2^n, so the grid is capped at ``max_nodes`` nodes.
    """
    grid = A.grid
    n = grid.n_nodes
    if n > max_nodes:
        raise ValueError(f"oracle enumeration capped at {max_nodes} nodes, got {n}")
    if f.grid != grid or phi.grid != grid:
        raise GridMismatchError("load/obstacle grid does not match operator grid")

    dense = A.matrix.to_dense()
    mass = grid.mass
    load = mass * f.values
    eligible = np.arange(n)
    if A.bc == "dirichlet":
        load[[0, -1]] = 0.0
        eligible = np.arange(1, n - 1)
    k = eligible.size
    tol = 1e-11 * (1.0 + float(np.max(np.abs(phi.values))) + float(np.max(np.abs(f.values))))

    codes = np.arange(2 ** k)
    masks = ((codes[:, None] >> np.arange(k)) & 1).astype(bool)  # (2^k, k)
    systems = np.broadcast_to(dense, (2 ** k, n, n)).copy()
    rhs = np.broadcast_to(load, (2 ** k, n)).copy()
    for pos, node in enumerate(eligible):
        sel = masks[:, pos]
        systems[sel, node, :] = 0.0
        systems[sel, node, node] = 1.0
        rhs[sel, node] = phi.values[node]

    candidates = np.linalg.solve(systems, rhs[..., None])[..., 0]
    lam_all = (load[None, :] - candidates @ dense.T) / mass[None, :]
    # zero out rows that were solved as equations (roundoff only)
    active_full = np.zeros((2 ** k, n), dtype=bool)
    active_full[:, eligible] = masks
    lam_all = np.where(active_full, lam_all, 0.0)

    feasible = np.all(candidates <= phi.values[None, :] + tol, axis=1)
    complementary = np.all(lam_all >= -tol / np.min(mass) * np.max(mass), axis=1)
    ok = np.flatnonzero(feasible & complementary & np.all(np.isfinite(candidates), axis=1))
    if ok.size == 0:
        raise ViSolveError("oracle found no feasible complementary active set")

    pick = int(ok[0])
    u_vals = candidates[pick]
    lam_vals = lam_all[pick]
    partition = _partition_from(u_vals, phi.values, lam_vals,
                                default_tol_active(phi), default_tol_multiplier(f))
    residual = _kkt_residual(u_vals, phi.values, lam_vals,
                             ~np.isin(np.arange(n), A.boundary_nodes))
    active_mask = np.zeros(n, dtype=bool)
    active_mask[partition.coincidence] = True
    return ViSolution(u=NodalFunction(grid, u_vals), lam=DualElement(grid, lam_vals),
                      partition=partition, iterations=pick + 1, residual=residual,
                      active_mask=active_mask)


def check_comparison(A: EllipticOperator, f1: DualElement, f2: DualElement,
                     phi1: NodalFunction, phi2: NodalFunction,
                     tol: float = 1e-10, opts: SolverOptions | None = None) -> bool:
    """Solve both problems and test the comparison ordering of the solutions.

    Requires the ordered data f1 <= f2 and phi1 <= phi2; the result should
    always be True for the assembled M-matrix operators.
    """
    if np.any(f1.values > f2.values):
        raise ValueError("precondition violated: f1 <= f2 required")
    if np.any(phi1.values > phi2.values):
        raise ValueError("precondition violated: phi1 <= phi2 required")
    u1 = solve_vi(A, f1, phi1, opts).u
    u2 = solve_vi(A, f2, phi2, opts).u
    return bool(np.all(u1.values <= u2.values + tol))
