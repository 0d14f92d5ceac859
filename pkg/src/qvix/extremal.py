"""Monotone fixed-point iterations to the extremal solutions.

The solution set of the quasi-variational problem is bracketed by a
subsolution and a supersolution.  Iterating the obstacle solve from the
bottom of the bracket produces a nodally increasing sequence converging
to the minimal solution; iterating from the top a decreasing sequence to
the maximal one.  Monotonicity is asserted at every step: a violation
means the comparison principle broke, which on these M-matrix operators
signals a bug rather than roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import DualElement, EllipticOperator, NodalFunction, leq, v_norm
from .obstacle_maps import ObstacleMap
from .vi import SolverOptions, ViSolution, oracle_vi, solve_vi


class ExtremalIterationError(RuntimeError):
    """The monotone iteration aborted or terminated without a valid solution."""


@dataclass(frozen=True)
class IterateOptions:
    """Stopping rules for the outer fixed-point loop."""

    tol_fp: float = 1e-10
    max_outer: int = 500
    residual_tol: float = 1e-8
    monotone_tol: float = 1e-10
    vi: SolverOptions = field(default_factory=SolverOptions)
    oracle_check: bool = False


@dataclass(frozen=True)
class ExtremalRunReport:
    """History and diagnostics of one monotone run."""

    iterates: tuple[NodalFunction, ...]
    solution: NodalFunction
    monotone: bool
    n_iters: int
    final_step_vnorm: float
    qvi_residual: float
    which: str
    step_history: tuple[float, ...]
    residual_history: tuple[float, ...]
    min_delta_history: tuple[float, ...]


@dataclass(frozen=True)
class IntervalBracket:
    """Subsolution/supersolution pair enclosing the solutions of interest."""

    lower: NodalFunction
    upper: NodalFunction

    @classmethod
    def default(cls, A: EllipticOperator, f: DualElement,
                d: DualElement | None = None) -> "IntervalBracket":
        """Zero subsolution and the linear solve of f plus the positive part of d."""
        grid = A.grid
        lower = NodalFunction.zeros(grid)
        load = f
        if d is not None:
            load = f + DualElement(grid, np.maximum(d.values, 0.0))
        return cls(lower=lower, upper=A.solve(load))

    def validate(self, A: EllipticOperator, f: DualElement, omap: ObstacleMap,
                 tol: float = 1e-10, opts: SolverOptions | None = None) -> bool:
        if not leq(self.lower, self.upper, tol):
            return False
        return (check_subsolution(A, f, omap, self.lower, tol, opts)
                and check_supersolution(A, f, omap, self.upper, tol, opts))


def default_supersolution(A: EllipticOperator, f: DualElement,
                          d: DualElement) -> NodalFunction:
    """Linear solve of f + d; a supersolution for every source between f and f + d."""
    if np.any(d.values < 0):
        raise ValueError("direction must be nonnegative for the default supersolution")
    return A.solve(f + d)


def fixed_point_step(A: EllipticOperator, f: DualElement, omap: ObstacleMap,
                     u: NodalFunction, opts: SolverOptions | None = None,
                     active0=None) -> ViSolution:
    """One application of the solution map: obstacle solve at the obstacle induced by u."""
    return solve_vi(A, f, omap.evaluate(u), opts, active0=active0)


def check_subsolution(A: EllipticOperator, f: DualElement, omap: ObstacleMap,
                      u: NodalFunction, tol: float = 1e-10,
                      opts: SolverOptions | None = None) -> bool:
    """True iff u lies below its own fixed-point image."""
    return leq(u, fixed_point_step(A, f, omap, u, opts).u, tol)


def check_supersolution(A: EllipticOperator, f: DualElement, omap: ObstacleMap,
                        u: NodalFunction, tol: float = 1e-10,
                        opts: SolverOptions | None = None) -> bool:
    """True iff u lies above its own fixed-point image."""
    return leq(fixed_point_step(A, f, omap, u, opts).u, u, tol)


def _residual_parts(A: EllipticOperator, f: DualElement, u: NodalFunction,
                    phi: NodalFunction) -> float:
    lam = (f - A.apply(u)).values.copy()
    lam[A.boundary_nodes] = 0.0
    gap = phi.values - u.values
    feas = float(np.max(np.maximum(-gap, 0.0)))
    neg = float(np.max(np.maximum(-lam, 0.0)))
    comp = float(np.max(np.abs(lam * gap)))
    return max(feas, neg, comp)


def qvi_residual(A: EllipticOperator, f: DualElement, omap: ObstacleMap,
                 u: NodalFunction) -> float:
    """Max of feasibility violation, multiplier negativity, and complementarity defect."""
    return _residual_parts(A, f, u, omap.evaluate(u))


def _iterate(A: EllipticOperator, f: DualElement, omap: ObstacleMap,
             start: NodalFunction, which: str,
             opts: IterateOptions | None = None) -> ExtremalRunReport:
    if opts is None:
        opts = IterateOptions()
    if opts.oracle_check and A.grid.n_nodes > 14:
        raise ValueError("oracle cross-checks need a grid with at most 14 nodes")

    u = start
    phi = omap.evaluate(u)
    iterates = [u]
    steps: list[float] = []
    residuals = [_residual_parts(A, f, u, phi)]
    min_deltas: list[float] = []
    active0 = None
    converged = False

    for _ in range(opts.max_outer):
        sol = solve_vi(A, f, phi, opts.vi, active0=active0)
        if opts.oracle_check:
            ref = oracle_vi(A, f, phi)
            gap = float(np.max(np.abs(sol.u.values - ref.u.values)))
            if gap > 1e-9:
                raise ExtremalIterationError(
                    f"fast solve disagrees with the enumeration oracle by {gap:.3e}")
        delta = sol.u.values - u.values
        min_delta = float(np.min(delta))
        max_delta = float(np.max(delta))
        if which == "min" and min_delta < -opts.monotone_tol:
            raise ExtremalIterationError(
                f"increasing iteration lost monotonicity (worst step {min_delta:.3e}); "
                "the comparison principle is broken")
        if which == "max" and max_delta > opts.monotone_tol:
            raise ExtremalIterationError(
                f"decreasing iteration lost monotonicity (worst step {max_delta:.3e}); "
                "the comparison principle is broken")
        step = v_norm(sol.u - u)
        u = sol.u
        phi = omap.evaluate(u)
        active0 = sol.active_mask
        iterates.append(u)
        steps.append(step)
        residuals.append(_residual_parts(A, f, u, phi))
        min_deltas.append(min_delta)
        if step <= opts.tol_fp:
            converged = True
            break

    if not converged:
        tail = steps[-1] / steps[-2] if len(steps) >= 2 and steps[-2] > 0 else float("nan")
        raise ExtremalIterationError(
            f"no convergence within {opts.max_outer} outer iterations "
            f"(last step {steps[-1]:.3e}, tail contraction ratio {tail:.3f})")

    final_residual = residuals[-1]
    if final_residual > opts.residual_tol:
        raise ExtremalIterationError(
            f"converged iterate has residual {final_residual:.3e} "
            f"above tolerance {opts.residual_tol:.1e}")

    return ExtremalRunReport(
        iterates=tuple(iterates), solution=u, monotone=True, n_iters=len(steps),
        final_step_vnorm=steps[-1] if steps else 0.0, qvi_residual=final_residual,
        which=which, step_history=tuple(steps), residual_history=tuple(residuals),
        min_delta_history=tuple(min_deltas))


def iterate_min(A: EllipticOperator, f: DualElement, omap: ObstacleMap,
                start: NodalFunction, opts: IterateOptions | None = None) -> ExtremalRunReport:
    """Increasing iteration from a subsolution to the minimal solution."""
    return _iterate(A, f, omap, start, "min", opts)


def iterate_max(A: EllipticOperator, f: DualElement, omap: ObstacleMap,
                start: NodalFunction, opts: IterateOptions | None = None) -> ExtremalRunReport:
    """Decreasing iteration from a supersolution to the maximal solution."""
    return _iterate(A, f, omap, start, "max", opts)


def comparison_in_f(A: EllipticOperator, f: DualElement, d: DualElement, s: float,
                    omap: ObstacleMap, bracket: IntervalBracket, which: str = "min",
                    opts: IterateOptions | None = None, tol: float = 1e-8) -> bool:
    """Order of the extremal solutions under a signed shift of the source.

    For the minimal map the direction must be nonnegative and the solution
    can only move up; for the maximal map the direction must be nonpositive
    and the solution can only move down.
    """
    if which not in ("min", "max"):
        raise ValueError("which must be 'min' or 'max'")
    if which == "min":
        if np.any(d.values < 0):
            raise ValueError("minimal-map comparison needs a nonnegative direction")
        base = iterate_min(A, f, omap, bracket.lower, opts).solution
        pert = iterate_min(A, f + s * d, omap, bracket.lower, opts).solution
        return leq(base, pert, tol)
    if np.any(d.values > 0):
        raise ValueError("maximal-map comparison needs a nonpositive direction")
    base = iterate_max(A, f, omap, bracket.upper, opts).solution
    pert = iterate_max(A, f + s * d, omap, bracket.upper, opts).solution
    return leq(pert, base, tol)
