"""Directional derivatives of the extremal solution maps in the source term.

At a converged extremal solution, the admissible variations form a cone
fixed by the active set partition: variations vanish where the multiplier
is positive, are sign-constrained where state and obstacle touch with a
vanishing multiplier, and are free elsewhere.  The derivative solves a
quasi-variational problem over that cone shifted by the obstacle map's
derivative; it is computed here as the monotone limit of cone-constrained
obstacle solves and validated against one-sided difference quotients of
the extremal runs, which are warm-started at the base solution exactly as
the underlying selection mechanism prescribes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .extremal import IntervalBracket, IterateOptions, check_subsolution, \
    check_supersolution, iterate_max, iterate_min, qvi_residual
from .fem import DualElement, EllipticOperator, NodalFunction, v_norm
from .obstacle_maps import ObstacleMap
from .vi import ActiveSetPartition, SolverOptions, _pdas, classify_active, \
    default_tol_multiplier


class ConeError(ValueError):
    """The base point does not support a meaningful derivative cone."""


class DerivativeSolveError(RuntimeError):
    """The derivative iteration or its validation failed."""


@dataclass(frozen=True)
class CriticalConeData:
    """Everything needed to pose the derivative problem at a base solution."""

    base: NodalFunction
    partition: ActiveSetPartition
    lam: DualElement
    deriv_map: Callable[[NodalFunction], NodalFunction]
    operator: EllipticOperator


@dataclass(frozen=True)
class AlphaOptions:
    """Stopping rules for the derivative fixed-point iteration."""

    step_tol: float = 1e-11
    residual_tol: float = 1e-9
    max_iter: int = 100
    monotone_tol: float = 1e-10
    vi: SolverOptions = SolverOptions()


@dataclass(frozen=True)
class DerivativeReport:
    """Derivative iterate history plus the difference-quotient validation table."""

    alpha: NodalFunction
    alpha_iterates: tuple[NodalFunction, ...]
    monotone: bool
    which: str
    qvi_residual: float
    fd_table: tuple[tuple[float, float], ...] = ()
    observed_order: float | None = None
    fd_monotone: bool | None = None
    biactive_warning: bool = False
    base: NodalFunction | None = None


def build_cone(A: EllipticOperator, f: DualElement, omap: ObstacleMap,
               base: NodalFunction, residual_tol: float = 1e-8) -> CriticalConeData:
    """Classify the base solution and package the derivative cone data.

    Refuses base points whose residual is too large for the active set to
    be trustworthy, and base points whose multiplier leaks off the strict
    set beyond classification noise.
    """
    res = qvi_residual(A, f, omap, base)
    if res > residual_tol:
        raise ConeError(f"base residual {res:.3e} too large to classify the active set")
    phi = omap.evaluate(base)
    partition = classify_active(A, f, base, phi)
    lam_vals = (f - A.apply(base)).values.copy()
    lam_vals[A.boundary_nodes] = 0.0
    tol_lam = default_tol_multiplier(f)
    if partition.inactive.size:
        leak = float(np.max(np.abs(lam_vals[partition.inactive])))
        if leak > 10 * tol_lam:
            raise ConeError(f"multiplier of size {leak:.3e} off the coincidence set")
    return CriticalConeData(base=base, partition=partition,
                            lam=DualElement(A.grid, lam_vals),
                            deriv_map=lambda w: omap.derivative_action(base, w),
                            operator=A)


def _cone_solve(cone: CriticalConeData, load: np.ndarray, shift_vals: np.ndarray,
                opts: SolverOptions, active0=None):
    """Obstacle solve over the cone shifted by the given bound values.

    Strict nodes are pinned to the shift, biactive nodes carry it as an
    upper bound, inactive nodes are unconstrained.
    """
    A = cone.operator
    n = A.grid.n_nodes
    eq_mask = np.zeros(n, dtype=bool)
    eq_mask[cone.partition.strict] = True
    eq_values = np.where(eq_mask, shift_vals, 0.0)
    bnd = A.boundary_nodes
    if bnd.size:
        eq_mask[bnd] = True
        eq_values[bnd] = 0.0
    free_mask = np.zeros(n, dtype=bool)
    free_mask[cone.partition.inactive] = True
    free_mask &= ~eq_mask
    ld = load.copy()
    ld[bnd] = 0.0
    vals, lam, _ = _pdas(A.matrix, A.grid.mass, ld, shift_vals, eq_mask, eq_values,
                         free_mask, opts, active0=active0)
    return NodalFunction(A.grid, vals), lam


def derivative_qvi_residual(cone: CriticalConeData, alpha: NodalFunction,
                            d: DualElement) -> float:
    """Fixed-point residual of the derivative problem at alpha."""
    A = cone.operator
    shift = cone.deriv_map(alpha).values
    mu = (d - A.apply(alpha)).values.copy()
    mu[A.boundary_nodes] = 0.0
    gap = shift - alpha.values

    p = cone.partition
    parts = [0.0]
    if p.strict.size:
        parts.append(float(np.max(np.abs(gap[p.strict]))))
    if p.biactive.size:
        parts.append(float(np.max(np.maximum(-gap[p.biactive], 0.0))))
        parts.append(float(np.max(np.maximum(-mu[p.biactive], 0.0))))
        parts.append(float(np.max(np.abs(mu[p.biactive] * gap[p.biactive]))))
    inactive = np.setdiff1d(p.inactive, A.boundary_nodes, assume_unique=False)
    if inactive.size:
        parts.append(float(np.max(np.abs(mu[inactive]))))
    return max(parts)


def solve_derivative_qvi(cone: CriticalConeData, d: DualElement, which: str = "min",
                         opts: AlphaOptions | None = None) -> DerivativeReport:
    """Monotone iteration of cone solves converging to the directional derivative.

    The first iterate solves over the unshifted cone; each subsequent one
    shifts the cone by the map derivative at the previous iterate.  For
    the minimal map the direction must be nonnegative and the iterates
    increase; for the maximal map the direction must be nonpositive and
    they decrease.
    """
    if opts is None:
        opts = AlphaOptions()
    if which not in ("min", "max"):
        raise ValueError("which must be 'min' or 'max'")
    if which == "min" and np.any(d.values < 0):
        raise ValueError("minimal-map derivative needs a nonnegative direction")
    if which == "max" and np.any(d.values > 0):
        raise ValueError("maximal-map derivative needs a nonpositive direction")

    A = cone.operator
    load = A.grid.mass * d.values
    zero_shift = np.zeros(A.grid.n_nodes)
    alpha, _ = _cone_solve(cone, load, zero_shift, opts.vi)
    iterates = [alpha]
    converged = False
    for _ in range(opts.max_iter):
        shift = cone.deriv_map(alpha).values
        alpha_next, _ = _cone_solve(cone, load, shift, opts.vi)
        delta = alpha_next.values - alpha.values
        if which == "min" and float(np.min(delta)) < -opts.monotone_tol:
            raise DerivativeSolveError("derivative iterates lost their increasing order")
        if which == "max" and float(np.max(delta)) > opts.monotone_tol:
            raise DerivativeSolveError("derivative iterates lost their decreasing order")
        step = v_norm(alpha_next - alpha)
        alpha = alpha_next
        iterates.append(alpha)
        if step <= opts.step_tol:
            converged = True
            break
    if not converged:
        raise DerivativeSolveError(
            f"derivative iteration did not settle within {opts.max_iter} rounds")

    residual = derivative_qvi_residual(cone, alpha, d)
    if residual > opts.residual_tol:
        raise DerivativeSolveError(
            f"derivative fixed-point residual {residual:.3e} above {opts.residual_tol:.1e}")
    return DerivativeReport(alpha=alpha, alpha_iterates=tuple(iterates), monotone=True,
                            which=which, qvi_residual=residual, base=cone.base)


def alpha_monotonicity_check(report: DerivativeReport, tol: float = 1e-10) -> bool:
    """Recheck the nodal ordering of the derivative iterates from the report."""
    for prev, curr in zip(report.alpha_iterates, report.alpha_iterates[1:]):
        delta = curr.values - prev.values
        if report.which == "min" and float(np.min(delta)) < -tol:
            return False
        if report.which == "max" and float(np.max(delta)) > tol:
            return False
    return True


def _observed_order(fd_table, floor) -> float | None:
    usable = [(s, e) for s, e in fd_table if e > max(floor(s), 1e-13)]
    if len(usable) < 2:
        return None
    ss = np.log([s for s, _ in usable])
    ee = np.log([e for _, e in usable])
    return float(np.polyfit(ss, ee, 1)[0])


def fd_validate(A: EllipticOperator, f: DualElement, d: DualElement,
                omap: ObstacleMap, bracket: IntervalBracket, which: str,
                s_list=(1e-1, 1e-2, 1e-3, 1e-4), fd_tol: float | None = None,
                iterate_opts: IterateOptions | None = None,
                alpha_opts: AlphaOptions | None = None) -> DerivativeReport:
    """Compare the derivative against one-sided difference quotients.

    Each quotient re-runs the extremal iteration at the shifted source,
    warm-started at the base solution (the selection the derivative
    describes).  Quotient errors must shrink with the step, up to a noise
    floor on instances where the remainder vanishes identically; on
    biactive instances a non-shrinking table is flagged instead of raised.
    """
    s_arr = [float(s) for s in s_list]
    if not s_arr or any(s <= 0 for s in s_arr):
        raise ValueError("s_list must contain positive steps")
    if any(b >= a for a, b in zip(s_arr, s_arr[1:])):
        raise ValueError("s_list must be strictly decreasing")
    if min(s_arr) < 1e-5:
        raise ValueError("steps below 1e-5 drown in solver noise; raise the smallest step")
    if which not in ("min", "max"):
        raise ValueError("which must be 'min' or 'max'")

    if which == "min":
        base_report = iterate_min(A, f, omap, bracket.lower, iterate_opts)
        if not check_supersolution(A, f + s_arr[0] * d, omap, bracket.upper):
            raise ValueError("bracket invalid: upper bound is not a supersolution at f + max(s) d")
    else:
        base_report = iterate_max(A, f, omap, bracket.upper, iterate_opts)
        if not check_subsolution(A, f + s_arr[0] * d, omap, bracket.lower):
            raise ValueError("bracket invalid: lower bound is not a subsolution at f + max(s) d")
    base = base_report.solution

    cone = build_cone(A, f, omap, base)
    report = solve_derivative_qvi(cone, d, which, alpha_opts)
    alpha = report.alpha

    run = iterate_min if which == "min" else iterate_max
    fd_table = []
    for s in s_arr:
        pert = run(A, f + s * d, omap, base, iterate_opts).solution
        quotient = (1.0 / s) * (pert - base)
        fd_table.append((s, v_norm(quotient - alpha)))

    # Entries below the floor carry no information: the quotient of two
    # solves each accurate to tol_fp cannot resolve errors under
    # ~tol_fp/s, so such entries neither confirm nor violate the decrease.
    tol_fp = (iterate_opts or IterateOptions()).tol_fp
    noise_scale = 10.0 * tol_fp * (1.0 + v_norm(base))
    alpha_floor = 1e-9 * (1.0 + v_norm(alpha))
    floor = lambda s: max(alpha_floor, noise_scale / s)
    fd_monotone = all(eb <= max(ea, floor(sb))
                      for (_, ea), (sb, eb) in zip(fd_table, fd_table[1:]))
    biactive = cone.partition.biactive.size > 0
    if not fd_monotone and not biactive:
        raise DerivativeSolveError(
            "quotient error table does not shrink on a strictly complementary instance")
    if fd_tol is None:
        fd_tol = 1e-3 * (1.0 + v_norm(alpha))
    final_err = fd_table[-1][1]
    if final_err > fd_tol:
        raise DerivativeSolveError(
            f"final quotient error {final_err:.3e} above tolerance {fd_tol:.3e}")

    return DerivativeReport(alpha=alpha, alpha_iterates=report.alpha_iterates,
                            monotone=report.monotone, which=which,
                            qvi_residual=report.qvi_residual,
                            fd_table=tuple(fd_table),
                            observed_order=_observed_order(fd_table, floor),
                            fd_monotone=fd_monotone,
                            biactive_warning=(not fd_monotone and biactive),
                            base=base)
