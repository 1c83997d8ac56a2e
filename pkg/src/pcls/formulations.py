"""The three interchangeable QP statements of the shape-restricted fit.

* original: variables (eps, alpha, beta) with all pairwise hyperplane
  inequalities stated explicitly;
* penalized primal: stacked variables psi = (slopes, slacks) with the
  pairwise constraints folded into a quadratic penalty, leaving only sign
  constraints;
* penalized dual: a separable QP in n^2 variables whose constraint
  multipliers are exactly the stacked primal variables.

All three recover the same residual vector; the recovery helpers
cross-check the algebraic routes against each other and refuse to return
silently inconsistent fits.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import metrics
from .matrices import SQRT2, AssembledProblem, assemble
from .model import (
    Curvature,
    Dataset,
    FitDiagnostics,
    FitResult,
    Formulation,
    ShapeSpec,
    StackedVariables,
    extract_hyperplanes,
    scale_of,
)
from .qp import QpProblem, QpSolution, SolverConfig, SolveStatus, solve

FormulationKind = Formulation


class NumericalInstabilityError(RuntimeError):
    """The two SSR recovery routes disagree beyond tolerance."""


class DualRecoveryError(RuntimeError):
    """Multiplier-path and first-block residual recoveries disagree."""


@dataclass
class DualSolution:
    """Solution of the penalized dual: the w vector plus the constraint
    multipliers, which correspond to the stacked primal variables."""

    w: np.ndarray
    multipliers: np.ndarray

    @classmethod
    def from_qp(cls, sol: QpSolution) -> "DualSolution":
        return cls(w=sol.x, multipliers=sol.y_mult)


def build_original(dataset: Dataset, shape: ShapeSpec) -> QpProblem:
    """State the fit as a QP over (eps, alpha, beta) with explicit constraints.

    Variable layout: eps_0..eps_{n-1}, alpha_0..alpha_{n-1}, then beta row
    by row (beta[i, p] at 2n + i*m + p).  Rows: n fitting equalities, then
    the n(n-1) pairwise inequalities in (i, j) order, then slope sign rows
    when monotone.  Convex curvature flips the pairwise inequality direction.
    """
    n, m = dataset.n, dataset.m
    nv = 2 * n + n * m
    rows, cols, vals = [], [], []
    lower, upper = [], []
    r = 0
    # fitting equalities: eps_i + alpha_i + x_i . beta_i = y_i
    for i in range(n):
        rows += [r, r]
        cols += [i, n + i]
        vals += [1.0, 1.0]
        for p in range(m):
            rows.append(r)
            cols.append(2 * n + i * m + p)
            vals.append(dataset.x[i, p])
        lower.append(dataset.y[i])
        upper.append(dataset.y[i])
        r += 1
    # pairwise rows: alpha_i + x_i.beta_i - alpha_j - x_i.beta_j
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            rows += [r, r]
            cols += [n + i, n + j]
            vals += [1.0, -1.0]
            for p in range(m):
                rows += [r, r]
                cols += [2 * n + i * m + p, 2 * n + j * m + p]
                vals += [dataset.x[i, p], -dataset.x[i, p]]
            if shape.curvature is Curvature.CONCAVE:
                lower.append(-np.inf)
                upper.append(0.0)
            else:
                lower.append(0.0)
                upper.append(np.inf)
            r += 1
    if shape.monotone:
        for i in range(n):
            for p in range(m):
                rows.append(r)
                cols.append(2 * n + i * m + p)
                vals.append(1.0)
                lower.append(0.0)
                upper.append(np.inf)
                r += 1
    a = sp.csc_matrix((vals, (rows, cols)), shape=(r, nv))
    p_mat = sp.diags([1.0] * n + [0.0] * (n + n * m), format="csc")
    return QpProblem(p=p_mat, q=np.zeros(nv), a=a, lower=np.array(lower), upper=np.array(upper))


def recover_from_original(
    dataset: Dataset, shape: ShapeSpec, sol: QpSolution
) -> FitResult:
    """Read the fit straight off an original-formulation solution."""
    n, m = dataset.n, dataset.m
    eps = sol.x[:n]
    alpha = sol.x[n : 2 * n]
    beta = sol.x[2 * n :].reshape(n, m)
    planes = alpha[None, :] + dataset.x @ beta.T
    own = np.diag(planes)
    slacks = planes - own[:, None]
    if shape.curvature is Curvature.CONVEX:
        slacks = -slacks
    diag = FitDiagnostics(
        solve_seconds=sol.solve_seconds,
        solver_status=sol.status.value,
        iterations=sol.iterations,
    )
    fit = FitResult(
        alpha=alpha, beta=beta, eps=eps, slacks=slacks,
        ssr=float(eps @ eps), formulation=Formulation.ORIGINAL, diagnostics=diag,
    )
    _finalize_diagnostics(fit, dataset, shape)
    return fit


def _diagonal_slack_slots(n: int, m: int) -> np.ndarray:
    return m * n + np.arange(n) * n + np.arange(n)


def build_penalized_primal(ap: AssembledProblem) -> QpProblem:
    """Penalized problem over psi: min 0.5 psi'H psi + 2c psi, sign constraints only.

    H = 2Q + big_m^2 V.  Monotone fits constrain every component of psi;
    without monotonicity the slope block (first m*n slots) is free and only
    the slacks stay non-negative.  The diagonal slacks are pinned at zero:
    the eliminated problem's i = j rows force them there, and leaving the
    slots free creates a flat direction (a joint shift of all diagonal
    slacks against the residual mean) that solvers cannot resolve and that
    would leave the residual sum at solver-noise level.
    """
    width = ap.width
    lower = np.zeros(width)
    if not ap.shape.monotone:
        lower[: ap.m * ap.n] = -np.inf
    upper = np.full(width, np.inf)
    upper[_diagonal_slack_slots(ap.n, ap.m)] = 0.0
    return QpProblem(
        p=ap.penalized_quadratic(),
        q=2.0 * ap.c,
        a=sp.identity(width, format="csc"),
        lower=lower,
        upper=upper,
    )


def build_penalized_dual(ap: AssembledProblem) -> QpProblem:
    """Separable dual over w: min 0.5 w'w subject to F'w + 2c' >= 0.

    Without monotonicity the slope rows (first m*n of the mn + n^2
    constraint rows) become equalities, mirroring the free slope signs of
    the primal.  Rows belonging to the pinned diagonal slacks are dropped
    (left unbounded): their primal variables are fixed at zero.
    """
    width = ap.width
    nw = ap.n * ap.n
    lower = -2.0 * ap.c
    upper = np.full(width, np.inf)
    if not ap.shape.monotone:
        upper[: ap.m * ap.n] = lower[: ap.m * ap.n]
    diag = _diagonal_slack_slots(ap.n, ap.m)
    lower[diag] = -np.inf
    upper[diag] = np.inf
    return QpProblem(
        p=sp.identity(nw, format="csc"),
        q=np.zeros(nw),
        a=ap.f.T.tocsc(),
        lower=lower,
        upper=upper,
    )


def _constrained_slots_ok(ap: AssembledProblem, psi: np.ndarray) -> bool:
    start = 0 if ap.shape.monotone else ap.m * ap.n
    floor = -1e-4 * (1.0 + float(np.max(np.abs(psi), initial=0.0)))
    return float(np.min(psi[start:], initial=0.0)) >= floor


def recover_from_primal(
    ap: AssembledProblem,
    psi,
    dataset: Dataset,
    sol: QpSolution | None = None,
    formulation: Formulation = Formulation.PENALIZED_PRIMAL,
) -> FitResult:
    """Turn a stacked solution into a fit, cross-checking the two SSR routes.

    Residuals come from the first-block identity; the SSR is computed both
    as their square sum and through the quadratic form psi'Q psi + 2c psi +
    gamma.  Disagreement beyond 1e-4 relative is a big-M instability and
    raises rather than returning a silently wrong fit.
    """
    vec = psi.psi if isinstance(psi, StackedVariables) else np.asarray(psi, dtype=float)
    if vec.shape[0] != ap.width:
        raise ValueError(f"psi has length {vec.shape[0]}, expected {ap.width}")
    if not _constrained_slots_ok(ap, vec):
        raise ValueError("psi violates its sign constraints beyond solver tolerance")

    eps_or = ap.residuals_from_psi(vec)
    ssr = float(eps_or @ eps_or)
    ssr_quad = ap.ssr_quadratic(vec)
    denom = max(ssr, 1e-10 * (1.0 + ap.gamma))
    if abs(ssr_quad - ssr) / denom > 1e-4:
        raise NumericalInstabilityError(
            f"SSR recovery mismatch ({ssr_quad:.6e} vs {ssr:.6e}) at big_m={ap.big_m:g}; "
            "reduce the penalty weight"
        )

    stacked = StackedVariables(vec, n=ap.n, m=ap.m)
    alpha_or, beta = extract_hyperplanes(ap.oriented, stacked, eps_or)
    slacks = stacked.slacks()
    if ap.convex_flip:
        alpha, eps = -alpha_or, -eps_or
    else:
        alpha, eps = alpha_or, eps_or

    fit_metrics = metrics.compute_fit_metrics(ap, vec)
    diag = FitDiagnostics(
        r2=1.0 - ssr / ap.gamma if ap.gamma > 0 else 1.0,
        r2_aug=fit_metrics.r2_aug,
        big_m_used=ap.big_m,
        ssr_quadratic_form=ssr_quad,
    )
    if sol is not None:
        diag.solve_seconds = sol.solve_seconds
        diag.solver_status = sol.status.value
        diag.iterations = sol.iterations
    fit = FitResult(
        alpha=alpha, beta=beta, eps=eps, slacks=slacks,
        ssr=ssr, formulation=formulation, diagnostics=diag,
    )
    _finalize_diagnostics(fit, dataset, ap.shape)
    return fit


def recover_from_dual(
    ap: AssembledProblem,
    sol: DualSolution,
    dataset: Dataset,
    qp_sol: QpSolution | None = None,
) -> FitResult:
    """Recover a fit from the dual: multipliers give psi, w gives a cross-check.

    The first n components of w reproduce the residuals directly as
    ``eps_i = y_i - ybar - w_1i / sqrt(2)``; both routes must agree to
    1e-5 * scale(y) or the dual solve is deemed inaccurate.
    """
    psi = np.asarray(sol.multipliers, dtype=float)
    fit = recover_from_primal(
        ap, psi, dataset, sol=qp_sol, formulation=Formulation.PENALIZED_DUAL
    )
    eps_cross = ap.y_centered - np.asarray(sol.w[: ap.n], dtype=float) / SQRT2
    eps_or = -fit.eps if ap.convex_flip else fit.eps
    gap = float(np.max(np.abs(eps_or - eps_cross)))
    tol = 1e-5 * scale_of(dataset.y)
    if gap > tol:
        raise DualRecoveryError(
            f"dual recovery paths disagree by {gap:.3e} (tolerance {tol:.3e}); "
            "the dual solve is not accurate enough"
        )
    fit.diagnostics.dual_crosscheck_gap = gap
    return fit


def _finalize_diagnostics(fit: FitResult, dataset: Dataset, shape: ShapeSpec) -> None:
    report = metrics.violation_report(fit, dataset, shape)
    fit.diagnostics.max_constraint_violation = report.max_violation
    if np.isnan(fit.diagnostics.r2):
        total = metrics.sst(dataset.y)
        fit.diagnostics.r2 = 1.0 - fit.ssr / total if total > 0 else 1.0


def fit_formulation(
    dataset: Dataset,
    shape: ShapeSpec,
    kind: Formulation,
    big_m: float = 100.0,
    config: SolverConfig | None = None,
    ap: AssembledProblem | None = None,
) -> FitResult:
    """Build, solve and recover one formulation end to end.

    ``ap`` short-circuits assembly for repeated solves of the same data at
    different penalty weights.
    """
    config = config or SolverConfig()
    if kind is Formulation.ORIGINAL:
        prob = build_original(dataset, shape)
        sol = solve(prob, config)
        _require_solution(sol)
        return recover_from_original(dataset, shape, sol)

    if ap is None:
        ap = assemble(dataset, shape, big_m)
    elif ap.big_m != big_m:
        ap = ap.with_big_m(big_m)
    if kind is Formulation.PENALIZED_PRIMAL:
        prob = build_penalized_primal(ap)
        sol = solve(prob, config)
        _require_solution(sol)
        return recover_from_primal(ap, sol.x, dataset, sol=sol)
    if kind is Formulation.PENALIZED_DUAL:
        prob = build_penalized_dual(ap)
        sol = solve(prob, config)
        _require_solution(sol)
        return recover_from_dual(ap, DualSolution.from_qp(sol), dataset, qp_sol=sol)
    raise ValueError(f"unknown formulation {kind!r}")


class SolverFailure(RuntimeError):
    """The QP engine could not produce a usable solution."""

    def __init__(self, sol: QpSolution):
        self.solution = sol
        super().__init__(f"solver finished with status {sol.status.value}")


def _require_solution(sol: QpSolution) -> None:
    # a MAX_ITER iterate is still usable: at large penalty weights exact
    # stationarity of the stacked system is not attainable in double
    # precision even though the fit itself is pinned down, and the recovery
    # helpers cross-validate every fit on their own terms.  Diagnostics keep
    # the honest solver status.
    if sol.status is SolveStatus.INFEASIBLE:
        raise SolverFailure(sol)
