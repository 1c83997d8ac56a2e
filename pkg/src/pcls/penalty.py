"""Penalty weight selection and escalation.

The initial weight comes from the square-root rule of thumb
``M > sqrt(2 |f| / (n^2 delta))`` with the objective bound ``f`` proxied by
an ordinary least squares fit; escalation then multiplies the weight until
the violation measure is negligible.  Rounds are warm-started from the
previous solution (penalty continuation), which is what makes large
weights reachable in the first place.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .matrices import AssembledProblem, assemble
from .model import Dataset, FitResult, Formulation, ShapeSpec
from .formulations import (
    DualSolution,
    build_original,
    build_penalized_dual,
    build_penalized_primal,
    fit_formulation,
    recover_from_dual,
    recover_from_original,
    recover_from_primal,
    _require_solution,
)
from .qp import QpSolution, SolverConfig, solve


@dataclass
class PenaltySchedule:
    """Escalation plan for the penalty weight."""

    initial_m: float
    growth: float = 10.0
    max_rounds: int = 6
    violation_target: float = 1e-7

    def __post_init__(self):
        if self.initial_m <= 0:
            raise ValueError("initial_m must be positive")
        if self.growth <= 1:
            raise ValueError("growth must exceed 1")
        if self.max_rounds < 1:
            raise ValueError("at least one round is required")


def rule_of_thumb_m(n: int, delta: float, f_bound: float) -> float:
    """Initial penalty weight sqrt(2 |f_bound| / (n^2 delta)).

    ``delta`` is the tolerated per-constraint violation scale and
    ``f_bound`` an (upper) bound for the unpenalized objective value,
    typically negative.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not np.isfinite(f_bound):
        raise ValueError("f_bound must be finite")
    return float(np.sqrt(2.0 * abs(f_bound) / (n * n * delta)))


def ols_objective_bound(dataset: Dataset) -> float:
    """Objective bound proxy: the negated SSR of an intercept-augmented OLS fit.

    Non-positive by construction; the worst case (constant fit) returns the
    negated total sum of squares.
    """
    design = np.column_stack([np.ones(dataset.n), dataset.x])
    gram = design.T @ design
    try:
        coef = np.linalg.solve(gram, design.T @ dataset.y)
    except np.linalg.LinAlgError:
        coef = np.linalg.lstsq(design, dataset.y, rcond=None)[0]
    resid = dataset.y - design @ coef
    return -float(resid @ resid)


DELTA_DEFAULT = 1e-5
CODE_DEFAULT_M = 100.0


def default_schedule(dataset: Dataset, delta: float = DELTA_DEFAULT) -> PenaltySchedule:
    """Schedule starting at the rule-of-thumb weight for this dataset."""
    m0 = rule_of_thumb_m(dataset.n, delta, ols_objective_bound(dataset))
    return PenaltySchedule(initial_m=max(m0, 1.0))


@dataclass
class EscalationRecord:
    round: int
    big_m: float
    ssr: float
    r2_aug: float
    solve_seconds: float


def write_trace_csv(trace: list[EscalationRecord], fileobj) -> None:
    writer = csv.writer(fileobj)
    writer.writerow(["round", "big_m", "ssr", "r2_aug", "solve_seconds"])
    for rec in trace:
        writer.writerow([rec.round, f"{rec.big_m:.17g}", f"{rec.ssr:.17g}",
                         f"{rec.r2_aug:.17g}", f"{rec.solve_seconds:.6f}"])


def fit_with_escalation(
    dataset: Dataset,
    shape: ShapeSpec,
    formulation: Formulation,
    schedule: PenaltySchedule | None = None,
    solver_config: SolverConfig | None = None,
    trace_sink: list | None = None,
) -> FitResult:
    """Solve at increasing penalty weights until the violation measure is small.

    Rounds run at ``initial_m * growth^k``, warm-started from the previous
    round; a short continuation ramp below ``initial_m`` seeds the first
    warm start.  Stops once psi'V psi / SST falls below the violation
    target.  If the rounds are exhausted above the target, the result still
    comes back, flagged in its diagnostics.
    """
    solver_config = solver_config or SolverConfig()
    if formulation is Formulation.ORIGINAL:
        fit = fit_formulation(dataset, shape, formulation, config=solver_config)
        fit.diagnostics.r2_aug = 0.0
        if trace_sink is not None:
            trace_sink.append(EscalationRecord(0, 0.0, fit.ssr, 0.0, fit.diagnostics.solve_seconds))
        return fit

    schedule = schedule or default_schedule(dataset)
    sst = metrics.sst(dataset.y)
    build = build_penalized_primal if formulation is Formulation.PENALIZED_PRIMAL else build_penalized_dual

    # continuation ramp up to the initial weight: warm starts make the
    # large-weight rounds tractable
    ramp = []
    m_ramp = schedule.initial_m / 100.0
    while m_ramp >= 5.0 and len(ramp) < 2:
        ramp.append(m_ramp)
        m_ramp *= 10.0
    rounds = ramp + [schedule.initial_m * schedule.growth**k for k in range(schedule.max_rounds)]
    n_ramp = len(ramp)

    ap = assemble(dataset, shape, big_m=rounds[0])
    warm_x = warm_y = None
    fit = None
    exhausted = True
    round_no = 0
    for idx, big_m in enumerate(rounds):
        ap = ap.with_big_m(big_m)
        prob = build(ap)
        t0 = time.perf_counter()
        sol = solve(prob, solver_config, warm_x=warm_x, warm_y=warm_y)
        elapsed = time.perf_counter() - t0
        _require_solution(sol)
        warm_x, warm_y = sol.x, -sol.y_mult
        if formulation is Formulation.PENALIZED_PRIMAL:
            fit = recover_from_primal(ap, sol.x, dataset, sol=sol)
        else:
            fit = recover_from_dual(ap, DualSolution.from_qp(sol), dataset, qp_sol=sol)
        fit.diagnostics.solve_seconds = elapsed
        aug = metrics.r2_aug(ap, sol.x if formulation is Formulation.PENALIZED_PRIMAL else sol.y_mult, sst)
        if trace_sink is not None:
            trace_sink.append(EscalationRecord(idx - n_ramp, big_m, fit.ssr, aug, elapsed))
        if idx >= n_ramp and aug <= schedule.violation_target:
            exhausted = False
            break

    fit.diagnostics.escalation_exhausted = exhausted
    if fit.diagnostics.ssr_quadratic_form > sst > 0:
        # worse than the mean function: the average-line degeneracy of an
        # over-large penalty weight
        fit.diagnostics.unstable = True
    return fit
