"""Scalar accuracy and feasibility diagnostics for fits.

``r2_aug`` is the unit-free constraint-violation measure psi'V psi / SST
(no penalty-weight factor); a value near zero certifies that a penalized
solution is effectively feasible for the constrained problem.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrices import AssembledProblem
from .model import Curvature, Dataset, FitResult, ShapeSpec, StackedVariables


def sst(y: np.ndarray) -> float:
    """Total sum of squares around the mean."""
    y = np.asarray(y, dtype=float)
    return float(np.sum((y - y.mean()) ** 2))


def _psi_vector(psi) -> np.ndarray:
    return psi.psi if isinstance(psi, StackedVariables) else np.asarray(psi, dtype=float)


def r2_aug(ap: AssembledProblem, psi, sst_value: float) -> float:
    """Residual violation measure psi'V psi / SST, using the unscaled V.

    Defined as 0 for constant responses (sst == 0).
    """
    if sst_value < 0:
        raise ValueError("sst must be non-negative")
    if sst_value == 0.0:
        return 0.0
    return ap.violation_quadratic(_psi_vector(psi)) / sst_value


@dataclass
class FitMetrics:
    """Goodness-of-fit summary of one solved penalized instance."""

    ssr: float
    sst: float
    r2: float
    rho: float
    r2_aug: float
    big_m: float
    replication_ssr: list[float] | None = None

    @property
    def r2_4(self) -> float:
        """Coefficient of determination of the penalized objective."""
        return self.rho + self.big_m**2 * self.r2_aug


def compute_fit_metrics(ap: AssembledProblem, psi) -> FitMetrics:
    """Evaluate SSR (quadratic form), R^2, rho and the violation measure."""
    vec = _psi_vector(psi)
    total = ap.gamma  # gamma = y'(I - (1/n)1)y is exactly SST
    ssr = ap.ssr_quadratic(vec)
    viol = ap.violation_quadratic(vec)
    if total > 0:
        r2 = 1.0 - ssr / total
        rho = 1.0 - (ssr + ap.big_m**2 * viol) / total
        aug = viol / total
    else:
        r2, rho, aug = 1.0, 1.0, 0.0
    return FitMetrics(ssr=ssr, sst=total, r2=r2, rho=rho, r2_aug=aug, big_m=ap.big_m)


def amse(ssr_list, n: int) -> float:
    """Average root mean squared residual over replications: mean of sqrt(SSR_t / n)."""
    ssr_arr = np.asarray(list(ssr_list), dtype=float)
    if ssr_arr.size == 0:
        raise ValueError("at least one replication SSR is required")
    if n < 1:
        raise ValueError("n must be positive")
    if np.any(ssr_arr < 0):
        raise ValueError("SSR values must be non-negative")
    return float(np.mean(np.sqrt(ssr_arr / n)))


@dataclass
class ViolationReport:
    """Feasibility audit of a fit against the pairwise shape constraints."""

    max_violation: float
    mean_violation: float
    min_beta: float
    eps_sum_abs: float


def violation_report(
    fit: FitResult, dataset: Dataset, shape: ShapeSpec | None = None
) -> ViolationReport:
    """Measure how far a fit's hyperplanes are from mutual consistency.

    For a concave fit, hyperplane i must lie below every other hyperplane at
    its own point; the positive part of ``(alpha_i + x_i b_i) - (alpha_j +
    x_i b_j)`` is the violation of pair (i, j).  Convex fits reverse the
    direction.
    """
    shape = shape or ShapeSpec()
    planes = fit.alpha[None, :] + dataset.x @ fit.beta.T  # [i, j] = plane j at x_i
    own = np.diag(planes)
    gaps = planes - own[:, None]
    if shape.curvature is Curvature.CONVEX:
        gaps = -gaps
    viol = np.maximum(-gaps, 0.0)
    np.fill_diagonal(viol, 0.0)
    off_count = max(dataset.n * (dataset.n - 1), 1)
    return ViolationReport(
        max_violation=float(viol.max()),
        mean_violation=float(viol.sum() / off_count),
        min_beta=float(fit.beta.min()),
        eps_sum_abs=float(abs(fit.eps.sum())),
    )
