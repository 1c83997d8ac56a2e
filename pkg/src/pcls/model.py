"""Core domain types for shape-restricted least squares fits.

A fit assigns one hyperplane (intercept ``alpha_i``, slope row ``beta_i``)
to every observation; the regression function is the pointwise minimum
(concave case) or maximum (convex case) of those hyperplanes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from enum import Enum

import numpy as np


class Curvature(Enum):
    CONCAVE = "concave"
    CONVEX = "convex"


class Formulation(Enum):
    """Which of the three interchangeable QP statements produced a fit."""

    ORIGINAL = "original"
    PENALIZED_PRIMAL = "penalized"
    PENALIZED_DUAL = "dual"


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


def scale_of(y: np.ndarray) -> float:
    """Scale used for relative tolerances: max(1, stddev(y))."""
    return max(1.0, float(np.std(y)))


@dataclass(frozen=True)
class Dataset:
    """Observed regression data: an n-by-m input matrix and an n-vector of responses.

    Arrays are copied and frozen on construction, so instances are safe to
    share across workers.
    """

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        if x.ndim != 2:
            raise ValueError(f"x must be a 2-d matrix, got ndim={x.ndim}")
        if x.shape[0] != y.shape[0]:
            raise ValueError(
                f"row count mismatch: x has {x.shape[0]} rows, y has {y.shape[0]}"
            )
        if x.shape[0] < 2:
            raise ValueError("at least 2 observations are required")
        if x.shape[1] < 1:
            raise ValueError("at least 1 input column is required")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise ValueError("non-finite entries in input data")
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "y", _readonly(y))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def m(self) -> int:
        return self.x.shape[1]

    def negated(self) -> "Dataset":
        """Dataset with both inputs and responses negated.

        Fitting a monotone concave function to the negated data and mapping the
        hyperplanes back (``alpha -> -alpha``, ``eps -> -eps``, ``beta``
        unchanged) yields the monotone convex fit of the original data.
        """
        return Dataset(-self.x, -self.y)


@dataclass(frozen=True)
class ShapeSpec:
    """Requested shape: curvature plus an optional monotonicity restriction.

    Monotone concave is the default production-function shape; dropping
    ``monotone`` frees the slope signs, and convex curvature reverses the
    pairwise hyperplane inequalities.
    """

    curvature: Curvature = Curvature.CONCAVE
    monotone: bool = True

    @property
    def convex(self) -> bool:
        return self.curvature is Curvature.CONVEX


@dataclass(frozen=True)
class StackedVariables:
    """The stacked decision vector of the penalized formulations.

    Layout (0-based): slot ``p*n + i`` holds ``beta[i, p]`` (all slopes of
    input 1 first, then input 2, ...), and slot ``m*n + i*n + j`` holds the
    slack ``s[i, j]``.  Total length ``m*n + n*n``.
    """

    psi: np.ndarray
    n: int
    m: int

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=float).ravel()
        want = self.m * self.n + self.n * self.n
        if psi.shape[0] != want:
            raise ValueError(
                f"psi has length {psi.shape[0]}, expected m*n + n^2 = {want}"
            )
        object.__setattr__(self, "psi", _readonly(psi))

    @classmethod
    def from_parts(cls, beta: np.ndarray, slacks: np.ndarray) -> "StackedVariables":
        beta = np.atleast_2d(np.asarray(beta, dtype=float))
        slacks = np.asarray(slacks, dtype=float)
        n, m = beta.shape
        if slacks.shape != (n, n):
            raise ValueError(f"slacks must be {n}x{n}, got {slacks.shape}")
        psi = np.concatenate([beta.T.ravel(), slacks.ravel()])
        return cls(psi, n=n, m=m)

    def beta(self) -> np.ndarray:
        """Slope matrix, shape (n, m)."""
        return self.psi[: self.m * self.n].reshape(self.m, self.n).T

    def slacks(self) -> np.ndarray:
        """Slack matrix s[i, j], shape (n, n)."""
        return self.psi[self.m * self.n :].reshape(self.n, self.n)


@dataclass
class FitDiagnostics:
    """Scalar quality indicators attached to every fit."""

    r2: float = float("nan")
    r2_aug: float = 0.0
    big_m_used: float = 0.0
    max_constraint_violation: float = float("nan")
    solve_seconds: float = 0.0
    ssr_quadratic_form: float = float("nan")
    dual_crosscheck_gap: float = float("nan")
    escalation_exhausted: bool = False
    unstable: bool = False
    solver_status: str = ""
    iterations: int = 0


@dataclass
class FitResult:
    """A fitted piecewise-linear function plus per-observation bookkeeping.

    ``alpha[i] + x_i . beta[i]`` reproduces ``y[i] - eps[i]``; ``slacks[i, j]``
    is the gap of hyperplane j over hyperplane i at the point ``x_i``
    (non-negative when the shape constraints hold).
    """

    alpha: np.ndarray
    beta: np.ndarray
    eps: np.ndarray
    slacks: np.ndarray
    ssr: float
    formulation: Formulation
    diagnostics: FitDiagnostics = field(default_factory=FitDiagnostics)

    def fitted_values(self, dataset: Dataset) -> np.ndarray:
        return self.alpha + (dataset.x * self.beta).sum(axis=1)

    def evaluate(self, dataset: Dataset, points: np.ndarray, convex: bool = False) -> np.ndarray:
        """Evaluate the piecewise-linear function at arbitrary points.

        Concave fits are the min over hyperplanes, convex fits the max.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        values = self.alpha[None, :] + points @ self.beta.T
        return values.max(axis=1) if convex else values.min(axis=1)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "eps": self.eps.tolist(),
            "slacks": self.slacks.tolist(),
            "ssr": float(self.ssr),
            "formulation": self.formulation.value,
            "diagnostics": asdict(self.diagnostics),
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def extract_hyperplanes(
    dataset: Dataset, psi: StackedVariables, eps: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Recover (alpha, beta) from a stacked solution and its residuals.

    The slope block is read off the first ``m*n`` slots of ``psi`` and the
    intercepts close the fitting identity ``alpha_i = y_i - x_i . beta_i - eps_i``.
    """
    eps = np.asarray(eps, dtype=float).ravel()
    if psi.n != dataset.n or psi.m != dataset.m:
        raise ValueError(
            f"psi is for n={psi.n}, m={psi.m}; dataset has n={dataset.n}, m={dataset.m}"
        )
    if eps.shape[0] != dataset.n:
        raise ValueError(f"eps has length {eps.shape[0]}, expected {dataset.n}")
    beta = psi.beta()
    alpha = dataset.y - (dataset.x * beta).sum(axis=1) - eps
    return alpha, beta


def feasible_psi(dataset: Dataset, alpha: np.ndarray, beta: np.ndarray) -> StackedVariables:
    """Stacked variables of an exactly feasible fit.

    Slacks are set to the pairwise hyperplane gaps
    ``s[i, j] = alpha_j + x_i . beta_j - alpha_i - x_i . beta_i``, which makes
    every block equation of the eliminated problem hold with equality
    (concave orientation).
    """
    alpha = np.asarray(alpha, dtype=float).ravel()
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    planes = alpha[None, :] + dataset.x @ beta.T  # planes[i, j] = alpha_j + x_i . beta_j
    own = np.diag(planes)
    slacks = planes - own[:, None]
    return StackedVariables.from_parts(beta, slacks)
