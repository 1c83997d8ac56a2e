"""Sparse assembly of the penalized shape-restricted least squares problem.

Every pairwise-constraint block of the eliminated problem is an n-row
equation ``(I - E_b) y = A_b eps + X_b psi``.  The block matrices and the
products needed downstream (the quadratic term, the penalty term, the
stacked factor F) all have closed forms in a handful of auxiliary matrices,
so nothing here inverts or multiplies anything dense.

Block indices ``i`` in the public helpers are 1-based to match the usual
mathematical statement of the problem; internals are 0-based.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .model import Curvature, Dataset, ShapeSpec

SQRT2 = np.sqrt(2.0)


def _check_block_index(i: int, n: int) -> int:
    if n < 2:
        raise ValueError(f"block structure needs n >= 2, got n={n}")
    if not 1 <= i <= n:
        raise ValueError(f"block index {i} out of range 1..{n}")
    return i - 1


def ones_column_matrix(i: int, n: int) -> sp.csr_matrix:
    """E_i: the n-by-n matrix whose i-th column is all ones (1-based i)."""
    b = _check_block_index(i, n)
    rows = np.arange(n)
    cols = np.full(n, b)
    return sp.csr_matrix((np.ones(n), (rows, cols)), shape=(n, n))


def unit_matrix(i: int, j: int, n: int) -> sp.csr_matrix:
    """e_ij: single unit entry at (i, j), 1-based."""
    _check_block_index(i, n)
    _check_block_index(j, n)
    return sp.csr_matrix(([1.0], ([i - 1], [j - 1])), shape=(n, n))


def block_matrix(i: int, n: int) -> sp.csr_matrix:
    """A_i = I - E_i + E_i' (1-based i)."""
    e = ones_column_matrix(i, n)
    return (sp.identity(n, format="csr") - e + e.T).tocsr()


def a_inverse(i: int, n: int) -> sp.csr_matrix:
    """Closed-form inverse of A_i: I - (1/n) 1 + (2/n) E_i - e_ii (1-based i).

    Structurally dense (the rank-one centering term touches every entry) but
    cheap to generate and never formed at sizes beyond n-by-n.
    """
    b = _check_block_index(i, n)
    out = np.full((n, n), -1.0 / n)
    out[np.arange(n), np.arange(n)] += 1.0
    out[:, b] += 2.0 / n
    out[b, b] -= 1.0
    return sp.csr_matrix(out)


def a_inverse_gram(i: int, n: int) -> sp.csr_matrix:
    """A_i^{-1}' A_i^{-1} = I - (1/n) 1 + (1/n)(E_i + E_i') - e_ii, as an index rule."""
    b = _check_block_index(i, n)
    out = np.full((n, n), -1.0 / n)
    out[np.arange(n), np.arange(n)] += 1.0
    out[:, b] += 1.0 / n
    out[b, :] += 1.0 / n
    out[b, b] -= 1.0
    return sp.csr_matrix(out)


def a1_product(i: int, n: int) -> sp.csr_matrix:
    """A_1 A_i^{-1} = I - E_1 - e_ii + e_1i, as an index rule (1-based i >= 2).

    The closed form covers the cross-block products actually used in
    assembly; for i = 1 the product is just the identity and is not needed.
    """
    if i < 2:
        raise ValueError("the closed-form product A_1 A_i^{-1} applies to blocks i >= 2")
    b = _check_block_index(i, n)
    rows = [np.arange(n), np.arange(n), np.array([b]), np.array([0])]
    cols = [np.arange(n), np.zeros(n, dtype=int), np.array([b]), np.array([b])]
    vals = [np.ones(n), -np.ones(n), np.array([-1.0]), np.array([1.0])]
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    mat.sum_duplicates()
    mat.eliminate_zeros()
    return mat


def centered_a1_inverse(n: int) -> sp.csr_matrix:
    """(I - (1/n) 1) A_1^{-1} = I - (1/n) 1 + (1/n) E_1 - e_11, as an index rule."""
    out = np.full((n, n), -1.0 / n)
    out[np.arange(n), np.arange(n)] += 1.0
    out[:, 0] += 1.0 / n
    out[0, 0] -= 1.0
    return sp.csr_matrix(out)


def data_block(i: int, dataset: Dataset, with_slacks: bool = True) -> sp.csr_matrix:
    """X_i: the data matrix of block i (1-based).

    The slope part holds m diagonal sub-blocks ``diag(x^p) - x_ip I``; with
    ``with_slacks`` the identity selecting the block's slack vector is
    appended, so that ``X_i psi = sum_p (diag(x^p) - x_ip I) beta^p + s_i``.
    """
    n, m = dataset.n, dataset.m
    b = _check_block_index(i, n)
    rows = np.tile(np.arange(n), m)
    cols = np.concatenate([p * n + np.arange(n) for p in range(m)])
    vals = (dataset.x - dataset.x[b, :][None, :]).T.ravel()
    if with_slacks:
        width = m * n + n * n
        rows = np.concatenate([rows, np.arange(n)])
        cols = np.concatenate([cols, m * n + b * n + np.arange(n)])
        vals = np.concatenate([vals, np.ones(n)])
    else:
        width = m * n
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, width))
    mat.eliminate_zeros()
    return mat


def drop_small(mat: sp.spmatrix, tol: float) -> sp.csr_matrix:
    """Remove stored entries with magnitude at or below ``tol``."""
    out = sp.csr_matrix(mat).copy()
    if tol > 0:
        out.data[np.abs(out.data) <= tol] = 0.0
    out.eliminate_zeros()
    return out


def write_coo_text(mat: sp.spmatrix, fileobj) -> None:
    """Debug dump: one ``row col value`` triple per line, 0-based, %.17g."""
    coo = sp.coo_matrix(mat)
    for r, c, v in zip(coo.row, coo.col, coo.data):
        fileobj.write("%d %d %.17g\n" % (r, c, v))


def _penalty_rows(dataset: Dataset) -> sp.csr_matrix:
    """Unscaled penalty factor: blocks (A_1 A_b^{-1}) X_b - X_1 for b = 2..n.

    Emitted entry-by-entry from the closed forms; shape (n^2 - n, mn + n^2).
    Row (b-2)*n + k (0-based b-1 here) carries the violation of block b's
    k-th equation when the first block holds with equality.
    """
    x = dataset.x
    n, m = dataset.n, dataset.m
    mn = m * n
    width = mn + n * n
    rows, cols, vals = [], [], []

    ks = np.arange(n)
    for b in range(1, n):
        base = (b - 1) * n
        # delta_p = x[0, p] - x[b, p], the only data entering block b
        delta = x[0, :] - x[b, :]
        mid = ks[(ks != 0) & (ks != b)]
        for p in range(m):
            # rows k not in {0, b}: +delta at (p, k), -delta at (p, 0)
            rows.append(base + mid)
            cols.append(p * n + mid)
            vals.append(np.full(mid.size, delta[p]))
            rows.append(base + mid)
            cols.append(np.full(mid.size, p * n))
            vals.append(np.full(mid.size, -delta[p]))
            # row b: -delta at (p, 0), +delta at (p, b)
            rows.append(np.array([base + b, base + b]))
            cols.append(np.array([p * n, p * n + b]))
            vals.append(np.array([-delta[p], delta[p]]))
        # slack entries, rows k not in {0, b}
        rows.append(base + mid)
        cols.append(mn + b * n + mid)
        vals.append(np.ones(mid.size))
        rows.append(base + mid)
        cols.append(np.full(mid.size, mn + b * n))
        vals.append(np.full(mid.size, -1.0))
        rows.append(base + mid)
        cols.append(mn + mid)
        vals.append(np.full(mid.size, -1.0))
        # row 0: own-slack diagonal against the anchor slack
        rows.append(np.array([base, base]))
        cols.append(np.array([mn + b * n + b, mn]))
        vals.append(np.array([1.0, -1.0]))
        # row b
        rows.append(np.array([base + b, base + b]))
        cols.append(np.array([mn + b * n, mn + b]))
        vals.append(np.array([-1.0, -1.0]))

    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n * n - n, width),
    )
    mat.sum_duplicates()
    mat.eliminate_zeros()
    return mat


@dataclass
class AssembledProblem:
    """All matrices of the penalized formulation for one dataset and penalty.

    Holds the stacked factor blocks unscaled, so the penalty weight can be
    swapped without re-assembly; the quadratic term ``q`` and penalty term
    ``v`` are built lazily (``v`` only ever materializes on the primal path).
    Convex requests are assembled on the negated data; ``convex_flip`` records
    that the recovery step must map the fit back.
    """

    n: int
    m: int
    shape: ShapeSpec
    big_m: float
    gamma: float
    c: np.ndarray
    y_centered: np.ndarray
    oriented: Dataset
    convex_flip: bool
    f1: sp.csr_matrix = field(repr=False)
    g: sp.csr_matrix = field(repr=False)
    x1: sp.csr_matrix = field(repr=False)
    drop_tol: float = 0.0

    @property
    def width(self) -> int:
        return self.m * self.n + self.n * self.n

    @cached_property
    def f(self) -> sp.csr_matrix:
        """Stacked factor F: sqrt(2) times the first block, big_m times the rest."""
        return sp.vstack([SQRT2 * self.f1, self.big_m * self.g], format="csr")

    @cached_property
    def q(self) -> sp.csr_matrix:
        """Quadratic term X_1' (A_1^{-1}' A_1^{-1}) X_1 from the closed-form gram."""
        gram = a_inverse_gram(1, self.n)
        return drop_small((self.x1.T @ (gram @ self.x1)).tocsr(), self.drop_tol)

    @cached_property
    def v(self) -> sp.csr_matrix:
        """Penalty term: gram of the unscaled violation rows (no big_m factor)."""
        return drop_small((self.g.T @ self.g).tocsr(), self.drop_tol)

    def penalized_quadratic(self) -> sp.csc_matrix:
        """H = 2 Q + big_m^2 V, the quadratic term of the penalized primal."""
        return (2.0 * self.q + self.big_m**2 * self.v).tocsc()

    def residuals_from_psi(self, psi: np.ndarray) -> np.ndarray:
        """Residual recovery from the first block: (I - (1/n)1) y - A_1^{-1} X_1 psi."""
        return self.y_centered - self.f1 @ np.asarray(psi, dtype=float)

    def ssr_quadratic(self, psi: np.ndarray) -> float:
        """Sum of squared residuals via the quadratic form psi'Q psi + 2 c psi + gamma."""
        psi = np.asarray(psi, dtype=float)
        return float(psi @ (self.q @ psi) + 2.0 * self.c @ psi + self.gamma)

    def violation_quadratic(self, psi: np.ndarray) -> float:
        """psi' V psi without materializing V (squared norm of the violation rows)."""
        r = self.g @ np.asarray(psi, dtype=float)
        return float(r @ r)

    def with_big_m(self, big_m: float) -> "AssembledProblem":
        if big_m <= 0:
            raise ValueError("big_m must be positive")
        return AssembledProblem(
            n=self.n, m=self.m, shape=self.shape, big_m=float(big_m),
            gamma=self.gamma, c=self.c, y_centered=self.y_centered,
            oriented=self.oriented, convex_flip=self.convex_flip,
            f1=self.f1, g=self.g, x1=self.x1, drop_tol=self.drop_tol,
        )


def assemble(
    dataset: Dataset, shape: ShapeSpec, big_m: float, drop_tol: float = 0.0
) -> AssembledProblem:
    """Build the penalized problem's matrices for a dataset and penalty weight.

    Returns an :class:`AssembledProblem` carrying F (lazily scaled), the
    linear term c, gamma = y'(I - (1/n)1)y, and lazy Q/V.  Entries are kept
    exact by default; ``drop_tol`` prunes magnitudes at or below it.
    """
    if big_m <= 0:
        raise ValueError("big_m must be positive")
    n, m = dataset.n, dataset.m
    if n * n * (m * n + n * n) > np.iinfo(np.intp).max:
        raise OverflowError(
            f"index arithmetic for n={n}, m={m} exceeds the platform index type"
        )

    flip = shape.curvature is Curvature.CONVEX
    oriented = dataset.negated() if flip else dataset

    x1 = data_block(1, oriented)
    f1 = drop_small((a_inverse(1, n) @ x1).tocsr(), drop_tol)
    g = drop_small(_penalty_rows(oriented), drop_tol)

    y = oriented.y
    u = y - y.mean()
    u0 = u.copy()
    u0[0] = 0.0
    c = np.zeros(m * n + n * n)
    for p in range(m):
        c[p * n : (p + 1) * n] = -(oriented.x[:, p] - oriented.x[0, p]) * u0
    c[m * n : m * n + n] = -u0
    gamma = float(u @ u)

    return AssembledProblem(
        n=n, m=m, shape=shape, big_m=float(big_m), gamma=gamma, c=c,
        y_centered=u, oriented=oriented, convex_flip=flip,
        f1=f1, g=g, x1=x1, drop_tol=drop_tol,
    )
