"""Dense high-accuracy reference QP solver used as the test oracle.

A Mehrotra predictor-corrector interior-point method on dense
factorizations.  Small problems only (the production path is the splitting
solver in :mod:`pcls.qp`); accuracy is pushed to ~1e-11 so results can serve
as ground truth for the production solver and the penalized formulations.
"""

from __future__ import annotations

import time

import numpy as np

from .qp import QpProblem, QpSolution, SolveStatus

MAX_REFERENCE_VARS = 500


def _split_rows(problem: QpProblem):
    """Rewrite box rows as equalities Cx = d and one-sided rows Gx <= h.

    Returns (C, d, G, h, eq_rows, up_rows, lo_rows) where the row-index
    arrays map back to the original constraint rows.
    """
    a = problem.a.toarray() if problem.con_count else np.zeros((0, problem.var_count))
    lo, hi = problem.lower, problem.upper
    eq_rows = np.where(lo == hi)[0]
    up_rows = np.where((lo != hi) & np.isfinite(hi))[0]
    lo_rows = np.where((lo != hi) & np.isfinite(lo))[0]
    c = a[eq_rows]
    d = lo[eq_rows]
    g = np.vstack([a[up_rows], -a[lo_rows]]) if (up_rows.size + lo_rows.size) else np.zeros((0, problem.var_count))
    h = np.concatenate([hi[up_rows], -lo[lo_rows]])
    return c, d, g, h, eq_rows, up_rows, lo_rows


def solve_reference(problem: QpProblem, tol: float = 1e-11, max_iter: int = 100) -> QpSolution:
    """Solve a small convex QP to high accuracy on dense factorizations.

    Raises ``ValueError`` beyond ``MAX_REFERENCE_VARS`` variables; this
    solver exists to produce oracle values on tiny instances, not to compete
    with the production path.
    """
    if problem.var_count > MAX_REFERENCE_VARS:
        raise ValueError(
            f"reference solver limited to {MAX_REFERENCE_VARS} variables, "
            f"got {problem.var_count}"
        )
    t0 = time.perf_counter()
    nv = problem.var_count
    p = problem.p.toarray()
    q = problem.q
    c, d, g, h, eq_rows, up_rows, lo_rows = _split_rows(problem)
    ne, ni = c.shape[0], g.shape[0]

    scale = max(
        1.0,
        float(np.max(np.abs(q), initial=0.0)),
        float(np.max(np.abs(h), initial=0.0)) if ni else 0.0,
        float(np.max(np.abs(d), initial=0.0)) if ne else 0.0,
    )

    # starting point: regularized equality solve, then shift into the interior
    kkt0 = np.zeros((nv + ne, nv + ne))
    kkt0[:nv, :nv] = p + np.eye(nv)
    if ne:
        kkt0[:nv, nv:] = c.T
        kkt0[nv:, :nv] = c
    rhs0 = np.concatenate([-q, d])
    try:
        sol0 = np.linalg.solve(kkt0, rhs0)
    except np.linalg.LinAlgError:
        sol0 = np.linalg.lstsq(kkt0, rhs0, rcond=None)[0]
    x = sol0[:nv]
    y = sol0[nv:]
    if ni:
        s = np.maximum(h - g @ x, 1.0)
        z = np.ones(ni)
    else:
        s = z = np.zeros(0)

    status = SolveStatus.MAX_ITER
    iters_done = 0
    best = None

    for k in range(1, max_iter + 1):
        iters_done = k
        r_dual = p @ x + q + (c.T @ y if ne else 0.0) + (g.T @ z if ni else 0.0)
        r_eq = c @ x - d if ne else np.zeros(0)
        r_in = g @ x + s - h if ni else np.zeros(0)
        mu = float(s @ z / ni) if ni else 0.0
        res = max(
            np.max(np.abs(r_dual)),
            np.max(np.abs(r_eq), initial=0.0),
            np.max(np.abs(r_in), initial=0.0),
        )
        if best is None or res + mu < best[0]:
            best = (res + mu, x.copy(), y.copy(), z.copy(), s.copy())
        if res <= tol * scale and mu <= tol * scale:
            status = SolveStatus.OPTIMAL
            break
        # past the complementarity floor the Newton systems lose accuracy;
        # stop and fall back to the best iterate seen
        if mu < 1e-13 * scale and res > 100.0 * best[0]:
            break

        # diverging multipliers signal infeasibility; test the certificate
        mult_norm = np.max(np.abs(y), initial=0.0) + np.max(np.abs(z), initial=0.0)
        if mult_norm > 10.0 * scale and _farkas_infeasible(c, d, g, h, y, z):
            status = SolveStatus.INFEASIBLE
            break
        if mult_norm > 1e12 * scale or not np.isfinite(res):
            break

        if ni:
            s = np.maximum(s, 1e-250)
            w = z / s
            pmod = p + g.T @ (w[:, None] * g)
        else:
            pmod = p
        kkt = np.zeros((nv + ne, nv + ne))
        kkt[:nv, :nv] = pmod
        if ne:
            kkt[:nv, nv:] = c.T
            kkt[nv:, :nv] = c
            kkt[nv:, nv:] = -1e-13 * np.eye(ne)

        def newton(r_sz):
            extra = g.T @ ((-r_sz + z * r_in) / s) if ni else 0.0
            rhs = np.concatenate([-(r_dual + extra), -r_eq])
            try:
                step = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            dx = step[:nv]
            dy = step[nv:]
            if ni:
                ds = -(r_in + g @ dx)
                dz = (-r_sz - z * ds) / s
            else:
                ds = dz = np.zeros(0)
            return dx, dy, dz, ds

        if ni:
            # affine (predictor) step
            dx_a, dy_a, dz_a, ds_a = newton(s * z)
            a_ps = _max_step(s, ds_a)
            a_ds = _max_step(z, dz_a)
            mu_aff = float((s + a_ps * ds_a) @ (z + a_ds * dz_a) / ni)
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            # corrector
            r_sz = s * z - sigma * mu + ds_a * dz_a
            dx, dy, dz, ds = newton(r_sz)
            a_p = min(1.0, 0.99 * _max_step(s, ds))
            a_d = min(1.0, 0.99 * _max_step(z, dz))
        else:
            dx, dy, dz, ds = newton(np.zeros(0))
            a_p = a_d = 1.0

        if max(np.max(np.abs(dx), initial=0.0) * a_p, mu) < 1e-16 * scale and res > tol * scale:
            break  # stalled
        x = x + a_p * dx
        y = y + a_d * dy
        if ni:
            s = s + a_p * ds
            z = z + a_d * dz

    if status is SolveStatus.MAX_ITER:
        if _farkas_infeasible(c, d, g, h, y, z):
            status = SolveStatus.INFEASIBLE
        else:
            best_res, x, y, z, s = best
            if best_res <= 1e-9 * scale:
                status = SolveStatus.OPTIMAL

    y_mult = np.zeros(problem.con_count)
    if ne:
        y_mult[eq_rows] = -y
    if ni:
        y_mult[up_rows] -= z[: up_rows.size]
        y_mult[lo_rows] += z[up_rows.size :]

    r_dual = p @ x + q + (c.T @ y if ne else 0.0) + (g.T @ z if ni else 0.0)
    r_prim = 0.0
    if problem.con_count:
        ax = problem.a @ x
        r_prim = float(np.max(np.abs(ax - np.clip(ax, problem.lower, problem.upper))))
    return QpSolution(
        x=x,
        y_mult=y_mult,
        status=status,
        primal_res=r_prim,
        dual_res=float(np.max(np.abs(r_dual))),
        iterations=iters_done,
        solve_seconds=time.perf_counter() - t0,
        obj_value=problem.objective(x),
    )


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _farkas_infeasible(c, d, g, h, y, z) -> bool:
    """Certificate check: G'z + C'y ~ 0, z >= 0, h'z + d'y < 0."""
    norm = np.max(np.abs(y), initial=0.0) + np.max(np.abs(z), initial=0.0)
    if norm < 1e-8:
        return False
    y = y / norm
    z = np.maximum(z / norm, 0.0)
    resid = (c.T @ y if y.size else 0.0) + (g.T @ z if z.size else 0.0)
    if np.max(np.abs(resid), initial=0.0) > 1e-6:
        return False
    support = (float(d @ y) if y.size else 0.0) + (float(h @ z) if z.size else 0.0)
    return support < -1e-6
