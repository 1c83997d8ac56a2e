"""Convex QP containers and the first-order production solver.

Problems are stated as ``min 0.5 x'Px + q'x  s.t.  lower <= Ax <= upper``
with equality rows encoded by ``lower == upper``.  The solver is an
operator-splitting (ADMM) method with Ruiz equilibration, adaptive step
penalty, infeasibility certificates, and an optional active-set polish step
that sharpens the returned solution and multipliers.

Multiplier convention: the returned ``y_mult`` satisfies
``P x + q = A' y_mult`` at optimality, with ``y_mult >= 0`` on rows active
at their lower bound (>= constraints) and ``y_mult <= 0`` on rows active at
their upper bound.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolveStatus(Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"


@dataclass
class QpProblem:
    """min 0.5 x'Px + q'x subject to lower <= Ax <= upper."""

    p: sp.spmatrix
    q: np.ndarray
    a: sp.spmatrix
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.p = sp.csc_matrix(self.p)
        self.a = sp.csc_matrix(self.a)
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.lower = np.asarray(self.lower, dtype=float).ravel()
        self.upper = np.asarray(self.upper, dtype=float).ravel()
        nv = self.p.shape[0]
        if self.p.shape != (nv, nv):
            raise ValueError("quadratic term must be square")
        if self.q.shape[0] != nv:
            raise ValueError("linear term length mismatch")
        if self.a.shape[1] != nv:
            raise ValueError("constraint matrix column count mismatch")
        nc = self.a.shape[0]
        if self.lower.shape[0] != nc or self.upper.shape[0] != nc:
            raise ValueError("bound vector length mismatch")
        if np.any(self.lower > self.upper):
            raise ValueError("lower > upper on some constraint row")
        gap = abs(self.p - self.p.T)
        if gap.nnz and gap.max() > 1e-12 * max(1.0, abs(self.p).max()):
            raise ValueError("quadratic term is not symmetric")

    @property
    def var_count(self) -> int:
        return self.p.shape[0]

    @property
    def con_count(self) -> int:
        return self.a.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.p @ x) + self.q @ x)

    def dump(self, fileobj) -> None:
        """Debug dump: header ``vars cons``, then P and A as 0-based
        ``row col value`` triples separated by single-word marker lines,
        then per-row ``lower upper`` bounds."""
        from .matrices import write_coo_text

        fileobj.write(f"{self.var_count} {self.con_count}\n")
        fileobj.write("P\n")
        write_coo_text(self.p, fileobj)
        fileobj.write("A\n")
        write_coo_text(self.a, fileobj)
        fileobj.write("bounds\n")
        for lo, hi in zip(self.lower, self.upper):
            fileobj.write("%.17g %.17g\n" % (lo, hi))


@dataclass
class QpSolution:
    x: np.ndarray
    y_mult: np.ndarray
    status: SolveStatus
    primal_res: float
    dual_res: float
    iterations: int
    solve_seconds: float
    obj_value: float = float("nan")
    polished: bool = False
    timed_out: bool = False


@dataclass
class SolverConfig:
    """Tolerances and step parameters of the splitting method.

    ``eps_abs``/``eps_rel`` play the roles of the solver's feasibility and
    optimality tolerances; termination requires both the primal and the dual
    residual to drop below ``eps_abs + eps_rel * scale``.
    """

    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    max_iter: int = 200_000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho: bool = True
    scaling_iters: int = 10
    polish: bool = True
    polish_delta: float = 1e-9
    check_interval: int = 25
    eps_infeas: float = 1e-7
    time_limit_seconds: float | None = None
    # the penalized problems carry a big-M^2 condition number that can stall
    # first-order iterations; a sparse interior-point stage takes over when
    # the residual score stops improving
    second_order_fallback: bool = True
    stall_checks: int = 20

    def __post_init__(self):
        for name in ("eps_abs", "eps_rel", "rho", "sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def _col_inf_norms(mat: sp.spmatrix) -> np.ndarray:
    if mat.shape[0] == 0 or mat.nnz == 0:
        return np.zeros(mat.shape[1])
    return np.asarray(abs(mat).max(axis=0).todense()).ravel()


def _row_inf_norms(mat: sp.spmatrix) -> np.ndarray:
    if mat.shape[1] == 0 or mat.nnz == 0:
        return np.zeros(mat.shape[0])
    return np.asarray(abs(mat).max(axis=1).todense()).ravel()


class _Scaling:
    """Ruiz equilibration of the stacked (P, q, A) data plus cost scaling."""

    def __init__(self, problem: QpProblem, iters: int):
        nv, nc = problem.var_count, problem.con_count
        self.d = np.ones(nv)
        self.e = np.ones(nc)
        self.cost = 1.0
        p, a, q = problem.p.copy(), problem.a.copy(), problem.q.copy()
        for _ in range(iters):
            nps = _col_inf_norms(p)
            nas = _col_inf_norms(a)
            dd = 1.0 / np.sqrt(np.clip(np.maximum(nps, nas), 1e-12, None))
            dd[np.maximum(nps, nas) == 0] = 1.0
            ee = np.ones(nc)
            if nc:
                nar = _row_inf_norms(a)
                ee = 1.0 / np.sqrt(np.clip(nar, 1e-12, None))
                ee[nar == 0] = 1.0
            ddm = sp.diags(dd)
            p = (ddm @ p @ ddm).tocsc()
            q = dd * q
            if nc:
                a = (sp.diags(ee) @ a @ ddm).tocsc()
            self.d *= dd
            self.e *= ee
            colp = _col_inf_norms(p)
            denom = max(float(colp.mean()) if colp.size else 0.0, float(np.max(np.abs(q), initial=0.0)))
            gamma = 1.0 if denom < 1e-12 else 1.0 / denom
            gamma = float(np.clip(gamma, 1e-6, 1e6))
            p *= gamma
            q *= gamma
            self.cost *= gamma
        self.p, self.a, self.q = p, a, q


def _kkt_factor(p, a, sigma, rho_vec):
    nv, nc = p.shape[0], a.shape[0]
    if nc:
        kkt = sp.bmat(
            [
                [p + sigma * sp.identity(nv), a.T],
                [a, sp.diags(-1.0 / rho_vec)],
            ],
            format="csc",
        )
    else:
        kkt = (p + sigma * sp.identity(nv)).tocsc()
    return spla.splu(kkt)


def solve(
    problem: QpProblem,
    config: SolverConfig | None = None,
    warm_x: np.ndarray | None = None,
    warm_y: np.ndarray | None = None,
) -> QpSolution:
    """Solve a convex QP with the built-in splitting method.

    Parameters
    ----------
    problem : QpProblem
        Problem data; equality rows have ``lower == upper``.
    config : SolverConfig, optional
        Tolerances and algorithm parameters; defaults are production
        settings (1e-8 absolute/relative).
    warm_x, warm_y : ndarray, optional
        Warm-start point and multipliers (unscaled); penalty continuation
        passes the previous round's solution here.

    Returns
    -------
    QpSolution
        Primal point, one multiplier per constraint row, achieved residuals
        and status.  ``MAX_ITER`` still carries the best iterate found.
    """
    config = config or SolverConfig()
    t0 = time.perf_counter()
    nv, nc = problem.var_count, problem.con_count

    scal = _Scaling(problem, config.scaling_iters)
    p, a, q = scal.p, scal.a, scal.q
    lo = scal.e * problem.lower
    hi = scal.e * problem.upper

    eq = np.zeros(nc, dtype=bool)
    loose = np.zeros(nc, dtype=bool)
    if nc:
        eq = problem.lower == problem.upper
        loose = np.isinf(problem.lower) & np.isinf(problem.upper)
    rho = config.rho
    rho_vec = np.full(nc, rho)
    rho_vec[eq] = rho * 1e3
    rho_vec[loose] = 1e-6
    lu = _kkt_factor(p, a, config.sigma, rho_vec)
    p_abs = abs(p)
    at_abs = abs(a.T) if nc else None

    d, e, cost = scal.d, scal.e, scal.cost
    x = np.zeros(nv)
    z = np.zeros(nc)
    y = np.zeros(nc)
    if warm_x is not None:
        x = np.asarray(warm_x, dtype=float) / d
        if nc:
            z = np.clip(a @ x, lo, hi)
    if warm_y is not None and nc:
        y = cost * (np.asarray(warm_y, dtype=float) / e)
    x_chk = x.copy()
    y_chk = y.copy()
    status = SolveStatus.MAX_ITER
    r_prim = r_dual = np.inf
    timed_out = False
    polished = False
    iters_done = 0
    x_out = np.zeros(nv)
    y_out = np.zeros(nc)
    # polish is attempted on an exponential backoff schedule; a successful
    # polish lands at ~1e-13 and satisfies the strict tolerance long before
    # plain iteration would
    polish_at = config.check_interval * 8
    polish_backoff = config.check_interval * 8
    best_score = np.inf
    stall = 0

    for k in range(1, config.max_iter + 1):
        iters_done = k
        rhs = np.concatenate([config.sigma * x - q, z - y / rho_vec]) if nc else (config.sigma * x - q)
        sol = lu.solve(rhs)
        xt = sol[:nv]
        x_next = config.alpha * xt + (1 - config.alpha) * x
        if nc:
            nu = sol[nv:]
            zt = z + (nu - y) / rho_vec
            z_step = config.alpha * zt + (1 - config.alpha) * z + y / rho_vec
            z = np.clip(z_step, lo, hi)
            y = rho_vec * (z_step - z)
        x = x_next

        if k % config.check_interval and k != config.max_iter:
            continue

        # unscaled residuals
        ax = a @ x if nc else np.zeros(0)
        ax_u = ax / e if nc else ax
        z_u = z / e if nc else z
        px_u = (p @ x) / d / cost
        aty_u = (a.T @ y) / d / cost if nc else np.zeros(nv)
        q_u = q / d / cost
        r_prim = float(np.max(np.abs(ax_u - z_u), initial=0.0))
        r_dual = float(np.max(np.abs(px_u + q_u + aty_u)))
        eps_prim = config.eps_abs + config.eps_rel * max(
            np.max(np.abs(ax_u), initial=0.0), np.max(np.abs(z_u), initial=0.0)
        )
        px_floor = (p_abs @ np.abs(x)) / d / cost
        aty_floor = (at_abs @ np.abs(y)) / d / cost if nc else np.zeros(nv)
        eps_dual = max(
            config.eps_abs
            + config.eps_rel * max(np.max(np.abs(px_u)), np.max(np.abs(q_u)), np.max(np.abs(aty_u))),
            100.0 * np.finfo(float).eps * max(np.max(px_floor), np.max(aty_floor)),
        )
        if r_prim <= eps_prim and r_dual <= eps_dual:
            status = SolveStatus.OPTIMAL
            break

        score = max(r_prim / max(eps_prim, 1e-300), r_dual / max(eps_dual, 1e-300))
        if score < 0.7 * best_score:
            best_score = score
            stall = 0
        else:
            stall += 1

        if config.polish and nc and k >= polish_at:
            polish_backoff *= 2
            polish_at = k + polish_backoff
            pol = _polish(problem, d * x, (e * y) / cost, config)
            if pol is not None:
                xp, yp, rp, rd = pol
                ep = config.eps_abs + config.eps_rel * _prim_scale(problem, xp)
                ed = config.eps_abs + config.eps_rel * _dual_scale(problem, xp, yp)
                if rp <= ep and rd <= ed:
                    status = SolveStatus.OPTIMAL
                    polished = True
                    x_out, y_out, r_prim, r_dual = xp, yp, rp, rd
                    break

        if config.second_order_fallback and stall >= config.stall_checks:
            break

        if nc and _primal_infeasible(problem, (y - y_chk) * e / cost, config.eps_infeas):
            status = SolveStatus.INFEASIBLE
            break
        if _dual_infeasible(problem, (x - x_chk) * d, config.eps_infeas):
            status = SolveStatus.INFEASIBLE
            break
        x_chk, y_chk = x.copy(), y.copy()

        if config.time_limit_seconds is not None and time.perf_counter() - t0 > config.time_limit_seconds:
            timed_out = True
            break

        if config.adaptive_rho and nc and k % (config.check_interval * 2) == 0:
            num = r_prim / max(
                np.max(np.abs(ax_u), initial=0.0), np.max(np.abs(z_u), initial=0.0), 1e-12
            )
            den = r_dual / max(
                np.max(np.abs(px_u)), np.max(np.abs(q_u)), np.max(np.abs(aty_u)), 1e-12
            )
            ratio = np.sqrt(num / max(den, 1e-16))
            new_rho = float(np.clip(rho * ratio, 1e-6, 1e7))
            if new_rho / rho > 2 or new_rho / rho < 0.5:
                rho = new_rho
                rho_vec = np.full(nc, rho)
                rho_vec[eq] = rho * 1e3
                rho_vec[loose] = 1e-6
                lu = _kkt_factor(p, a, config.sigma, rho_vec)

    if not polished:
        x_out = d * x
        y_out = (e * y) / cost if nc else np.zeros(0)
        if status is SolveStatus.OPTIMAL and config.polish and nc:
            pol = _polish(problem, x_out, y_out, config)
            if pol is not None:
                x_out, y_out, r_prim, r_dual = pol
                polished = True

    if (
        status is SolveStatus.MAX_ITER
        and config.second_order_fallback
        and not timed_out
    ):
        # the interior-point stage is tried on the raw data first and on the
        # equilibrated data second: the identity-quadratic dual behaves best
        # raw, while the big-M^2 primal needs equilibration to factorize
        res = None
        for use_scaling in (False, True):
            if use_scaling:
                trial = _ipm_stage(QpProblem(p=p, q=q, a=a, lower=lo, upper=hi), config, t0)
                if trial is None:
                    continue
                xs, ys, _, _, t_iters, t_low, t_up = trial
                xt = d * xs
                yt = (e * ys) / cost if nc else np.zeros(0)
            else:
                trial = _ipm_stage(problem, config, t0)
                if trial is None:
                    continue
                xt, yt, _, _, t_iters, t_low, t_up = trial
            axt = problem.a @ xt if nc else np.zeros(0)
            rpt = float(np.max(np.abs(axt - np.clip(axt, problem.lower, problem.upper)), initial=0.0))
            rdt = float(np.max(np.abs(problem.p @ xt + problem.q + (problem.a.T @ yt if nc else 0.0))))
            ept = config.eps_abs + config.eps_rel * _prim_scale(problem, xt)
            edt = config.eps_abs + config.eps_rel * _dual_scale(problem, xt, yt)
            ratio = max(rpt / max(ept, 1e-300), rdt / max(edt, 1e-300))
            if res is None or ratio < res[0]:
                res = (ratio, xt, yt, rpt, rdt, t_iters, t_low, t_up)
            if ratio <= 1.0:
                break
        if res is not None:
            _, xi, yi, rpi, rdi, ipm_iters, low_act, up_act = res
            iters_done += ipm_iters
            if nc and _is_identity(problem.a):
                xi = _projected_descent(problem, xi, config)
                grad_i = problem.p @ xi + problem.q
                yi = np.where(
                    (xi <= problem.lower + 1e-9 * (1.0 + np.abs(xi)))
                    | (np.isfinite(problem.upper) & (xi >= problem.upper - 1e-9 * (1.0 + np.abs(xi)))),
                    -grad_i,
                    0.0,
                )
                axi2 = problem.a @ xi
                rpi = float(np.max(np.abs(axi2 - np.clip(axi2, problem.lower, problem.upper)), initial=0.0))
                rdi = float(np.max(np.abs(grad_i + yi)))
                low_act = (xi <= problem.lower + 1e-9 * (1.0 + np.abs(xi)))
                up_act = np.isfinite(problem.upper) & (xi >= problem.upper - 1e-9 * (1.0 + np.abs(xi)))
            if config.polish and nc:
                pol = _polish(problem, xi, yi, config, active=(low_act, up_act))
                if pol is None:
                    # retry from slack-threshold classifications; crossover
                    # guesses occasionally miss weakly active rows
                    axi2 = problem.a @ xi
                    for tau in (1e-8, 1e-5, 1e-3):
                        la2 = (axi2 - problem.lower) <= tau * (1.0 + np.abs(problem.lower))
                        ua2 = np.isfinite(problem.upper) & (
                            (problem.upper - axi2) <= tau * (1.0 + np.abs(problem.upper))
                        )
                        pol = _polish(problem, xi, yi, config, active=(la2, ua2))
                        if pol is not None:
                            break
                if pol is not None:
                    # the polished multipliers are complementarity-clean,
                    # which matters more downstream than a marginally
                    # smaller interior-point residual
                    xp, yp, rp, rd = pol
                    ep = config.eps_abs + config.eps_rel * _prim_scale(problem, xp)
                    ed = config.eps_abs + config.eps_rel * _dual_scale(problem, xp, yp, floored=True)
                    if (rp <= ep and rd <= ed) or (rp <= rpi and rd <= rdi):
                        xi, yi, rpi, rdi = xp, yp, rp, rd
                        polished = True
            old_score = max(r_prim, r_dual)
            if max(rpi, rdi) < old_score or not np.isfinite(old_score):
                x_out, y_out, r_prim, r_dual = xi, yi, rpi, rdi
            ep = config.eps_abs + config.eps_rel * _prim_scale(problem, x_out)
            ed = config.eps_abs + config.eps_rel * _dual_scale(problem, x_out, y_out, floored=polished)
            if r_prim <= ep and r_dual <= ed:
                status = SolveStatus.OPTIMAL

    # for bound-constrained problems a support-restricted descent pass is an
    # exact, objective-guarded finisher; splitting iterates can satisfy the
    # residual gates while still carrying error along the quadratic term's
    # soft directions, which this step eliminates
    if nc and status is not SolveStatus.INFEASIBLE and _is_identity(problem.a):
        x_desc = _projected_descent(problem, x_out, config)
        if problem.objective(x_desc) < problem.objective(x_out):
            grad_d = problem.p @ x_desc + problem.q
            x_scale = 1.0 + np.abs(x_desc)
            pinned_d = (x_desc <= problem.lower + 1e-9 * x_scale) | (
                np.isfinite(problem.upper) & (x_desc >= problem.upper - 1e-9 * x_scale)
            )
            y_desc = np.where(pinned_d, -grad_d, 0.0)
            ax_d = problem.a @ x_desc
            rp_d = float(np.max(np.abs(ax_d - np.clip(ax_d, problem.lower, problem.upper)), initial=0.0))
            rd_d = float(np.max(np.abs(grad_d + y_desc)))
            x_out, y_out, r_prim, r_dual = x_desc, y_desc, rp_d, rd_d
            polished = True
            ep = config.eps_abs + config.eps_rel * _prim_scale(problem, x_out)
            ed = config.eps_abs + config.eps_rel * _dual_scale(problem, x_out, y_out, floored=True)
            if r_prim <= ep and r_dual <= ed:
                status = SolveStatus.OPTIMAL

    obj = problem.objective(x_out)
    return QpSolution(
        x=x_out,
        y_mult=-y_out,
        status=status,
        primal_res=r_prim,
        dual_res=r_dual,
        iterations=iters_done,
        solve_seconds=time.perf_counter() - t0,
        obj_value=obj,
        polished=polished,
        timed_out=timed_out,
    )


def _ipm_stage(problem: QpProblem, config: SolverConfig, t0: float, max_iter: int = 60):
    """Sparse predictor-corrector interior-point stage.

    Works on the quasi-definite KKT system with one splu factorization per
    iteration; convergence is insensitive to the big-M^2 conditioning that
    stalls the splitting iteration.  Returns (x, y, primal_res, dual_res,
    iterations) in the solver's internal multiplier convention, or None when
    it could not produce a finite iterate.
    """
    nv = problem.var_count
    lo, hi = problem.lower, problem.upper
    a = sp.csr_matrix(problem.a)
    eqr = np.where(lo == hi)[0]
    upr = np.where((lo != hi) & np.isfinite(hi))[0]
    lor = np.where((lo != hi) & np.isfinite(lo))[0]
    ne = eqr.size
    ni = upr.size + lor.size
    cmat = a[eqr].tocsc() if ne else sp.csc_matrix((0, nv))
    if ni:
        gmat = sp.vstack([a[upr], -a[lor]], format="csc")
        h = np.concatenate([hi[upr], -lo[lor]])
    else:
        gmat = sp.csc_matrix((0, nv))
        h = np.zeros(0)
    d_eq = lo[eqr]
    q = problem.q
    p = problem.p
    delta = 1e-9

    init = sp.bmat(
        [
            [p + sp.identity(nv), cmat.T if ne else None],
            [cmat if ne else None, -delta * sp.identity(ne) if ne else None],
        ],
        format="csc",
    ) if ne else (p + sp.identity(nv)).tocsc()
    try:
        sol0 = spla.splu(init).solve(np.concatenate([-q, d_eq]))
    except RuntimeError:
        return None
    x = sol0[:nv]
    y = sol0[nv:]
    if ni:
        s_raw = h - gmat @ x
        shift = max(0.0, -1.5 * float(s_raw.min())) + 1e-2 * (1.0 + float(np.abs(h).max(initial=0.0)))
        s = s_raw + shift
        mu0 = 1e-2 * max(1.0, float(np.abs(problem.q).max(initial=0.0)))
        z = np.maximum(mu0 / s, 1e-10)
    else:
        s = np.zeros(0)
        z = np.zeros(0)

    scale0 = max(
        1.0,
        float(np.max(np.abs(q), initial=0.0)),
        float(np.max(np.abs(h), initial=0.0)),
        float(np.max(np.abs(d_eq), initial=0.0)),
    )
    p_abs = abs(p)
    c_abs = abs(cmat.T) if ne else None
    g_abs = abs(gmat.T) if ni else None
    best = None
    since_best = 0
    iters = 0
    for k in range(1, max_iter + 1):
        iters = k
        r_d = p @ x + q + (cmat.T @ y if ne else 0.0) + (gmat.T @ z if ni else 0.0)
        r_e = cmat @ x - d_eq if ne else np.zeros(0)
        r_i = gmat @ x + s - h if ni else np.zeros(0)
        mu = float(s @ z / ni) if ni else 0.0
        res = max(
            float(np.max(np.abs(r_d))),
            float(np.max(np.abs(r_e), initial=0.0)),
            float(np.max(np.abs(r_i), initial=0.0)),
        )
        if not np.isfinite(res):
            break
        if best is None or res + mu < best[0]:
            best = (res + mu, x.copy(), y.copy(), z.copy())
            since_best = 0
        else:
            since_best += 1
            # wandering at the precision floor; early-phase fluctuation is
            # normal, so only bail once complementarity is already tight
            if since_best >= 12 and mu <= 1e-7 * scale0:
                break
        # the componentwise products bound the accuracy at which r_d can be
        # evaluated at all when the quadratic term carries big-M^2 entries
        floor = max(
            float(np.max(p_abs @ np.abs(x), initial=0.0)),
            float(np.max(c_abs @ np.abs(y), initial=0.0)) if ne else 0.0,
            float(np.max(g_abs @ np.abs(z), initial=0.0)) if ni else 0.0,
        )
        target = max(
            0.1 * (config.eps_abs + config.eps_rel * scale0),
            50.0 * np.finfo(float).eps * floor,
        )
        if res <= target and mu <= max(target, config.eps_abs * scale0):
            break
        if mu < 1e-14 * scale0 and res > 100.0 * best[0]:
            break
        if config.time_limit_seconds is not None and time.perf_counter() - t0 > config.time_limit_seconds:
            break

        if ne or ni:
            row0 = [p + delta * sp.identity(nv)]
            row0 += [cmat.T] if ne else []
            row0 += [gmat.T] if ni else []
            rows = [row0]
            if ne:
                rows.append([cmat, -delta * sp.identity(ne)] + ([None] if ni else []))
            if ni:
                rows.append([gmat] + ([None] if ne else []) + [sp.diags(-s / z) - delta * sp.identity(ni)])
            kkt = sp.bmat(rows, format="csc")
        else:
            kkt = (p + delta * sp.identity(nv)).tocsc()
        try:
            lu = spla.splu(kkt)
        except RuntimeError:
            break

        def step(r_sz):
            rhs = np.concatenate([-r_d, -r_e, -r_i + r_sz / z if ni else np.zeros(0)])
            sol = lu.solve(rhs)
            # one refinement pass against the unregularized KKT keeps the
            # steps sharp when S/Z spans many orders of magnitude
            dx = sol[:nv]
            dy = sol[nv : nv + ne]
            dz = sol[nv + ne :]
            res_top = rhs[:nv] - (p @ dx + (cmat.T @ dy if ne else 0.0) + (gmat.T @ dz if ni else 0.0))
            res_mid = rhs[nv : nv + ne] - (cmat @ dx) if ne else np.zeros(0)
            res_bot = rhs[nv + ne :] - (gmat @ dx - (s / z) * dz) if ni else np.zeros(0)
            corr = lu.solve(np.concatenate([res_top, res_mid, res_bot]))
            sol = sol + corr
            dx = sol[:nv]
            dy = sol[nv : nv + ne]
            dz = sol[nv + ne :]
            ds = -r_i - gmat @ dx if ni else np.zeros(0)
            return dx, dy, dz, ds

        if ni:
            dx_a, dy_a, dz_a, ds_a = step(s * z)
            a_p = _max_step(s, ds_a)
            a_d = _max_step(z, dz_a)
            mu_aff = float((s + a_p * ds_a) @ (z + a_d * dz_a) / ni)
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            dx, dy, dz, ds = step(s * z - sigma * mu + ds_a * dz_a)
            a_p = min(1.0, 0.99 * _max_step(s, ds))
            a_d = min(1.0, 0.99 * _max_step(z, dz))
        else:
            dx, dy, dz, ds = step(np.zeros(0))
            a_p = a_d = 1.0
        x = x + a_p * dx
        y = y + a_d * dy
        if ni:
            s = np.maximum(s + a_p * ds, 1e-250)
            z = np.maximum(z + a_d * dz, 1e-250)

    if best is None:
        return None
    _, x, y, z = best
    y_int = np.zeros(problem.con_count)
    if ne:
        y_int[eqr] = y
    if ni:
        y_int[upr] += z[: upr.size]
        y_int[lor] -= z[upr.size :]

    # interior-point crossover classification: a row is active when its
    # multiplier dominates its slack or the slack itself is negligible
    # (slightly over-inclusive; the polish refinement releases extras)
    low_act = lo == hi
    up_act = np.zeros(problem.con_count, dtype=bool)
    if ni:
        s_end = h - gmat @ x
        mu_end = float(s_end @ np.maximum(z, 0.0) / ni) if ni else 0.0
        slack_tol = np.sqrt(max(mu_end, 0.0)) * (1.0 + np.abs(h))
        strong = (z > s_end) | (s_end <= slack_tol)
        up_act[upr] = strong[: upr.size]
        low_act[lor] |= strong[upr.size :]
    up_act &= lo != hi

    ax = problem.a @ x
    zc = np.clip(ax, lo, hi)
    rp = float(np.max(np.abs(ax - zc), initial=0.0))
    rd = float(np.max(np.abs(problem.p @ x + q + problem.a.T @ y_int)))
    return x, y_int, rp, rd, iters, low_act, up_act


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _prim_scale(problem: QpProblem, x: np.ndarray) -> float:
    if not problem.con_count:
        return 0.0
    ax = problem.a @ x
    return float(max(np.max(np.abs(ax)), np.max(np.abs(np.clip(ax, problem.lower, problem.upper)))))


def _dual_scale(problem: QpProblem, x: np.ndarray, y: np.ndarray, floored: bool = False) -> float:
    """Tolerance scale of the stationarity residual.

    The plain scale follows the solution magnitudes (OSQP-style).  For
    polished solutions — verified feasible, complementary and
    sign-consistent — the componentwise products |P||x| and |A'||y| are
    admitted instead: with big-M^2 entries the stationarity residual cancels
    many orders of magnitude, and the polished point's residual is
    evaluation noise at that cancellation floor rather than unconverged
    iterate error.
    """
    parts = [
        np.max(np.abs(problem.p @ x), initial=0.0),
        np.max(np.abs(problem.q), initial=0.0),
    ]
    cw = [np.max(abs(problem.p) @ np.abs(x), initial=0.0)]
    if problem.con_count:
        parts.append(np.max(np.abs(problem.a.T @ y), initial=0.0))
        cw.append(np.max(abs(problem.a).T @ np.abs(y), initial=0.0))
    scale = max(max(parts), 100.0 * np.finfo(float).eps * max(cw))
    if floored:
        scale = max(scale, *cw)
    return float(scale)


def _primal_infeasible(problem: QpProblem, dy: np.ndarray, eps: float) -> bool:
    norm = np.max(np.abs(dy), initial=0.0)
    if norm < 1e-14:
        return False
    dy = dy / norm
    if np.max(np.abs(problem.a.T @ dy)) > eps:
        return False
    up = np.maximum(dy, 0.0)
    dn = np.minimum(dy, 0.0)
    if np.any(up[np.isinf(problem.upper)] > eps) or np.any(-dn[np.isinf(problem.lower)] > eps):
        return False
    fin_u = ~np.isinf(problem.upper)
    fin_l = ~np.isinf(problem.lower)
    support = float(problem.upper[fin_u] @ up[fin_u] + problem.lower[fin_l] @ dn[fin_l])
    return support <= -eps


def _dual_infeasible(problem: QpProblem, dx: np.ndarray, eps: float) -> bool:
    norm = np.max(np.abs(dx), initial=0.0)
    if norm < 1e-14:
        return False
    dx = dx / norm
    if np.max(np.abs(problem.p @ dx)) > eps:
        return False
    if float(problem.q @ dx) > -eps:
        return False
    adx = problem.a @ dx
    up_inf = np.isinf(problem.upper)
    lo_inf = np.isinf(problem.lower)
    ok = np.ones(problem.con_count, dtype=bool)
    both = ~up_inf & ~lo_inf
    ok[both] = np.abs(adx[both]) <= eps
    ok[up_inf & ~lo_inf] = adx[up_inf & ~lo_inf] >= -eps
    ok[lo_inf & ~up_inf] = adx[lo_inf & ~up_inf] <= eps
    return bool(np.all(ok))


def _polish_kkt(problem: QpProblem, low_act, up_act, delta: float, y_center):
    """Solve the equality KKT system on one active-set guess.

    The whole quasi-definite system is Ruiz-equilibrated before the
    regularization is applied, so the big-M^2 spread of the penalized
    matrices cannot poison either the pivots or the recovered multipliers.
    The primal point is sharpened by refinement against the unregularized
    system.  Active sets of these problems are routinely rank deficient, so
    the multiplier is not unique; the returned one is selected by proximity
    to ``y_center`` (the splitting iterate, whose signs are valid by
    construction), which keeps the multiplier sign-consistent.
    """
    nv = problem.var_count
    act = np.where(low_act | up_act)[0]
    g = sp.csr_matrix(problem.a)[act, :].tocsc()
    target = np.where(low_act[act], problem.lower[act], problem.upper[act])
    na = act.size
    if na:
        k0 = sp.bmat([[problem.p, g.T], [g, None]], format="csc")
    else:
        k0 = problem.p.tocsc()

    # symmetric Ruiz equilibration of the KKT itself
    dim = nv + na
    dd = np.ones(dim)
    k_s = k0
    for _ in range(6):
        norms = _row_inf_norms(k_s)
        step_d = 1.0 / np.sqrt(np.clip(norms, 1e-12, None))
        step_d[norms == 0] = 1.0
        dmat = sp.diags(step_d)
        k_s = (dmat @ k_s @ dmat).tocsc()
        dd *= step_d
    reg = np.concatenate([np.full(nv, delta), np.full(na, -delta)])
    try:
        lu = spla.splu((k_s + sp.diags(reg)).tocsc())
    except RuntimeError:
        return None

    # The primal point refines against the unregularized system, guarded by
    # the refinement residual: with the right active set the system is
    # consistent and refinement converges to machine precision, with a
    # wrong one it diverges along structural null directions (the
    # piecewise-linear representation is not unique) and the guard keeps
    # the best iterate.  The multiplier comes from a second solve whose
    # proximal center is shifted to the splitting iterate, which anchors
    # the null-space component of the multiplier at sign-valid values.
    rhs = np.concatenate([-problem.q, target])
    r_s = dd * rhs
    sol = lu.solve(r_s)
    res_prev = float(np.max(np.abs(r_s - k_s @ sol)))
    for _ in range(25):
        cand = sol + lu.solve(r_s - k_s @ sol)
        res_new = float(np.max(np.abs(r_s - k_s @ cand)))
        if not np.isfinite(res_new) or res_new >= 0.85 * res_prev:
            break
        sol, res_prev = cand, res_new
    x_pol = (dd * sol)[:nv]
    if not np.all(np.isfinite(x_pol)):
        return None

    y_pol = np.zeros(problem.con_count)
    if na:
        # multiplier solve: same system with the proximal center shifted to
        # the splitting iterate, refined against the regularized operator
        shifted = r_s.copy()
        shifted[nv:] -= dd[nv:] * (delta * y_center[act] / dd[nv:] ** 2)
        sol_y = lu.solve(shifted)
        for _ in range(3):
            sol_y = sol_y + lu.solve(shifted - (k_s @ sol_y + reg * sol_y))
        y_pol[act] = (dd * sol_y)[nv:]
    if not np.all(np.isfinite(y_pol)):
        return None
    return x_pol, y_pol


def _is_identity(mat: sp.spmatrix) -> bool:
    if mat.shape[0] != mat.shape[1]:
        return False
    gap = mat - sp.identity(mat.shape[0])
    return gap.nnz == 0 or abs(gap).max() == 0.0


def _projected_descent(problem: QpProblem, x0: np.ndarray, config: SolverConfig, rounds: int = 60):
    """Active-set descent for bound-constrained problems.

    Classic least-squares-with-bounds inner loop: minimize exactly over the
    current free set, step toward the minimizer only as far as the first
    bound crossing (guaranteed descent by convexity), pin what lands on a
    bound, and release the worst wrong-sign pin at exact-minimizer rounds.
    Interior-point iterates on heavily degenerate faces land close to the
    optimal support but converge slowly; this finisher closes the gap.
    """
    lo, hi = problem.lower, problem.upper
    h = sp.csr_matrix(problem.p)
    q = problem.q
    col_norms = _col_inf_norms(h)
    col_norms[col_norms == 0] = 1.0
    dh = 1.0 / np.sqrt(col_norms)
    eq = lo == hi
    x = np.clip(x0, lo, hi)
    scale_x = 1.0 + float(np.max(np.abs(x)))
    pin_lo = eq | (x <= lo + 1e-9 * scale_x)
    pin_hi = ~eq & np.isfinite(hi) & (x >= hi - 1e-9 * scale_x)

    best_x = x.copy()
    best_obj = problem.objective(x)
    for _ in range(rounds):
        pinned = pin_lo | pin_hi
        free = np.where(~pinned)[0]
        z = np.where(pin_lo, lo, np.where(pin_hi, hi, 0.0))
        if free.size:
            hff = h[free][:, free].tocsc()
            rhs = -(q[free] + h[free] @ z)
            df = dh[free]
            hs = (sp.diags(df) @ hff @ sp.diags(df)).tocsc()
            try:
                lu = spla.splu((hs + 1e-12 * sp.identity(free.size)).tocsc())
            except RuntimeError:
                break
            r_s = df * rhs
            sol = lu.solve(r_s)
            res_prev = float(np.max(np.abs(r_s - hs @ sol), initial=0.0))
            for _ in range(20):
                nxt = sol + lu.solve(r_s - hs @ sol)
                res_new = float(np.max(np.abs(r_s - hs @ nxt), initial=0.0))
                if not np.isfinite(res_new) or res_new >= 0.9 * res_prev:
                    break
                sol, res_prev = nxt, res_new
            z[free] = df * sol
        if not np.all(np.isfinite(z)):
            break

        step = z - x
        crossing = np.ones(problem.var_count)
        below = step < 0
        above = step > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            crossing[below] = (lo[below] - x[below]) / step[below]
            fin_up = above & np.isfinite(hi)
            crossing[fin_up] = (hi[fin_up] - x[fin_up]) / step[fin_up]
        crossing[pinned] = 1.0
        crossing = np.clip(np.nan_to_num(crossing, nan=1.0, posinf=1.0), 0.0, 1.0)
        alpha = float(crossing.min())

        if alpha < 1.0:
            x = np.clip(x + alpha * step, lo, hi)
            scale_x = 1.0 + float(np.max(np.abs(x)))
            pin_lo = pin_lo | (~eq & (x <= lo + 1e-9 * scale_x))
            pin_hi = pin_hi | (~eq & np.isfinite(hi) & (x >= hi - 1e-9 * scale_x))
            obj = problem.objective(x)
            if obj < best_obj:
                best_obj, best_x = obj, x.copy()
            continue

        # full step reaches the subspace minimizer
        x = z
        obj = problem.objective(x)
        if obj < best_obj:
            best_obj, best_x = obj, x.copy()
        grad = h @ x + q
        wrong_lo = pin_lo & ~eq & (grad < 0)
        wrong_hi = pin_hi & (grad > 0)
        worst = max(
            float(np.max(-grad[wrong_lo], initial=0.0)),
            float(np.max(grad[wrong_hi], initial=0.0)),
        )
        g_tol = 1e-9 * (1.0 + float(np.max(np.abs(grad))))
        if worst <= g_tol:
            break
        release_lo = wrong_lo & (-grad >= 0.5 * worst)
        release_hi = wrong_hi & (grad >= 0.5 * worst)
        pin_lo = pin_lo & ~release_lo
        pin_hi = pin_hi & ~release_hi
    return best_x


def _polish_bounds(
    problem: QpProblem,
    y: np.ndarray,
    config: SolverConfig,
    low_act: np.ndarray,
    up_act: np.ndarray,
):
    """Active-set polish specialized to bound-constrained problems (A = I).

    Pinned variables sit at their bounds; the free block solves a consistent
    positive-semidefinite system, where components in the null space are
    harmless representation freedom (they change neither the residuals nor
    the evaluated multipliers).  Multipliers are evaluated directly from the
    stationarity identity, so no regularization bias can corrupt their
    signs.
    """
    nv = problem.var_count
    h = sp.csr_matrix(problem.p)
    eq = problem.lower == problem.upper
    col_norms = _col_inf_norms(h)
    col_norms[col_norms == 0] = 1.0
    dh = 1.0 / np.sqrt(col_norms)

    x_pol = None
    clean = False
    for _ in range(40):
        pinned = low_act | up_act
        free = np.where(~pinned)[0]
        bound_vals = np.where(low_act, problem.lower, np.where(up_act, problem.upper, 0.0))
        bound_vals[~pinned] = 0.0
        x_pol = bound_vals.copy()
        if free.size:
            hff = h[free][:, free].tocsc()
            rhs = -(problem.q[free] + h[free] @ bound_vals)
            df = dh[free]
            hs = (sp.diags(df) @ hff @ sp.diags(df)).tocsc()
            # the free-block system is consistent (normal equations), so a
            # tiny regularization plus refinement converges along every
            # range direction; null-space leakage is representation freedom
            # that affects neither residuals nor evaluated multipliers
            delta = min(config.polish_delta, 1e-12)
            try:
                lu = spla.splu((hs + delta * sp.identity(free.size)).tocsc())
            except RuntimeError:
                return None
            r_s = df * rhs
            sol = lu.solve(r_s)
            res_prev = float(np.max(np.abs(r_s - hs @ sol), initial=0.0))
            for _ in range(30):
                cand = sol + lu.solve(r_s - hs @ sol)
                res_new = float(np.max(np.abs(r_s - hs @ cand), initial=0.0))
                if not np.isfinite(res_new) or res_new >= 0.97 * res_prev:
                    break
                sol, res_prev = cand, res_new
            x_pol[free] = df * sol
        if not np.all(np.isfinite(x_pol)):
            return None

        grad = h @ x_pol + problem.q
        y_pol = np.zeros(nv)
        y_pol[pinned] = -grad[pinned]

        feas_tol = 1e-9 * (1.0 + float(np.max(np.abs(x_pol), initial=0.0)))
        pin_low = ~pinned & (x_pol < problem.lower - feas_tol)
        pin_up = ~pinned & ~eq & (x_pol > problem.upper + feas_tol)
        if pin_low.any() or pin_up.any():
            low_act = low_act | pin_low
            up_act = up_act | pin_up
            continue
        sign_tol = 1e-6 * (1.0 + float(np.max(np.abs(y_pol), initial=0.0)))
        drop_low = low_act & ~eq & (y_pol > sign_tol)
        drop_up = up_act & (y_pol < -sign_tol)
        if not (drop_low.any() or drop_up.any()):
            clean = True
            break
        # release only the dominant wrong-sign batch; full-batch drops on
        # degenerate bound stacks cycle
        worst = max(
            float(np.max(y_pol[drop_low], initial=0.0)),
            float(np.max(-y_pol[drop_up], initial=0.0)),
        )
        keep = 0.1 * worst
        low_act = low_act & ~(drop_low & (y_pol > keep))
        up_act = up_act & ~(drop_up & (-y_pol > keep))
    if not clean:
        return None
    return _polish_accept(problem, x_pol, y_pol, np.clip(x_pol, problem.lower, problem.upper), y, config)


def _polish_accept(problem, x_pol, y_pol, x0, y0, config):
    ax = problem.a @ x_pol
    z = np.clip(ax, problem.lower, problem.upper)
    r_prim = float(np.max(np.abs(ax - z), initial=0.0))
    r_dual = float(np.max(np.abs(problem.p @ x_pol + problem.q + problem.a.T @ y_pol)))

    ax0 = problem.a @ x0
    z0 = np.clip(ax0, problem.lower, problem.upper)
    r_prim0 = float(np.max(np.abs(ax0 - z0), initial=0.0))
    r_dual0 = float(np.max(np.abs(problem.p @ x0 + problem.q + problem.a.T @ y0)))
    ep_loc = config.eps_abs + config.eps_rel * _prim_scale(problem, x_pol)
    ed_loc = config.eps_abs + config.eps_rel * _dual_scale(problem, x_pol, y_pol, floored=True)
    if r_prim <= max(r_prim0, ep_loc) and r_dual <= max(r_dual0, ed_loc):
        return x_pol, y_pol, r_prim, r_dual
    return None


def _polish(
    problem: QpProblem,
    x: np.ndarray,
    y: np.ndarray,
    config: SolverConfig,
    active: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Re-solve the KKT system on the detected active set, refining the guess.

    Rows whose polished multiplier comes out with the wrong sign are
    released, rows the polished point violates are pinned, and the reduced
    system is re-solved (a few rounds at most).  Returns
    (x, y, primal_res, dual_res) when the polished point is clean and at
    least as accurate as the input iterate, else None.
    """
    eq = problem.lower == problem.upper
    if active is not None:
        low_act, up_act = active[0] | eq, active[1] & ~eq
    else:
        low_act = (y < 0) | eq
        up_act = (y > 0) & ~eq

    if _is_identity(problem.a):
        return _polish_bounds(problem, y, config, low_act, up_act)

    # refinement order matters: first complete the active set (pins only,
    # monotone), and judge multiplier signs only at primal-feasible points;
    # signs computed against an incomplete active set are misleading and
    # cause pin/drop cycling
    x_pol = y_pol = None
    clean = False
    for _ in range(40):
        res = _polish_kkt(problem, low_act, up_act, config.polish_delta, y)
        if res is None:
            return None
        x_pol, y_pol = res
        ax = problem.a @ x_pol
        feas_tol = 1e-9 * (1.0 + float(np.max(np.abs(ax), initial=0.0)))
        pin_low = ~low_act & (ax < problem.lower - feas_tol)
        pin_up = ~up_act & ~eq & (ax > problem.upper + feas_tol)
        if pin_low.any() or pin_up.any():
            low_act = low_act | pin_low
            up_act = up_act | pin_up
            continue
        sign_tol = 1e-6 * (1.0 + float(np.max(np.abs(y_pol), initial=0.0)))
        drop_low = low_act & ~eq & (y_pol > sign_tol)
        drop_up = up_act & (y_pol < -sign_tol)
        if not (drop_low.any() or drop_up.any()):
            clean = True
            break
        low_act = low_act & ~drop_low
        up_act = up_act & ~drop_up
    if not clean:
        return None
    # wrong-sign multiplier mass below sign_tol is left in place: zeroing it
    # would break stationarity through the large-norm rows, and downstream
    # consumers already tolerate solver-tolerance-level sign violations
    return _polish_accept(problem, x_pol, y_pol, x, y, config)
