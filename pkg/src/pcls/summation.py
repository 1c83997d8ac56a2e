"""Plain-text algebraic export of the separable dual, and its parser.

The dual of the penalized monotone-concave fit is written in scalar
(summation) form for algebraic modeling tools: one `min:` line, one
`st <name>: <linear expr> >= 0` line per named constraint row, and one
`bound:` line per sign-constrained variable.  Variables are ``v_i_j``
(1-based block and component); blocks i >= 2 carry a flipped sign relative
to the solver's internal dual vector, which turns their sign constraints
into the conventional ``v_i_j <= 0`` bounds.

Rows are emitted directly from the assembled constraint matrix, so the
export and the in-memory dual cannot drift apart.  ``meta`` lines carry
what the residual recovery needs: ``eps_i = y_i - ybar - v_1_i / sqrt(2)``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .matrices import AssembledProblem
from .model import Curvature, Dataset
from .qp import QpProblem


def _row_name(a: int, n: int, m: int) -> tuple[str, str]:
    """(kind, name) for the dual row belonging to stacked slot ``a`` (0-based)."""
    mn = m * n
    if a < mn:
        p, k = divmod(a, n)
        if k == 0:
            return "st", f"grad_balance_p{p + 1}"
        return "st", f"grad_p{p + 1}_obs{k + 1}"
    i, j = divmod(a - mn, n)
    if i == 0 and j == 0:
        return "st", "anchor"
    if i == 0:
        return "st", f"residual_link_obs{j + 1}"
    if j == 0:
        return "st", f"block_sum_obs{i + 1}"
    if j == i:
        return "bound", f"v_{i + 1}_1"
    return "bound", f"v_{i + 1}_{j + 1}"


def export_summation_form(ap: AssembledProblem, dataset: Dataset, fileobj) -> None:
    """Write the dual in scalar form; monotone concave fits only."""
    if not ap.shape.monotone or ap.shape.curvature is not Curvature.CONCAVE:
        raise ValueError("the summation export covers the monotone concave fit only")
    n, m = ap.n, ap.m
    y = dataset.y
    fileobj.write("# separable dual of the penalized monotone concave fit, summation form\n")
    fileobj.write("# recovery: eps_i = y_i - ybar - v_1_i / sqrt(2)\n")
    fileobj.write(f"meta n {n}\n")
    fileobj.write(f"meta m {m}\n")
    fileobj.write("meta big_m %.17g\n" % ap.big_m)
    fileobj.write("meta ybar %.17g\n" % y.mean())
    fileobj.write("meta y " + " ".join("%.17g" % v for v in y) + "\n")
    fileobj.write("min: 0.5 sumsq v\n")

    fcsc = sp.csc_matrix(ap.f)
    for a in range(ap.width):
        kind, name = _row_name(a, n, m)
        col = fcsc.getcol(a).tocoo()
        const = 2.0 * ap.c[a]
        if kind == "bound":
            fileobj.write(f"bound: {name} <= 0\n")
            continue
        terms = []
        for r, val in zip(col.row, col.data):
            b, j = divmod(int(r), n)
            coef = val if b == 0 else -val  # blocks >= 2 flip into v-space
            terms.append("%+.17g v_%d_%d" % (coef, b + 1, j + 1))
        if const != 0.0:
            terms.append("%+.17g" % const)
        fileobj.write(f"st {name}: " + " ".join(terms) + " >= 0\n")


def parse_summation_form(fileobj):
    """Rebuild a solvable QP from an exported model.

    Returns (problem, meta) where ``problem`` is over the n^2 flattened
    ``v`` variables (row-major blocks) and ``meta`` carries n, m, big_m,
    ybar and y for residual recovery.
    """
    meta: dict = {}
    rows = []
    lowers = []
    bound_upper: dict[int, float] = {}
    n = None

    def vindex(tok: str) -> int:
        _, i, j = tok.split("_")
        return (int(i) - 1) * n + (int(j) - 1)

    for raw in fileobj:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("meta "):
            _, key, *vals = line.split()
            if key in ("n", "m"):
                meta[key] = int(vals[0])
                if key == "n":
                    n = meta["n"]
            elif key == "y":
                meta["y"] = np.array([float(v) for v in vals])
            else:
                meta[key] = float(vals[0])
            continue
        if line.startswith("min:"):
            continue
        if line.startswith("bound:"):
            _, rest = line.split(":", 1)
            var, op, value = rest.split()
            if op != "<=":
                raise ValueError(f"unsupported bound direction {op!r}")
            bound_upper[vindex(var)] = float(value)
            continue
        if line.startswith("st "):
            body = line[3:]
            _, expr = body.split(":", 1)
            expr = expr.strip()
            if not expr.endswith(">= 0"):
                raise ValueError("constraint rows must end with '>= 0'")
            tokens = expr[: -len(">= 0")].split()
            coeffs: dict[int, float] = {}
            const = 0.0
            k = 0
            while k < len(tokens):
                value = float(tokens[k])
                if k + 1 < len(tokens) and tokens[k + 1].startswith("v_"):
                    coeffs[vindex(tokens[k + 1])] = coeffs.get(vindex(tokens[k + 1]), 0.0) + value
                    k += 2
                else:
                    const += value
                    k += 1
            rows.append(coeffs)
            lowers.append(-const)
            continue
        raise ValueError(f"unrecognized line: {line!r}")

    if n is None:
        raise ValueError("missing 'meta n' line")
    nv = n * n
    data, ri, ci = [], [], []
    for r, coeffs in enumerate(rows):
        for cix, val in coeffs.items():
            ri.append(r)
            ci.append(cix)
            data.append(val)
    lower = list(lowers)
    upper = [np.inf] * len(rows)
    for cix, ub in bound_upper.items():
        ri.append(len(lower))
        ci.append(cix)
        data.append(1.0)
        lower.append(-np.inf)
        upper.append(ub)
    a = sp.csc_matrix((data, (ri, ci)), shape=(len(lower), nv))
    problem = QpProblem(
        p=sp.identity(nv, format="csc"),
        q=np.zeros(nv),
        a=a,
        lower=np.array(lower),
        upper=np.array(upper),
    )
    return problem, meta


def recover_from_summation(v: np.ndarray, meta: dict) -> np.ndarray:
    """Residuals from a solved summation model: eps_i = y_i - ybar - v_1i/sqrt(2)."""
    n = meta["n"]
    y = meta["y"]
    return y - meta["ybar"] - np.asarray(v[:n], dtype=float) / np.sqrt(2.0)
