"""Effective operators from periodic corrector problems and the interior homogenization rate."""
from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import DiscreteProblem, GridFunction, SolveReport, assemble, solve, strip_domain, torus_domain
from .operators import (LinearOperator, MatrixField, Operator, OperatorError, TorusFunction, as_sym,
                        tree_leaves)


class HomogenizationError(RuntimeError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history or []


def default_torus_n(d: int) -> int:
    return 64 if d == 2 else 32


@dataclass
class CorrectorSolution:
    M: np.ndarray
    v: GridFunction | None
    Fbar_M: float
    spread: float = 0.0
    v_sup: float = 0.0
    report: SolveReport | None = None

    def to_dict(self) -> dict:
        return {"M": self.M.tolist(), "Fbar_M": self.Fbar_M, "spread": self.spread, "v_sup": self.v_sup,
                "report": self.report.to_dict() if self.report else None}


@dataclass
class LinearEffective:
    Abar: np.ndarray
    correctors: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"Abar": self.Abar.tolist(),
                "corrector_sup": {f"{i}{j}": float(np.abs(v.values).max()) for (i, j), v in self.correctors.items()}}


# --------------------------------------------------------------------------- ergodic cell problem


def _corrector_problem(F: Operator, M: np.ndarray, n: int) -> DiscreteProblem:
    dom = torus_domain(F.d, n)
    pts = dom.points().reshape(-1, F.d)
    offsets = []
    for lf in tree_leaves(F.control_tree()):
        A = lf.coef
        offsets.append(-np.einsum("ij,ji->", A.const, M) if A.homogeneous
                       else -np.einsum("nij,ji->n", A(pts), M))
    return assemble(F, dom, offsets=offsets)


def _bordered(A):
    N = A.shape[0]
    col = -np.ones((N, 1))
    row = np.zeros((1, N + 1))
    row[0, 0] = 1.0  # v(0) = 0
    return sp.bmat([[A, sp.csr_matrix(col)], [sp.csr_matrix(row[:, :N]), sp.csr_matrix([[0.0]])]]).tocsc()


def _ergodic_howard(P: DiscreteProblem, tol: float, max_iter: int, report: SolveReport):
    v = np.zeros(P.N)
    leaf_old = None
    seen = set()
    for _ in range(max_iter):
        r, leaf, D = P.evaluate(v)
        report.iterations += 1
        spread = float(r.max() - r.min())
        report.history.append(spread)
        if spread <= tol:
            return v, float(r.mean()), spread, True
        if leaf_old is not None:
            old = np.empty(P.N)
            for k in np.unique(leaf_old):
                sel = leaf_old == k
                old[sel] = P.leaf_value_at(k, D, sel)
            keep = np.abs(old - r) <= 1e-12 * (1.0 + np.abs(r).max())
            leaf = np.where(keep, leaf_old, leaf)
        key = leaf.tobytes()
        if key in seen:
            break
        seen.add(key)
        A, b = P.linear_system(leaf, v)
        x = splu(_bordered(A)).solve(np.append(b, 0.0))
        report.linear_solves += 1
        v = x[:-1]
        leaf_old = leaf
    r, _, _ = P.evaluate(v)
    spread = float(r.max() - r.min())
    return v, float(r.mean()), spread, spread <= tol


def _ergodic_pseudo_time(P: DiscreteProblem, tol: float, max_steps: int, report: SolveReport, v0=None):
    v = np.zeros(P.N) if v0 is None else v0.copy()
    tau = 1.0 / max(P.diag_max(), 1e-300)
    spread = math.inf
    for _ in range(max_steps):
        r, _, _ = P.evaluate(v)
        spread = float(r.max() - r.min())
        if spread <= tol:
            break
        v = v - tau * (r - r.mean())
        v -= v[0]
        report.iterations += 1
        if report.iterations % 100 == 0:
            report.history.append(spread)
    r, _, _ = P.evaluate(v)
    spread = float(r.max() - r.min())
    return v, float(r.mean()), spread, spread <= tol


def effective_operator(F: Operator, M, n: int | None = None, tol: float | None = None,
                       method: str = "howard", max_iter: int = 100, max_steps: int = 200_000,
                       v0=None) -> CorrectorSolution:
    """Ergodic constant Fbar(M) of F(M + D^2 v, y) = Fbar(M) on the torus grid, with v(0) = 0."""
    M = as_sym(M, F.d)
    if F.homogeneous:
        return CorrectorSolution(M, None, float(F.evaluate(M)), 0.0, 0.0, SolveReport(0, 0.0, 0.0, True, "exact"))
    n = n or default_torus_n(F.d)
    if tol is None:
        tol = 1e-9 * F.Lambda * max(1.0, float(np.abs(M).max()))
    t0 = time.perf_counter()
    P = _corrector_problem(F, M, n)
    report = SolveReport(0, math.inf, 0.0, False, method)
    if method == "howard":
        v, c, spread, ok = _ergodic_howard(P, tol, max_iter, report)
        if not ok:
            report.method = "howard+pseudo-time"
            v, c, spread, ok = _ergodic_pseudo_time(P, tol, max_steps, report, v)
    elif method == "pseudo-time":
        v, c, spread, ok = _ergodic_pseudo_time(P, tol, max_steps, report, v0)
    else:
        raise ValueError(f"unknown method {method!r}")
    report.residual, report.converged = spread, ok
    report.wall_time = time.perf_counter() - t0
    if not ok:
        raise HomogenizationError(f"corrector did not converge (spread {spread:.3g})", report.history)
    v = v - v[0]
    gf = GridFunction(P.domain, v)
    return CorrectorSolution(M, gf, c, spread, float(np.abs(v).max()), report)


class EffectiveOperator(Operator):
    """Fbar evaluated lazily through corrector solves, memoized on the exact queried matrices."""

    def __init__(self, F: Operator, n: int | None = None, tol: float | None = None):
        self.F, self.n, self.tol = F, n, tol
        self.d, self.Lambda, self.lam = F.d, F.Lambda, F.lam
        self.homogeneous = True
        self._memo: dict = {}
        self._lock = threading.Lock()

    def evaluate(self, M, y=None):
        M = as_sym(M, self.d)
        if M.ndim > 2:
            flat = M.reshape(-1, self.d, self.d)
            return np.array([self.evaluate(m) for m in flat]).reshape(M.shape[:-2])
        key = tuple(np.round(M, 12).ravel())
        with self._lock:
            hit = self._memo.get(key)
        if hit is None:
            hit = effective_operator(self.F, M, self.n, self.tol).Fbar_M
            with self._lock:
                self._memo[key] = hit
        return hit

    def control_tree(self):
        raise OperatorError("the effective operator of a nonlinear field has no explicit control tree")

    def to_dict(self):
        return {"kind": "effective", "base": self.F.to_dict(), "n": self.n}


# --------------------------------------------------------------------------- linear case


def _sym_unit(d, i, j):
    M = np.zeros((d, d))
    M[i, j] = M[j, i] = 1.0 if i == j else 0.5
    return M


def linear_correctors(A, n: int | None = None, Lambda: float | None = None) -> LinearEffective:
    """Correctors v_ij and the effective matrix for -Tr(A(y) M); one factorization serves all (i, j)."""
    op = A if isinstance(A, LinearOperator) else LinearOperator(MatrixField.of(A), Lambda)
    d = op.d
    if op.A.homogeneous:
        return LinearEffective(op.A.const.copy(), {})
    n = n or default_torus_n(d)
    P = _corrector_problem(op, np.zeros((d, d)), n)
    L, _ = P.linear_system(np.zeros(P.N, dtype=np.int64), np.zeros(P.N))
    lu = splu(_bordered(L))
    pts = P.int_points
    Ay = op.A(pts)
    Abar = np.zeros((d, d))
    corr = {}
    for i in range(d):
        for j in range(i, d):
            rhs = np.einsum("nij,ji->n", Ay, _sym_unit(d, i, j))  # -offset
            x = lu.solve(np.append(rhs, 0.0))
            Abar[i, j] = Abar[j, i] = -x[-1]
            corr[(i, j)] = GridFunction(P.domain, x[:-1])
    return LinearEffective(Abar, corr)


def homogenized_linear_operator(F: LinearOperator, n: int | None = None) -> LinearOperator:
    eff = linear_correctors(F, n)
    return LinearOperator(eff.Abar, F.Lambda, check=False)


# --------------------------------------------------------------------------- interior rate


def rescale_field(A: MatrixField, k: int) -> MatrixField:
    """A(k y) for integer k (coefficients oscillating at scale 1/k)."""
    ents = []
    for i, j, f in A.entries:
        if f.grid is not None:
            raise OperatorError("sampled coefficients cannot be rescaled")
        ents.append((i, j, TorusFunction(f.d, tuple((a, tuple(k * c for c in fr), p) for a, fr, p in f.terms))))
    return MatrixField(A.const, tuple(ents))


def fit_slope(x, y) -> float:
    x, y = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def interior_rate_experiment(F: Operator, g, R: float = 1.0, eps_list=(1 / 8, 1 / 16, 1 / 32),
                             points_per_cell: int = 8, n_torus: int | None = None) -> dict:
    """Slab 0 < x_d < R, lateral period 1, Dirichlet data g on both faces.

    Compares the solve with coefficients A(x/eps) against the homogenized one on
    the same grid (h = eps / points_per_cell) and fits log(error) against log(eps).
    """
    d = F.d
    if not F.homogeneous and not F.is_linear:
        raise OperatorError("interior rate experiment supports linear or homogeneous operators")
    Fbar = F if F.homogeneous else homogenized_linear_operator(F, n_torus)
    rows = []
    normal = np.eye(d)[-1]
    for eps in eps_list:
        k = round(1 / eps)
        if abs(k * eps - 1) > 1e-12:
            raise ValueError("1/eps must be an integer so that the slab period is compatible")
        n = k * points_per_cell
        n_s = max(4, round(R * n))
        dom = strip_domain(list(np.eye(d)[:-1]), [n] * (d - 1), normal, n_s / n, n_s)
        Feps = F if F.homogeneous else LinearOperator(rescale_field(F.A, k), F.Lambda, check=False)
        ue, re = solve(assemble(Feps, dom, bc=(g, g)))
        ub, rb = solve(assemble(Fbar, dom, bc=(g, g)))
        err = float(np.abs(ue.values - ub.values).max())
        rows.append({"eps": eps, "h": 1 / n, "error": err, "residual_eps": re.residual,
                     "residual_bar": rb.residual})
    errs = [r["error"] for r in rows]
    slope = fit_slope([r["eps"] for r in rows], errs) if len(rows) >= 2 and min(errs) > 0 else math.nan
    return {"rows": rows, "slope": slope, "Abar": getattr(Fbar, "A", None) and Fbar.A.const.tolist()}
