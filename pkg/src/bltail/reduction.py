"""Reduced two-dimensional problem at a rational direction and its directional limits."""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .cell import CellError, Knobs, ProfileM, TailEstimate, compute_m, extract_tail, mu_at
from .grid import GridFunction, assemble, solve, strip_domain
from .lattice import LatticeVector, geodesic_toward, rational_approx_direction
from .operators import Operator, OperatorError, TorusFunction, project_2d


@dataclass(frozen=True)
class ReducedKnobs:
    n_lat: int = 64  # nodes per lateral period
    depth: float = 4.0  # strip depth in lateral periods
    max_doublings: int = 3
    osc_target: float = 1e-5
    refine: bool = True
    tol: float | None = None


@dataclass
class DirectionalLimit:
    eta: np.ndarray
    L: float
    uncertainty: float
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"eta": [float(c) for c in self.eta], "L": self.L, "uncertainty": self.uncertainty,
                "meta": {k: v for k, v in self.meta.items() if isinstance(v, (int, float, str, bool, list))}}


def _solve_W_once(G: Operator, m: ProfileM, n_lat: int, depth: float, tol):
    T = m.T
    h = T / n_lat
    n_s = max(4, math.ceil(depth * n_lat))
    dom = strip_domain([np.array([T, 0.0])], [n_lat], np.array([0.0, 1.0]), n_s * h, n_s)
    bottom = lambda p: m(p[..., 0])
    cap = float(m(dom.points()[..., 0, 0]).mean())
    P = assemble(G, dom, bc=(bottom, cap))
    u, rep = solve(P, tol=tol)
    est = extract_tail(u, check=False)
    # second pass with the cap moved to the estimated tail
    s = np.arange(n_s + 1) / n_s
    u0 = u.values + (est.mu - cap) * s
    P = assemble(G, dom, bc=(bottom, est.mu))
    u, rep2 = solve(P, tol=tol, u0=u0)
    est = extract_tail(u, check=False)
    est.meta.update({"solver_residual": max(rep.residual, rep2.residual),
                     "converged": rep.converged and rep2.converged})
    return u, est


def solve_W(G: Operator, m: ProfileM, knobs: ReducedKnobs = ReducedKnobs()) -> tuple[GridFunction, TailEstimate]:
    """Lateral-periodic strip with period T = 1/|xi| and boundary data m(z1)."""
    if G.d != 2 or not G.homogeneous:
        raise OperatorError("solve_W needs a homogeneous two-dimensional operator")
    lo, hi = float(m.m.min()), float(m.m.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi), abs(lo)):
        hi = lo  # rounding-level spread: a constant profile
    depth = knobs.depth
    for attempt in range(knobs.max_doublings + 1):
        u, est = _solve_W_once(G, m, knobs.n_lat, depth, knobs.tol)
        if hi - lo == 0 or est.residual_osc <= knobs.osc_target * (hi - lo):
            break
        depth *= 2
    if hi > lo and est.residual_osc > 0.1 * (hi - lo):
        raise CellError("reduced strip too short")
    est.uncertainty = est.residual_osc + est.meta["solver_residual"] * (depth * m.T) ** 2 / 8
    if knobs.refine:
        _, fine = _solve_W_once(G, m, 2 * knobs.n_lat, depth, knobs.tol)
        est.meta["refinement"] = abs(fine.mu - est.mu)
        est.meta["mu_fine"] = fine.mu
        est.uncertainty += abs(fine.mu - est.mu) + fine.residual_osc
    est.meta["depth"] = depth * m.T
    return u, est


# --------------------------------------------------------------------------- L_xi

_M_CACHE: dict = {}
_M_LOCK = threading.Lock()


def cached_m(F: Operator, psi: TorusFunction, xi, n_samples: int | None = None, knobs: Knobs = Knobs()) -> ProfileM:
    xi = LatticeVector.of(xi)
    key = (F.digest(), str(sorted(psi.to_dict().items())), xi.comps, n_samples, knobs)
    with _M_LOCK:
        hit = _M_CACHE.get(key)
    if hit is not None:
        return hit
    m = compute_m(F, psi, xi, n_samples, knobs)
    with _M_LOCK:
        _M_CACHE[key] = m
    return m


def effective_2d(F: Operator, xi, eta) -> Operator:
    """G_{xi,eta}: projection of the homogeneous (or homogenized linear) operator."""
    if not F.homogeneous:
        if F.is_linear:
            from .homogenize import homogenized_linear_operator
            F = homogenized_linear_operator(F)
        else:
            raise OperatorError("directional limits for spatially varying nonlinear operators are not supported")
    return project_2d(F, LatticeVector.of(xi).array, np.asarray(eta, dtype=float))


def L_xi(F: Operator, psi: TorusFunction, xi, eta, m: ProfileM | None = None,
         knobs: ReducedKnobs = ReducedKnobs(), cell_knobs: Knobs = Knobs(),
         n_samples: int | None = None) -> DirectionalLimit:
    xi = LatticeVector.of(xi)
    eta = np.asarray(eta, dtype=float)
    eta = eta / np.linalg.norm(eta)
    if abs(eta @ xi.unit) > 1e-10:
        raise OperatorError("eta must be orthogonal to xi")
    G = effective_2d(F, xi, eta)
    if m is None:
        m = cached_m(F, psi, xi, n_samples, cell_knobs)
    _, est = solve_W(G, m, knobs)
    # sampling error of the boundary profile enters through the maximum principle
    m_unc = float(m.residuals().max()) if m.tails else 0.0
    meta = dict(est.meta)
    meta.update({"residual_osc": est.residual_osc, "m_uncertainty": m_unc, "xi": list(xi.comps),
                 "m_mean": m.mean(), "m_min": float(m.m.min()), "m_max": float(m.m.max())})
    if not F.homogeneous:
        meta["note"] = "homogenized reduced problem used directly"
    return DirectionalLimit(eta, est.mu, est.uncertainty + m_unc, meta)


def tangent_circle(xi, n: int = 8) -> list[np.ndarray]:
    """Unit vectors orthogonal to xi at uniform angles (two antipodal points in d = 2)."""
    xi = LatticeVector.of(xi)
    xh = xi.unit
    if xi.d == 2:
        e = np.array([-xh[1], xh[0]])
        return [e, -e]
    a = np.eye(3)[int(np.argmin(np.abs(xh)))]
    e1 = a - (a @ xh) * xh
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(xh, e1)
    return [math.cos(t) * e1 + math.sin(t) * e2 for t in np.arange(n) * 2 * math.pi / n]


def asymptotic_gap(F: Operator, psi: TorusFunction, xi, eta_hat, t_list, knobs: Knobs = Knobs(),
                   reduced: ReducedKnobs = ReducedKnobs(), L: DirectionalLimit | None = None,
                   eps_of_t=None, max_norm: float = 64.0) -> list[dict]:
    """Rows (t, mu(nu(t)), L, |mu - L|, uncertainties) along the geodesic toward xi_hat."""
    t_list = [float(t) for t in t_list]
    if any(not 0 < t <= 0.25 for t in t_list):
        raise ValueError("t must lie in (0, 1/4]")
    if any(b > a for a, b in zip(t_list, t_list[1:])):
        raise ValueError("t_list must be decreasing")
    xi = LatticeVector.of(xi)
    d = xi.d
    if L is None:
        L = L_xi(F, psi, xi, eta_hat, knobs=reduced, cell_knobs=knobs)
    rows = []
    for t in t_list:
        nu = geodesic_toward(xi, eta_hat, t)
        # the approximant must resolve the angle t: its Dirichlet error eps^(1/d) stays below t/2
        eps = eps_of_t(t) if eps_of_t is not None else (t / 2) ** d
        row = {"t": t, "L": L.L, "L_unc": L.uncertainty}
        try:
            mu = mu_at(F, psi, nu, eps, knobs, max_norm=max_norm)
        except CellError as err:
            row.update({"mu": math.nan, "gap": math.nan, "mu_unc": math.nan, "flag": f"failed: {err}"})
            rows.append(row)
            continue
        xi_t, _ = rational_approx_direction(nu, mu.meta["eps"])
        row.update({"mu": mu.mu, "mu_unc": mu.uncertainty, "gap": abs(mu.mu - L.L),
                    "xi_approx": list(xi_t.comps), "replacement_gap": mu.meta["gap"],
                    "flag": "partial" if mu.meta.get("partial") else ""})
        rows.append(row)
    return rows
