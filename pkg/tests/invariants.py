"""Randomized instance checks shared by the property tests and the acceptance gate.

Each check takes an integer seed, builds one random instance and returns the
size of the violation (0.0 when the property holds).
"""
from __future__ import annotations

import math

import numpy as np

from bltail.cell import CellSpec, Knobs, cell_tail
from bltail.grid import assemble, solve, strip_domain
from bltail.operators import (IsaacsOperator, PucciOperator, TorusFunction, laplacian, perturb_operator, pucci)

SLACK = 1e-9


def random_operator(rng, d=2):
    k = rng.integers(4)
    Lam = float(rng.uniform(1.0, 3.0))
    if k == 0:
        return laplacian(d)
    if k == 1:
        return PucciOperator("+" if rng.random() < 0.5 else "-", Lam, d)
    if k == 2:
        mats = []
        for _ in range(2):
            w = rng.uniform(1.0, Lam, d)
            Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
            mats.append(Q @ np.diag(w) @ Q.T)
        return IsaacsOperator([mats])
    e = rng.standard_normal(d)
    return perturb_operator(laplacian(d), e / np.linalg.norm(e), float(rng.uniform(0.1, 1.0)))


def random_trig(rng, d=2, n_terms=3, max_freq=2):
    terms = []
    for _ in range(n_terms):
        k = tuple(int(c) for c in rng.integers(-max_freq, max_freq + 1, d))
        terms.append((float(rng.uniform(-1, 1)), k, float(rng.uniform(0, 2 * math.pi))))
    return TorusFunction(d, tuple(terms))


def random_sym(rng, d):
    B = rng.standard_normal((d, d))
    return 0.5 * (B + B.T)


def _strip(n=8):
    return strip_domain([np.array([1.0, 0.0])], [n], np.array([0.0, 1.0]), 1.0, n)


def _bottom(rng):
    c = rng.uniform(-1, 1, 4)
    return lambda p: (c[0] * np.cos(2 * np.pi * p[..., 0]) + c[1] * np.sin(2 * np.pi * p[..., 0])
                      + c[2] * np.cos(4 * np.pi * p[..., 0])), float(c[3])


def max_principle_violation(seed: int) -> float:
    rng = np.random.default_rng(seed)
    F = random_operator(rng)
    g, top = _bottom(rng)
    P = assemble(F, _strip(), bc=(g, top))
    u, _ = solve(P)
    b = P.boundary_vector().reshape(u.domain.counts)
    faces = np.concatenate([b[..., 0], b[..., -1]])
    return max(0.0, float(u.values.max() - faces.max()) - SLACK, float(faces.min() - u.values.min()) - SLACK)


def comparison_violation(seed: int) -> float:
    """F <= G pointwise implies u_G <= u_F for the same data."""
    rng = np.random.default_rng(seed)
    F = PucciOperator("+", float(rng.uniform(1, 3)), 2) if rng.random() < 0.5 else laplacian(2)
    e = rng.standard_normal(2)
    G = perturb_operator(F, e / np.linalg.norm(e), float(rng.uniform(0.05, 1.0)))
    g, top = _bottom(rng)
    dom = _strip()
    uF, _ = solve(assemble(F, dom, bc=(g, top)))
    uG, _ = solve(assemble(G, dom, bc=(g, top)))
    return max(0.0, float((uG.values - uF.values).max()) - SLACK)


def homogeneity_violation(seed: int) -> float:
    rng = np.random.default_rng(seed)
    F = random_operator(rng)
    t = float(np.exp(rng.uniform(-3, 3)))
    M = random_sym(rng, 2)
    op_err = abs(F(t * M) - t * F(M)) / (t * max(1.0, np.abs(M).max()))
    g, top = _bottom(rng)
    dom = _strip()
    u, _ = solve(assemble(F, dom, bc=(g, top)))
    v, _ = solve(assemble(F, dom, bc=(lambda p: t * g(p), t * top)))
    sol_err = float(np.abs(v.values - t * u.values).max()) / (t * max(1.0, np.abs(u.values).max()))
    return max(0.0, op_err - 1e-12, sol_err - 1e-8)


def sandwich_violation(seed: int) -> float:
    """-P+(M - N) <= F(M) - F(N) <= -P-(M - N) with the declared ellipticity constants."""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 4))
    F = random_operator(rng, d)
    M, N = random_sym(rng, d), random_sym(rng, d)
    y = rng.random(d)
    diff = F(M, y) - F(N, y)
    lo = -pucci("+", F.lam, F.Lambda, M - N)
    hi = -pucci("-", F.lam, F.Lambda, M - N)
    tol = 1e-12 * (1 + np.abs(M).max() + np.abs(N).max()) * F.Lambda
    return max(0.0, lo - diff - tol, diff - hi - tol)


SHIFT_XI = [(0, 1), (1, 0), (1, 1), (1, -1), (1, 2), (2, 1)]


def shift_violation(seed: int) -> float:
    """mu(psi + c) = mu(psi) + c."""
    rng = np.random.default_rng(seed)
    F = random_operator(rng)
    psi = random_trig(rng, 2, n_terms=2, max_freq=1)
    c = float(rng.uniform(-2, 2))
    shifted = TorusFunction(2, psi.terms + ((c, (0, 0), 0.0),))
    xi = SHIFT_XI[int(rng.integers(len(SHIFT_XI)))]
    kn = Knobs(h=1 / 8, R_min=2.0, max_doublings=1)
    a = cell_tail(CellSpec(F, psi, xi, knobs=kn)).mu
    b = cell_tail(CellSpec(F, shifted, xi, knobs=kn)).mu
    return max(0.0, abs(b - a - c) - 1e-8)


CHECKS = {
    "discrete maximum principle": max_principle_violation,
    "operator-comparison ordering": comparison_violation,
    "homogeneity": homogeneity_violation,
    "Pucci sandwich": sandwich_violation,
    "shift equivariance of mu": shift_violation,
}
