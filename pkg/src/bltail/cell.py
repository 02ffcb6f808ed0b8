"""Half-space cell problems in the frame of a rational direction; tails mu and the profile m_xi."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import GridFunction, SolveReport, assemble, solve, strip_domain
from .lattice import Direction, LatticeVector, period_T, plane_lattice_basis, rational_approx_direction
from .operators import Operator, TorusFunction, tree_leaves


class CellError(RuntimeError):
    pass


class StripTooShort(CellError):
    pass


@dataclass(frozen=True)
class Knobs:
    h: float = 1 / 16
    R: float | None = None
    R_factor: float = 1.5
    R_min: float = 3.0
    order: int | None = None
    tol: float | None = None
    osc_target: float = 1e-4  # relative to the boundary oscillation
    max_doublings: int = 3
    passes: int = 2
    refine: bool = False
    max_nodes: int = 1_500_000
    max_iter: int = 100


@dataclass(frozen=True)
class CellSpec:
    F: Operator
    psi: TorusFunction
    xi: LatticeVector
    tau: tuple = ()
    knobs: Knobs = Knobs()
    canonical: bool = True

    def __post_init__(self):
        xi = LatticeVector.of(self.xi)
        if xi.gcd != 1:
            raise CellError(f"xi = {xi.comps} is not irreducible")
        object.__setattr__(self, "xi", xi)
        tau = np.zeros(xi.d) if len(self.tau) == 0 else np.asarray(self.tau, dtype=float)
        object.__setattr__(self, "tau", tuple(float(c) for c in tau))
        if self.F.d != xi.d or self.psi.d != xi.d:
            raise CellError("dimension mismatch among F, psi and xi")

    @property
    def tau_key(self) -> float:
        """Offset along xi_hat reduced mod the period 1/|xi|; it alone determines the tail."""
        T = 1.0 / self.xi.norm
        return float(np.dot(self.tau, self.xi.unit) % T)


@dataclass
class TailEstimate:
    mu: float
    decay_rate: float
    residual_osc: float
    fit_quality: float
    uncertainty: float = 0.0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mu": self.mu, "decay_rate": self.decay_rate, "residual_osc": self.residual_osc,
                "fit_quality": self.fit_quality, "uncertainty": self.uncertainty,
                "meta": {k: v for k, v in self.meta.items() if _jsonable(v)}}


def _jsonable(v) -> bool:
    return isinstance(v, (int, float, str, bool, list, tuple, dict)) or v is None


# --------------------------------------------------------------------------- strip construction


def lateral_cell(F: Operator, psi: TorusFunction, xi: LatticeVector, h: float):
    """Lateral period vectors of the strip and per-axis node counts (1 = invariant axis).

    Each plane lattice vector g is shortened to g / G, G the gcd of k.g over
    all data and coefficient frequencies k, which is still a period of the data.
    """
    basis = plane_lattice_basis(xi)
    full = psi.grid is not None or _has_grid(F)
    freqs = [tuple(int(c) for c in k) for k in list(psi.frequencies()) + list(F.frequencies())]
    lateral, counts = [], []
    for g in basis:
        dots = [abs(int(np.dot(k, g))) for k in freqs]
        G = 1 if full else math.gcd(*dots) if dots else 0
        if G == 0:
            lateral.append(np.asarray(g, dtype=float))
            counts.append(1)
            continue
        v = np.asarray(g, dtype=float) / G
        lateral.append(v)
        counts.append(max(4, math.ceil(np.linalg.norm(v) / h - 1e-9)))
    return lateral, counts


def _has_grid(F: Operator) -> bool:
    fields = []
    for leaf in tree_leaves(F.control_tree()):
        fields.extend(fn for _, _, fn in getattr(leaf.coef, "entries", ()))
    return any(fn.grid is not None for fn in fields)


def _cell_diameter(basis, counts) -> float:
    act = [np.asarray(g, dtype=float) for g, n in zip(basis, counts) if n > 1]
    if not act:
        return 0.0
    best = 0.0
    for signs in np.ndindex(*(2,) * len(act)):
        v = sum((1 if s else -1) * g for s, g in zip(signs, act))
        best = max(best, float(np.linalg.norm(v)))
    return best


def build_domain(spec: CellSpec, R: float | None = None):
    k = spec.knobs
    basis, counts = lateral_cell(spec.F, spec.psi, spec.xi, k.h)
    Lc = _cell_diameter(basis, counts)
    if R is None:
        R = k.R if k.R is not None else max(k.R_factor * Lc, k.R_min)
    n_s = max(4, math.ceil(R / k.h - 1e-9))
    R = n_s * k.h
    nodes = int(np.prod([c for c in counts if c > 1] or [1])) * (n_s + 1)
    if nodes > k.max_nodes:
        raise CellError(f"strip needs {nodes} nodes, above max_nodes = {k.max_nodes}")
    xh = spec.xi.unit
    origin = spec.tau_key * xh if spec.canonical else np.asarray(spec.tau)
    return strip_domain(basis, counts, xh, R, n_s, origin), Lc


def solve_cell(spec: CellSpec, cap: float | None = None, u0=None, R: float | None = None):
    """One strip solve with Dirichlet data psi(y + tau) at s = 0 and constant cap at s = R."""
    dom, _ = build_domain(spec, R)
    psi = spec.psi
    bottom = dom.points()[..., 0, :]
    if cap is None:
        cap = float(psi(bottom).mean())
    P = assemble(spec.F, dom, bc=(psi, cap), stencil_order=spec.knobs.order)
    u, rep = solve(P, tol=spec.knobs.tol, max_iter=spec.knobs.max_iter, u0=u0)
    return u, rep


# --------------------------------------------------------------------------- tails


def extract_tail(u: GridFunction, check: bool = True) -> TailEstimate:
    """Tail of a strip solution.

    The top quarter of the strip is treated as the cap layer. Far from the
    boundary the lateral mean is affine in s (the cap only adds a linear
    function, which the operator does not see), so mu is the intercept of the
    line fitted to the slice means over the upper half. residual_osc is the
    slice oscillation at s = 3R/4; the decay rate is fitted to log slice_osc
    over the middle half.
    """
    v = u.values
    dom = u.domain
    n = dom.n_s
    h = dom.h
    lat_axes = tuple(range(v.ndim - 1))
    osc = v.max(axis=lat_axes) - v.min(axis=lat_axes) if lat_axes else np.zeros(n + 1)
    means = v.mean(axis=lat_axes) if lat_axes else v.copy()
    s = np.arange(n + 1) * h
    osc0 = float(osc[0])
    k_top = int(round(0.75 * n))
    res = float(osc[k_top])
    if check and osc0 > 0 and res > 0.1 * osc0:
        raise StripTooShort(f"oscillation {res:.3g} at s = {s[k_top]:.3g} exceeds 10% of boundary oscillation")
    up = slice(n // 2, n + 1)
    A = np.vstack([np.ones(s[up].size), s[up]]).T
    ref = float(means[n])  # fitting offsets from a reference keeps constant fields exact
    coef, *_ = np.linalg.lstsq(A, means[up] - ref, rcond=None)
    mu = ref + float(coef[0])
    lo, hi = int(round(0.25 * n)), k_top
    window = np.arange(lo, hi + 1)
    good = window[osc[window] > max(1e-12 * osc0, 1e-300)]
    if osc0 == 0 or good.size < 3:
        rate, r2 = math.inf, 1.0
    else:
        y = np.log(osc[good])
        x = s[good]
        slope, icpt = np.polyfit(x, y, 1)
        pred = slope * x + icpt
        ss = float(np.sum((y - y.mean()) ** 2))
        r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss if ss > 0 else 1.0
        if check and slope >= 0:
            raise CellError("slice oscillation does not decay")
        rate = -float(slope)
    return TailEstimate(mu, rate, res, r2, res, {"R": dom.R, "h": h, "slope": float(coef[1])})


def cell_tail(spec: CellSpec) -> TailEstimate:
    """Two-pass capped solve with depth doubling until the residual oscillation target is met."""
    k = spec.knobs
    dom, Lc = build_domain(spec)
    R = dom.R
    bottom_vals = spec.psi(dom.points()[..., 0, :])
    osc_b = float(bottom_vals.max() - bottom_vals.min())
    if osc_b <= 1e-12 * max(1.0, float(np.abs(bottom_vals).max())):
        osc_b = 0.0  # constant data up to rounding
    reports: list[SolveReport] = []
    est = None
    for attempt in range(k.max_doublings + 1):
        u, rep = solve_cell(spec, R=R)
        reports.append(rep)
        cap = float(bottom_vals.mean())
        est = extract_tail(u, check=False)
        for _ in range(k.passes - 1):
            dom_r = u.domain
            s = np.arange(dom_r.n_s + 1) / dom_r.n_s
            u0 = u.values + (est.mu - cap) * s
            cap = est.mu
            u, rep = solve_cell(spec, cap=cap, u0=u0, R=R)
            reports.append(rep)
            est = extract_tail(u, check=False)
        if est.residual_osc <= k.osc_target * max(osc_b, 1e-300) or osc_b == 0:
            break
        if attempt < k.max_doublings:
            R *= 2
    if osc_b > 0 and est.residual_osc > 0.1 * osc_b:
        raise StripTooShort(f"residual oscillation {est.residual_osc:.3g} with R = {R}")
    solver_res = max(r.residual for r in reports)
    converged = all(r.converged for r in reports)
    est.meta.update({"xi": list(spec.xi.comps), "tau_key": spec.tau_key, "converged": converged,
                     "solver_residual": solver_res, "iterations": sum(r.iterations for r in reports),
                     "osc_boundary": osc_b, "L_cell": Lc,
                     "target_met": est.residual_osc <= k.osc_target * max(osc_b, 1e-300) or osc_b == 0})
    # operator residual r bounds the value error by r R^2 / 8 (quadratic barrier)
    est.uncertainty = est.residual_osc + solver_res * R**2 / 8
    if k.refine:
        coarse = replace(spec, knobs=replace(k, h=2 * k.h, refine=False))
        try:
            c = cell_tail(coarse)
            est.meta["refinement"] = abs(c.mu - est.mu)
            est.uncertainty += abs(c.mu - est.mu)
        except CellError as err:
            est.meta["refinement_error"] = str(err)
    if not converged:
        est.meta["partial"] = True
    return est


# --------------------------------------------------------------------------- m_xi


@dataclass
class ProfileM:
    T: float
    t: np.ndarray
    m: np.ndarray
    tails: list = field(default_factory=list)
    xi: tuple = ()

    @property
    def n(self) -> int:
        return self.m.size

    def __call__(self, t) -> np.ndarray:
        """Trigonometric interpolation of the T-periodic samples."""
        t = np.asarray(t, dtype=float)
        n = self.n
        c = np.fft.fft(self.m) / n
        k = np.fft.fftfreq(n, d=1.0 / n)
        if n % 2 == 0:
            c = c.copy()
            nyq = n // 2
            c_nyq = c[nyq]
            c[nyq] = 0.0
        phase = np.exp(2j * np.pi * np.multiply.outer(t / self.T, k))
        out = (phase @ c).real
        if n % 2 == 0:
            out = out + (c_nyq * np.cos(np.pi * n * t / self.T)).real
        return out

    def mean(self) -> float:
        return float(self.m.mean())

    def residuals(self) -> np.ndarray:
        return np.array([e.uncertainty for e in self.tails]) if self.tails else np.zeros(self.n)

    def closure(self) -> float:
        return float(abs(self(np.array([self.T]))[0] - self.m[0]))

    def to_dict(self) -> dict:
        return {"T": self.T, "t": self.t.tolist(), "m": self.m.tolist(), "xi": list(self.xi),
                "tails": [e.to_dict() for e in self.tails]}

    @classmethod
    def from_dict(cls, obj) -> "ProfileM":
        tails = [TailEstimate(**{k: v for k, v in e.items()}) for e in obj.get("tails", [])]
        return cls(obj["T"], np.array(obj["t"]), np.array(obj["m"]), tails, tuple(obj.get("xi", ())))


def compute_m(F: Operator, psi: TorusFunction, xi, n_samples: int | None = None,
              knobs: Knobs = Knobs(), executor=None) -> ProfileM:
    xi = LatticeVector.of(xi)
    T = period_T(xi)
    n = n_samples if n_samples is not None else 16 * max(1, math.ceil(xi.norm))
    if n < 4:
        raise CellError("n_samples must be >= 4")
    t = np.arange(n) * T / n
    specs = [CellSpec(F, psi, xi, tuple(tk * xi.unit), knobs) for tk in t]
    tails = list(executor.map(cell_tail, specs)) if executor is not None else [cell_tail(s) for s in specs]
    return ProfileM(T, t, np.array([e.mu for e in tails]), tails, xi.comps)


# --------------------------------------------------------------------------- mu at a direction


def mu_at(F: Operator, psi: TorusFunction, nu, eps: float = 1e-3, knobs: Knobs = Knobs(),
          tau=None, max_norm: float = 64.0) -> TailEstimate:
    """Tail at a direction through a rational representative (tau = 0 unless given).

    Irrational directions are replaced by the Dirichlet approximant for eps;
    when the approximant exceeds max_norm, eps is coarsened and the estimate
    is flagged partial.
    """
    nu = Direction.of(nu)
    partial = False
    e = eps
    while True:
        xi, gap = rational_approx_direction(nu, e)
        if xi.norm <= max_norm or nu.tag != "irrational":
            break
        partial = True
        e = min(0.49, e * 4)
    spec = CellSpec(F, psi, xi, () if tau is None else tuple(tau), knobs)
    try:
        est = cell_tail(spec)
    except CellError as err:
        raise CellError(f"tail at xi = {xi.comps} failed: {err}") from err
    lo, hi = psi.bounds(32)
    gap_term = (hi - lo) * gap
    est.uncertainty += gap_term
    est.meta.update({"nu": list(nu.nu), "gap": gap, "gap_term": gap_term, "eps": e})
    if partial:
        est.meta["partial"] = True
    return est
