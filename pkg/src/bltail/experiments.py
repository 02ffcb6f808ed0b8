"""Config-driven experiments with reproducible CSV/JSON reports and manifests."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .cell import Knobs, compute_m, extract_tail, mu_at
from .grid import assemble, solve, strip_domain
from .homogenize import effective_operator, interior_rate_experiment, linear_correctors
from .lattice import Direction, LatticeVector, dirichlet_approx, geodesic_toward, rational_approx_direction
from .operators import (LinearOperator, MatrixField, Operator, PucciOperator, TorusFunction,
                        laplacian, operator_from_dict, perturb_operator)
from .reduction import ReducedKnobs, L_xi, tangent_circle

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# Every physical and numerical default used by the experiments lives here.
DEFAULTS = {
    "h": 1 / 16,
    "R_factor": 1.5,
    "R_min": 3.0,
    "osc_target": 1e-4,
    "max_doublings": 3,
    "m_samples_per_unit": 16,
    "reduced_n_lat": 64,
    "reduced_depth": 4.0,
    "eta_samples": 8,
    "torus_n_2d": 64,
    "torus_n_3d": 32,
    "t_list": [0.2, 0.1, 0.05, 0.025],
    "scan_points": 12,
    "delta_ladder": [0.0, 0.125, 0.25, 0.5],
    "m_amplitude": 0.5,
    "rate_lengths": [1.0, 2.0],
    "rate_depths": [2.0, 3.0],
    "rate_h": 1 / 32,
    "eps_list": [1 / 8, 1 / 16, 1 / 32],
    "points_per_cell": 8,
    "max_lattice_norm": 64.0,
}

SCAN_OFFSET = (math.sqrt(5) - 1) / 2
VERDICT_FACTOR = 3.0  # a split counts as resolved only above this multiple of its uncertainty

KINDS = ("continuity-sweep", "discontinuity-lab", "rate-fit", "mxi", "ltail", "homogenize", "dirichlet", "tail")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- specs


def build_operator(spec: dict) -> Operator:
    kind = spec.get("kind")
    d = spec.get("d")
    if kind == "laplacian":
        return laplacian(int(d))
    if kind == "pucci":
        return PucciOperator(spec.get("sign", "+"), float(spec["Lambda"]), int(d), float(spec.get("lam", 1.0)),
                             int(spec.get("n_frames", 16)))
    if kind == "layered":
        # a(y) = a0 + a1 sin(2 pi y_axis) times the identity, or on one diagonal entry only
        a = TorusFunction(int(d), ((float(spec.get("a0", 2.0)), (0,) * int(d), 0.0),
                                   (float(spec.get("a1", 1.0)), tuple(1 if i == spec.get("axis", 0) else 0
                                                                      for i in range(int(d))), -math.pi / 2)))
        entries = spec.get("entries")
        if entries is None:
            A = MatrixField.scalar_times_identity(int(d), a)
        else:
            const = np.eye(int(d))
            for i in entries:
                const[i, i] = 0.0
            A = MatrixField(const, tuple((i, i, a) for i in entries))
        return LinearOperator(A)
    if kind == "perturbed":
        eta1 = np.asarray(spec.get("eta1", spec.get("eta")), dtype=float)
        return perturb_operator(build_operator(spec["base"]), eta1, float(spec["eps"]))
    if kind in ("linear", "isaacs", "projected"):
        return operator_from_dict(spec)
    raise ConfigError(f"unknown operator kind {kind!r}")


def build_psi(spec: dict, d: int) -> TorusFunction:
    if "const" in spec:
        return TorusFunction.constant(d, float(spec["const"]))
    terms = [(float(a), tuple(int(c) for c in k), float(p)) for a, k, p in spec.get("terms", [])]
    if any(len(k) != d for _, k, _ in terms):
        raise ConfigError("psi frequency dimension mismatch")
    return TorusFunction(d, tuple(terms))


@dataclass
class ExperimentConfig:
    kind: str
    operator: dict = field(default_factory=lambda: {"kind": "laplacian", "d": 2})
    psi: dict = field(default_factory=lambda: {"terms": []})
    params: dict = field(default_factory=dict)
    knobs: dict = field(default_factory=dict)
    out: str | None = None
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.knobs) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown knobs {sorted(unknown)}")
        if self.kind == "dirichlet":
            if "alpha" not in self.params and "nu" not in self.params:
                raise ConfigError("dirichlet needs alpha (with N) or nu (with eps)")
            return
        F = self.F
        self.Psi
        if self.kind == "discontinuity-lab" and F.d != 3:
            raise ConfigError("the discontinuity lab runs in d = 3")
        for key in ("xi",):
            if key in self.params:
                xi = LatticeVector.of(self.params[key])
                if xi.d != F.d or xi.gcd != 1:
                    raise ConfigError(f"xi = {xi.comps} must be irreducible and of dimension {F.d}")

    def knob(self, name):
        return self.knobs.get(name, DEFAULTS[name])

    @property
    def F(self) -> Operator:
        return build_operator(self.operator)

    @property
    def Psi(self) -> TorusFunction:
        return build_psi(self.psi, int(self.operator.get("d", self.F.d)))

    def cell_knobs(self) -> Knobs:
        return Knobs(h=self.knob("h"), R_factor=self.knob("R_factor"), R_min=self.knob("R_min"),
                     osc_target=self.knob("osc_target"), max_doublings=self.knob("max_doublings"))

    def reduced_knobs(self) -> ReducedKnobs:
        return ReducedKnobs(n_lat=self.knob("reduced_n_lat"), depth=self.knob("reduced_depth"))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "operator": self.operator, "psi": self.psi, "params": self.params,
                "knobs": {**DEFAULTS, **self.knobs}, "out": self.out, "seed": self.seed}

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        allowed = {"kind", "operator", "psi", "params", "knobs", "out", "seed"}
        extra = set(obj) - allowed
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        if "kind" not in obj:
            raise ConfigError("config needs a kind")
        return cls(**obj)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".json":
        obj = json.loads(raw)
    else:
        obj = tomllib.loads(raw.decode())
    return ExperimentConfig.from_dict(obj)


# --------------------------------------------------------------------------- reports


@dataclass
class Report:
    kind: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    verdict: str | None = None
    config: dict = field(default_factory=dict)

    @property
    def inconclusive(self) -> bool:
        return self.verdict is not None and self.verdict.startswith("below resolution")


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_cell(float(c)) if isinstance(c, (float, np.floating)) else str(c) for c in v)
    return str(v)


def rows_to_csv(rows) -> str:
    cols = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_cell(r.get(c, "")) for c in cols])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def emit_report(report: Report, outdir, force: bool = False) -> dict:
    """Write results.csv, results.json and manifest.json; refuses to overwrite unless force."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists; pass force to overwrite")
    files = {}
    if report.rows:
        files["results.csv"] = rows_to_csv(report.rows).encode()
        body = {"kind": report.kind, "rows": report.rows, "summary": report.summary, "verdict": report.verdict}
        files["results.json"] = json.dumps(body, indent=1, sort_keys=True, default=_json_default).encode()
    for name, data in files.items():
        (out / name).write_bytes(data)
    manifest = {"kind": report.kind, "config": report.config, "verdict": report.verdict,
                "summary": report.summary,
                "files": {n: hashlib.sha256(d).hexdigest() for n, d in files.items()},
                "versions": {"bltail": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                             "python": platform.python_version()},
                "verdict_factor": VERDICT_FACTOR}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=_json_default))
    return {"manifest": str(manifest_path), **{n: str(out / n) for n in files}}


# --------------------------------------------------------------------------- experiments


def _pool(threads: int):
    return ThreadPoolExecutor(max_workers=threads) if threads and threads > 1 else None


def _map(fn, items, threads: int = 1):
    pool = _pool(threads)
    if pool is None:
        return [fn(x) for x in items]
    with pool:
        return list(pool.map(fn, items))  # preserves config order


def run_continuity_sweep(cfg: ExperimentConfig, threads: int = 1) -> Report:
    """mu along geodesics into xi_hat from both sides, plus a great-circle scan."""
    F, psi, kn = cfg.F, cfg.Psi, cfg.cell_knobs()
    d = F.d
    xi = LatticeVector.of(cfg.params.get("xi", [0] * (d - 1) + [1]))
    eta = np.asarray(cfg.params.get("eta", tangent_circle(xi, 2)[0]), dtype=float)
    t_list = cfg.params.get("t_list", cfg.knob("t_list"))
    max_norm = cfg.knob("max_lattice_norm")
    jobs = []
    for side, e in (("+", eta), ("-", -eta)):
        for t in t_list:
            jobs.append(("geodesic", side, float(t), e))
    n_scan = int(cfg.params.get("scan_points", cfg.knob("scan_points")))
    for k in range(n_scan):
        # irrational offset: exact rational directions carry a tau-dependent tail
        jobs.append(("scan", "", (k + SCAN_OFFSET) * math.pi / n_scan, eta))

    def run(job):
        kind, side, t, e = job
        if kind == "geodesic":
            nu = geodesic_toward(xi, e, t)
            eps = (t / 2) ** d
        else:
            xh = xi.unit
            e_hat = e / np.linalg.norm(e)
            nu = Direction(tuple(math.cos(t) * xh - math.sin(t) * e_hat))
            eps = float(cfg.params.get("scan_eps", 1e-3))
        try:
            est = mu_at(F, psi, nu, eps, kn, max_norm=max_norm)
        except Exception as err:  # keep the row and flag it
            return {"path": kind, "side": side, "param": t, "nu": list(nu.nu), "mu": math.nan,
                    "uncertainty": math.nan, "flag": f"failed: {err}"}
        return {"path": kind, "side": side, "param": t, "nu": list(nu.nu), "xi_approx": est.meta["xi"],
                "mu": est.mu, "uncertainty": est.uncertainty, "residual": est.residual_osc,
                "rate": est.decay_rate, "fit_quality": est.fit_quality,
                "flag": "partial" if est.meta.get("partial") else ""}

    rows = _map(run, jobs, threads)
    summary = {"xi": list(xi.comps)}
    for side in "+-":
        g = [r for r in rows if r["path"] == "geodesic" and r["side"] == side and np.isfinite(r["mu"])]
        if g:
            last = min(g, key=lambda r: r["param"])
            summary[f"limit_{'plus' if side == '+' else 'minus'}"] = last["mu"]
            summary[f"limit_{'plus' if side == '+' else 'minus'}_unc"] = last["uncertainty"]
            summary[f"modulus_{'plus' if side == '+' else 'minus'}"] = _fit_modulus(g)
    if "limit_plus" in summary and "limit_minus" in summary:
        diff = abs(summary["limit_plus"] - summary["limit_minus"])
        unc = summary["limit_plus_unc"] + summary["limit_minus_unc"]
        summary["one_sided_difference"] = diff
        summary["one_sided_uncertainty"] = unc
        summary["one_sided_agree"] = diff <= VERDICT_FACTOR * unc
    return Report(cfg.kind, rows, summary, None, cfg.to_dict())


def _fit_modulus(rows) -> dict:
    """Fit |mu(t) - mu(t_min)| ~ C t^a over the coarser samples (reported, not certified)."""
    rows = sorted(rows, key=lambda r: r["param"])
    base = rows[0]["mu"]
    pts = [(r["param"], abs(r["mu"] - base)) for r in rows[1:] if abs(r["mu"] - base) > 0]
    if len(pts) < 2:
        return {"C": 0.0, "exponent": math.nan}
    t, g = np.array(pts).T
    a, c = np.polyfit(np.log(t), np.log(g), 1)
    return {"C": float(math.exp(c)), "exponent": float(a)}


def run_discontinuity_lab(cfg: ExperimentConfig, threads: int = 1) -> Report:
    F = cfg.F
    xi = LatticeVector.of(cfg.params.get("xi", [0, 0, 1]))
    eta1 = np.asarray(cfg.params.get("eta1", [1.0, 0.0, 0.0]), dtype=float)
    eta2 = np.asarray(cfg.params.get("eta2", [0.0, 1.0, 0.0]), dtype=float)
    for a, b in ((eta1, xi.unit), (eta2, xi.unit), (eta1, eta2)):
        if abs(a @ b) > 1e-10:
            raise ConfigError("eta1, eta2 and xi must be mutually orthogonal")
    eta1, eta2 = eta1 / np.linalg.norm(eta1), eta2 / np.linalg.norm(eta2)
    if cfg.psi.get("terms") or "const" in cfg.psi:
        psi = cfg.Psi
    else:
        psi = TorusFunction(3, ((cfg.knob("m_amplitude"), xi.comps, 0.0),))
    kn, rk = cfg.cell_knobs(), cfg.reduced_knobs()
    ladder = [float(x) for x in cfg.params.get("delta_ladder", cfg.knob("delta_ladder"))]

    def run(delta):
        Fd = F if delta == 0 else perturb_operator(F, eta1, delta)
        m = compute_m(Fd, psi, xi, None, kn)
        L1 = L_xi(Fd, psi, xi, eta1, m=m, knobs=rk)
        L2 = L_xi(Fd, psi, xi, eta2, m=m, knobs=rk)
        split = L2.L - L1.L
        unc = L1.uncertainty + L2.uncertainty
        resolved = split > VERDICT_FACTOR * unc
        return {"delta": delta, "L_eta1": L1.L, "L_eta2": L2.L, "split": split, "uncertainty": unc,
                "m_mean": m.mean(), "verdict": "discontinuity detected" if resolved else "below resolution"}

    rows = _map(run, ladder, threads)
    detected = [r for r in rows if r["delta"] > 0 and r["verdict"] == "discontinuity detected"]
    verdict = "discontinuity detected" if detected else "below resolution"
    summary = {"xi": list(xi.comps), "eta1": eta1.tolist(), "eta2": eta2.tolist(),
               "first_resolved_delta": detected[0]["delta"] if detected else None}
    base = next((r for r in rows if r["delta"] == 0), None)
    if base is not None:
        summary["L0_eta1"] = base["L_eta1"]
    return Report(cfg.kind, rows, summary, verdict, cfg.to_dict())


def strip_rate(F: Operator, period: float, R: float, h: float) -> dict:
    """Decay rate of the oscillation for boundary data cos(2 pi z1 / period) on a 2-D strip."""
    n = max(4, round(period / h))
    n_s = max(4, round(R / h))
    dom = strip_domain([np.array([period, 0.0])], [n], np.array([0.0, 1.0]), n_s * (period / n), n_s)
    bottom = lambda p: np.cos(2 * np.pi * p[..., 0] / period)
    u, rep = solve(assemble(F, dom, bc=(bottom, 0.0)))
    est = extract_tail(u)
    return {"L": period, "R": dom.R, "h": dom.h, "rate": est.decay_rate, "fit_quality": est.fit_quality,
            "mu": est.mu, "residual": est.residual_osc, "solver_residual": rep.residual}


def run_rate_fit(cfg: ExperimentConfig, threads: int = 1) -> Report:
    F = cfg.F
    if F.d != 2:
        raise ConfigError("rate fits run on two-dimensional strips")
    lengths = [float(x) for x in cfg.params.get("lengths", cfg.knob("rate_lengths"))]
    depths = [float(x) for x in cfg.params.get("depths", cfg.knob("rate_depths"))]
    h = cfg.knob("rate_h")
    jobs = [(L, D * L) for L in lengths for D in depths]
    rows = _map(lambda j: strip_rate(F, j[0], j[1], h), jobs, threads)
    deepest = {L: max((r for r in rows if r["L"] == L), key=lambda r: r["R"]) for L in lengths}
    summary = {"rates": {str(L): deepest[L]["rate"] for L in lengths}}
    verdict = None
    if F.is_linear and F.homogeneous and np.allclose(F.A.const, np.eye(2)):
        errs = {str(L): abs(deepest[L]["rate"] / (2 * math.pi / L) - 1) for L in lengths}
        summary["relative_error_vs_2pi_over_L"] = errs
        verdict = "rate matches 2 pi / L" if max(errs.values()) <= 0.05 else "rate mismatch"
    if len(lengths) >= 2:
        L0, L1 = lengths[0], lengths[1]
        ratio = deepest[L1]["rate"] / deepest[L0]["rate"]
        expected = L0 / L1
        summary["scaling_ratio"] = ratio
        summary["scaling_expected"] = expected
        summary["scaling_relative_error"] = abs(ratio / expected - 1)
    return Report(cfg.kind, rows, summary, verdict, cfg.to_dict())


def run_mxi(cfg: ExperimentConfig, threads: int = 1) -> Report:
    F, psi = cfg.F, cfg.Psi
    xi = LatticeVector.of(cfg.params["xi"])
    n = cfg.params.get("n_samples")
    pool = _pool(threads)
    try:
        m = compute_m(F, psi, xi, n, cfg.cell_knobs(), executor=pool)
    finally:
        if pool is not None:
            pool.shutdown()
    rows = [{"t": float(t), "mu": float(v), "residual": e.uncertainty, "rate": e.decay_rate,
             "fit_quality": e.fit_quality} for t, v, e in zip(m.t, m.m, m.tails)]
    return Report(cfg.kind, rows, {"T": m.T, "mean": m.mean(), "closure": m.closure()}, None, cfg.to_dict())


def run_ltail(cfg: ExperimentConfig, threads: int = 1) -> Report:
    F, psi = cfg.F, cfg.Psi
    xi = LatticeVector.of(cfg.params["xi"])
    if "eta" in cfg.params:
        etas = [np.asarray(cfg.params["eta"], dtype=float)]
    else:
        etas = tangent_circle(xi, int(cfg.params.get("eta_samples", cfg.knob("eta_samples"))))
    m = compute_m(F, psi, xi, cfg.params.get("n_samples"), cfg.cell_knobs())
    res = _map(lambda e: L_xi(F, psi, xi, e, m=m, knobs=cfg.reduced_knobs()), etas, threads)
    rows = [{"eta": r.eta.tolist(), "L": r.L, "uncertainty": r.uncertainty} for r in res]
    Ls = [r.L for r in res]
    return Report(cfg.kind, rows, {"spread": max(Ls) - min(Ls), "m_mean": m.mean(),
                                   "max_uncertainty": max(r.uncertainty for r in res)}, None, cfg.to_dict())


def run_tail(cfg: ExperimentConfig, threads: int = 1) -> Report:
    F, psi = cfg.F, cfg.Psi
    nu = cfg.params.get("nu")
    if nu is None:
        nu = Direction.rational(cfg.params["xi"])
    else:
        nu = Direction.of(np.asarray(nu, dtype=float))
    est = mu_at(F, psi, nu, float(cfg.params.get("eps", 1e-3)), cfg.cell_knobs(),
                tau=cfg.params.get("tau"), max_norm=cfg.knob("max_lattice_norm"))
    row = {"nu": list(nu.nu), "xi_approx": est.meta["xi"], "mu": est.mu, "uncertainty": est.uncertainty,
           "residual": est.residual_osc, "rate": est.decay_rate, "fit_quality": est.fit_quality,
           "gap": est.meta["gap"], "flag": "partial" if est.meta.get("partial") else ""}
    return Report(cfg.kind, [row], {}, None, cfg.to_dict())


def run_homogenize(cfg: ExperimentConfig, threads: int = 1) -> Report:
    F = cfg.F
    d = F.d
    n = cfg.knob("torus_n_2d") if d == 2 else cfg.knob("torus_n_3d")
    rows, summary = [], {}
    if F.is_linear:
        eff = linear_correctors(F, n)
        summary["Abar"] = eff.Abar.tolist()
        rows = [{"i": i, "j": j, "Abar": float(eff.Abar[i, j])} for i in range(d) for j in range(i, d)]
    Ms = cfg.params.get("M")
    if Ms is not None:
        for M in np.atleast_3d(np.asarray(Ms, dtype=float)).reshape(-1, d, d):
            cs = effective_operator(F, M, n)
            rows.append({"M": M.ravel().tolist(), "Fbar": cs.Fbar_M, "spread": cs.spread, "v_sup": cs.v_sup})
    if cfg.params.get("rate", False):
        g = lambda p: np.cos(2 * np.pi * p[..., 0]) + p[..., -1]
        res = interior_rate_experiment(F, g, float(cfg.params.get("R", 1.0)), cfg.knob("eps_list"),
                                       cfg.knob("points_per_cell"), n)
        rows.extend(res["rows"])
        summary["slope"] = res["slope"]
    return Report(cfg.kind, rows, summary, None, cfg.to_dict())


def run_dirichlet(cfg: ExperimentConfig, threads: int = 1) -> Report:
    p = cfg.params
    if "alpha" in p:
        alpha = np.atleast_1d(np.asarray(p["alpha"], dtype=float))
        N = int(p["N"])
        pv, q = dirichlet_approx(alpha, N)
        err = float(np.max(np.abs(q * alpha - pv)))
        row = {"q": q, "p": pv.tolist(), "error": err, "bound": N ** (-1 / alpha.size)}
    else:
        nu = Direction.of(np.asarray(p["nu"], dtype=float))
        xi, gap = rational_approx_direction(nu, float(p["eps"]))
        row = {"xi": list(xi.comps), "gap": gap, "norm": xi.norm}
    return Report(cfg.kind, [row], {}, None, cfg.to_dict())


RUNNERS = {
    "continuity-sweep": run_continuity_sweep,
    "discontinuity-lab": run_discontinuity_lab,
    "rate-fit": run_rate_fit,
    "mxi": run_mxi,
    "ltail": run_ltail,
    "homogenize": run_homogenize,
    "dirichlet": run_dirichlet,
    "tail": run_tail,
}


def run(cfg: ExperimentConfig, threads: int = 1) -> Report:
    return RUNNERS[cfg.kind](cfg, threads)
