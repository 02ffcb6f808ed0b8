"""Monotone wide-stencil finite differences on lateral-periodic strips and tori, solved by Howard iteration."""
from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog, nnls
from scipy.sparse.linalg import spsolve

from .operators import Leaf, Operator, flatten_tree

DECOMP_TOL = 1e-9


class GridError(ValueError):
    pass


class MonotonicityError(GridError):
    def __init__(self, msg, node=None, control=None, residual=None, nearest=None):
        super().__init__(msg)
        self.node, self.control, self.residual, self.nearest = node, control, residual, nearest


# --------------------------------------------------------------------------- stencils


def stencil(q: int, order: int) -> list[tuple[int, ...]]:
    """One representative per +/- pair: order 1 axes, 2 adds diagonals, 3 adds knight moves."""
    if order not in (1, 2, 3):
        raise GridError("stencil order must be 1, 2 or 3")
    dirs = []
    for k in range(q):
        e = [0] * q
        e[k] = 1
        dirs.append(tuple(e))
    if order >= 2:
        for a, b in itertools.combinations(range(q), 2):
            for s in (1, -1):
                e = [0] * q
                e[a], e[b] = 1, s
                dirs.append(tuple(e))
    if order >= 3:
        for a, b in itertools.permutations(range(q), 2):
            for s in (1, -1):
                e = [0] * q
                e[a], e[b] = 2, s
                dirs.append(tuple(e))
        if q == 3:
            for s1 in (1, -1):
                for s2 in (1, -1):
                    dirs.append((1, s1, s2))
    return dirs


def _moment_matrix(dirs) -> tuple[np.ndarray, list[tuple[int, int]]]:
    q = len(dirs[0])
    pairs = [(i, j) for i in range(q) for j in range(i, q)]
    E = np.array(dirs, dtype=float)
    Mm = np.array([[e[i] * e[j] for e in E] for i, j in pairs])
    return Mm, pairs


def _decompose_lp(A: np.ndarray, dirs) -> tuple[np.ndarray | None, float, np.ndarray]:
    Mm, pairs = _moment_matrix(dirs)
    b = np.array([A[i, j] for i, j in pairs])
    cost = np.array([sum(c * c for c in e) for e in dirs], dtype=float)
    res = linprog(cost, A_eq=Mm, b_eq=b, bounds=(0, None), method="highs")
    if res.status == 0:
        lam = np.maximum(res.x, 0.0)
        err = np.linalg.norm(Mm @ lam - b)
        if err <= DECOMP_TOL * max(1.0, np.abs(A).max()):
            return lam, err, A
    lam, _ = nnls(Mm, b)
    near = np.zeros_like(A)
    for (i, j), v in zip(pairs, Mm @ lam):
        near[i, j] = near[j, i] = v
    return None, float(np.linalg.norm(near - A)), near


def _decompose_dd(A: np.ndarray, dirs) -> np.ndarray | None:
    """Closed form for order <= 2 stencils; feasible iff A is diagonally dominant."""
    q = A.shape[-1]
    index = {e: k for k, e in enumerate(dirs)}
    lam = np.zeros(A.shape[:-2] + (len(dirs),))
    diag = np.array(np.diagonal(A, axis1=-2, axis2=-1))
    for a, b in itertools.combinations(range(q), 2):
        off = A[..., a, b]
        kp = index.get(tuple(1 if k in (a, b) else 0 for k in range(q)))
        km = index.get(tuple(1 if k == a else (-1 if k == b else 0) for k in range(q)))
        if kp is None or km is None:
            if np.any(off != 0):
                return None
            continue
        lam[..., kp] = np.maximum(off, 0.0)
        lam[..., km] = np.maximum(-off, 0.0)
        diag[..., a] -= np.abs(off)
        diag[..., b] -= np.abs(off)
    scale = np.abs(A).max(axis=(-1, -2), initial=0.0)
    if np.any(diag < -DECOMP_TOL * np.maximum(scale, 1.0)[..., None]):
        return None
    for k in range(q):
        e = tuple(1 if i == k else 0 for i in range(q))
        lam[..., index[e]] = np.maximum(diag[..., k], 0.0)
    return lam


def _is_short(e) -> bool:
    return max(abs(c) for c in e) <= 1 and sum(1 for c in e if c) <= 2


def decompose_index(A: np.ndarray, dirs) -> np.ndarray:
    """Weights lam_e >= 0 with sum lam_e e e^T = A for integer directions e (batched over leading axes)."""
    A = np.asarray(A, dtype=float)
    short = [k for k, e in enumerate(dirs) if _is_short(e)]
    sub = [dirs[k] for k in short]
    lam_short = _decompose_dd(A, sub) if all(
        tuple(1 if i == a else 0 for i in range(A.shape[-1])) in sub for a in range(A.shape[-1])) else None
    if lam_short is not None:
        lam = np.zeros(A.shape[:-2] + (len(dirs),))
        lam[..., short] = lam_short
        return lam
    flat = A.reshape((-1,) + A.shape[-2:])
    out = np.zeros((flat.shape[0], len(dirs)))
    cache = {}
    for n, An in enumerate(flat):
        key = An.tobytes()
        if key not in cache:
            lam, err, near = _decompose_lp(An, dirs)
            if lam is None:
                raise MonotonicityError(f"matrix not representable on stencil (residual {err:.3g})",
                                        node=n, residual=err, nearest=near)
            cache[key] = lam
        out[n] = cache[key]
    return out.reshape(A.shape[:-2] + (len(dirs),))


def decompose_diffusion(A, dirs) -> dict[tuple[int, ...], float]:
    """Decompose A = sum lam_e e_hat e_hat^T over unit stencil directions.

    Returns {integer direction: weight for the unit direction}. The
    representation minimizing the second moment sum lam_e |e|^2 is chosen,
    which prefers the shortest stencil arms.
    """
    A = np.asarray(A, dtype=float)
    dirs = [tuple(e) for e in dirs]
    lam = decompose_index(A, dirs)
    return {e: float(lam[k] * sum(c * c for c in e)) for k, e in enumerate(dirs)}


# --------------------------------------------------------------------------- domains


@dataclass(frozen=True)
class Domain:
    """Structured grid z -> origin + sum_a z_a steps[a] over the active axes.

    Strips: last active axis is the normal with counts[-1] = n_s + 1 layers and
    Dirichlet faces at both ends; other active axes are periodic. Tori: all
    active axes periodic. `frozen` holds lab vectors along which the solution
    is known to be invariant (dropped from the stencil).
    """

    steps: np.ndarray
    counts: tuple[int, ...]
    origin: np.ndarray
    torus: bool = False
    frozen: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    normal: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        steps = np.atleast_2d(np.asarray(self.steps, dtype=float))
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        fr = np.asarray(self.frozen, dtype=float)
        if fr.size == 0:
            fr = np.zeros((0, steps.shape[1]))
        object.__setattr__(self, "frozen", fr)
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if len(self.counts) != steps.shape[0]:
            raise GridError("counts and steps disagree")
        if steps.shape[0] + fr.shape[0] != steps.shape[1]:
            raise GridError("active and frozen axes must span the space")
        if np.linalg.matrix_rank(np.vstack([steps, fr])) < steps.shape[1]:
            raise GridError("degenerate frame")
        lat = self.counts if self.torus else self.counts[:-1]
        if any(c < 4 for c in lat):
            raise GridError(f"grid counts {self.counts} below 4 on an active axis")
        if not self.torus and self.counts[-1] - 1 < 4:
            raise GridError("degenerate strip: R < 4h")

    @property
    def q(self) -> int:
        return self.steps.shape[0]

    @property
    def d(self) -> int:
        return self.steps.shape[1]

    @property
    def n_s(self) -> int:
        return self.counts[-1] - 1

    @property
    def h(self) -> float:
        return float(np.linalg.norm(self.steps[-1])) if not self.torus else float(np.linalg.norm(self.steps[0]))

    @property
    def R(self) -> float:
        return self.h * self.n_s

    def index_diffusion(self, A: np.ndarray) -> np.ndarray:
        """Diffusion matrix in active index coordinates: (S^-T A S^-1)[active, active]."""
        S = np.vstack([self.steps, self.frozen])
        Si = np.linalg.inv(S)
        At = np.einsum("ai,...ab,bj->...ij", Si, A, Si)
        return At[..., : self.q, : self.q]

    def points(self, idx=None) -> np.ndarray:
        """Lab coordinates of all nodes (counts + (d,)) or of fractional index points (..., q)."""
        if idx is None:
            axes = [np.arange(c, dtype=float) for c in self.counts]
            idx = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        idx = np.asarray(idx, dtype=float)
        return self.origin + idx @ self.steps

    def layer_height(self, k: int) -> float:
        return k * self.h


def strip_domain(lateral, n_lat, normal, R: float, n_s: int, origin=None) -> Domain:
    """Strip 0 <= s <= R with periodic lateral cell spanned by the lab vectors `lateral`.

    Axes with n_lat[j] == 1 are frozen: the data is assumed invariant along them.
    """
    lateral = [np.asarray(g, dtype=float) for g in lateral]
    normal = np.asarray(normal, dtype=float)
    normal = normal / np.linalg.norm(normal)
    d = normal.size
    steps, counts, frozen = [], [], []
    for g, n in zip(lateral, n_lat):
        if n == 1:
            frozen.append(g)
        else:
            steps.append(g / n)
            counts.append(int(n))
    steps.append(normal * (R / n_s))
    counts.append(int(n_s) + 1)
    origin = np.zeros(d) if origin is None else np.asarray(origin, dtype=float)
    return Domain(np.array(steps), tuple(counts), origin, False,
                  np.array(frozen) if frozen else np.zeros((0, d)), normal,
                  {"lateral": [g.tolist() for g in lateral], "n_lat": list(n_lat)})


def torus_domain(d: int, n: int) -> Domain:
    return Domain(np.eye(d) / n, (n,) * d, np.zeros(d), True, normal=None)


# --------------------------------------------------------------------------- grid functions


@dataclass
class GridFunction:
    domain: Domain
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.domain.counts)
        if not np.all(np.isfinite(self.values)):
            raise GridError("non-finite grid values")

    def layer(self, k: int) -> np.ndarray:
        return self.values[..., k]

    def layer_index(self, s: float) -> int:
        k = int(round(s / self.domain.h))
        return min(max(k, 0), self.domain.n_s)

    def slice_mean(self, s: float) -> float:
        return float(self.layer(self.layer_index(s)).mean())

    def to_binary(self, path) -> None:
        """Flat little-endian float64 (C order) at path, JSON header at path + '.json'."""
        self.values.astype("<f8").tofile(path)
        header = {"counts": list(self.domain.counts), "steps": self.domain.steps.tolist(),
                  "origin": self.domain.origin.tolist(), "frozen": self.domain.frozen.tolist(),
                  "torus": self.domain.torus, "h": self.domain.h, "byte_order": "little", "dtype": "float64",
                  "layout": "C order, last axis = normal coordinate for strips"}
        with open(str(path) + ".json", "w") as fh:
            json.dump(header, fh, indent=1)

    @classmethod
    def from_binary(cls, path) -> "GridFunction":
        with open(str(path) + ".json") as fh:
            hd = json.load(fh)
        dom = Domain(np.array(hd["steps"]), tuple(hd["counts"]), np.array(hd["origin"]), hd["torus"],
                     np.array(hd["frozen"]) if hd["frozen"] else np.zeros((0, len(hd["origin"]))))
        return cls(dom, np.fromfile(path, dtype="<f8"))

    def to_csv(self, path) -> None:
        pts = self.domain.points().reshape(-1, self.domain.d)
        idx = np.indices(self.domain.counts).reshape(self.domain.q, -1).T
        cols = [f"i{a}" for a in range(self.domain.q)] + [f"y{a}" for a in range(self.domain.d)] + ["u"]
        with open(path, "w", newline="") as fh:
            fh.write(",".join(cols) + "\r\n")
            for ii, p, v in zip(idx, pts, self.values.ravel()):
                fh.write(",".join([str(int(c)) for c in ii] + [repr(float(c)) for c in p] + [repr(float(v))]) + "\r\n")


def slice_osc(u: GridFunction, s: float) -> float:
    lay = u.layer(u.layer_index(s))
    return float(lay.max() - lay.min())


# --------------------------------------------------------------------------- discrete problems


@dataclass
class SolveReport:
    iterations: int
    residual: float
    wall_time: float
    converged: bool
    method: str = "howard"
    linear_solves: int = 0
    history: list = field(default_factory=list)
    fixed_point: bool = False

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "residual": self.residual, "wall_time": self.wall_time,
                "converged": self.converged, "method": self.method, "linear_solves": self.linear_solves}


class _Tree:
    """Compiled min/max tree over leaf indices, evaluated bottom-up with running reductions."""

    def __init__(self, tree):
        self.nodes = []  # (op, children list of ('leaf', k) or ('node', j), depth)
        self.leaves = []
        self.paths = []  # per leaf: list of (node id, child position)
        self.root = self._compile(flatten_tree(tree), 0, [])

    def _compile(self, t, depth, path):
        if isinstance(t, Leaf):
            self.leaves.append(t)
            self.paths.append(list(path))
            return ("leaf", len(self.leaves) - 1)
        j = len(self.nodes)
        self.nodes.append(None)
        kids = [self._compile(c, depth + 1, path + [(j, pos)]) for pos, c in enumerate(t.children)]
        self.nodes[j] = (t.op, kids, depth)
        return ("node", j)

    def ops(self, frozen) -> set:
        return {op for j, (op, _, _) in enumerate(self.nodes) if j not in frozen}


class DiscreteProblem:
    """Monotone scheme sum_e lam_e^{leaf}(x) (-Delta_e u)(x) + offset, reduced over a min/max tree, = f."""

    def __init__(self, domain: Domain, tree, f=None, bottom=None, top=None, order: int | None = None,
                 offsets=None):
        self.domain = domain
        self.tree = _Tree(tree)
        self.points_all = domain.points()
        counts = domain.counts
        self.size_all = int(np.prod(counts))
        if domain.torus:
            interior = np.ones(counts, dtype=bool)
        else:
            interior = np.zeros(counts, dtype=bool)
            interior[..., 1:-1] = True
        self.interior = interior
        self.int_flat = np.flatnonzero(interior.ravel())
        self.N = self.int_flat.size
        self.unknown_of = -np.ones(self.size_all, dtype=np.int64)
        self.unknown_of[self.int_flat] = np.arange(self.N)
        self.int_points = self.points_all.reshape(-1, domain.d)[self.int_flat]
        self.bottom, self.top = bottom, top
        self.f = np.zeros(self.N) if f is None else np.broadcast_to(np.asarray(f, dtype=float), (self.N,)).copy()
        self.offsets = offsets
        self._build_weights(order)
        self._build_arms()

    # ---- boundary values
    def _face_values(self, which, pts):
        fn = self.bottom if which == "bottom" else self.top
        if fn is None:
            raise GridError(f"missing {which} Dirichlet data")
        if callable(fn):
            return np.asarray(fn(pts), dtype=float)
        return np.full(pts.shape[:-1], float(fn))

    def boundary_vector(self) -> np.ndarray:
        """Full-node vector holding Dirichlet values on the two faces (zeros inside)."""
        u = np.zeros(self.domain.counts)
        if not self.domain.torus:
            pts = self.points_all
            u[..., 0] = self._face_values("bottom", pts[..., 0, :])
            u[..., -1] = self._face_values("top", pts[..., -1, :])
        return u.ravel()

    # ---- weights
    def _build_weights(self, order):
        dom = self.domain
        leaves = self.tree.leaves
        orders = [order] if order is not None else [2, 3]
        last = None
        for o in orders:
            dirs = stencil(dom.q, o)
            try:
                W, yd = [], []
                for k, lf in enumerate(leaves):
                    if lf.coef.d != dom.d:
                        raise GridError("operator dimension does not match the domain")
                    if lf.coef.homogeneous:
                        At = dom.index_diffusion(lf.coef.const)
                        W.append(decompose_index(At, dirs))
                        yd.append(False)
                    else:
                        At = dom.index_diffusion(lf.coef(self.int_points))
                        W.append(decompose_index(At, dirs).T.copy())  # (n_e, N)
                        yd.append(True)
            except MonotonicityError as err:
                err.control = k
                last = err
                continue
            self.dirs, self.order = dirs, o
            self.W, self.ydep = W, yd
            const = [k for k in range(len(W)) if not yd[k]]
            self.const_ids = np.array(const, dtype=int)
            self.Wc = np.array([W[k] for k in const]) if const else np.zeros((0, len(dirs)))
            return
        raise last

    # ---- arms
    def _build_arms(self):
        dom = self.domain
        counts = np.array(dom.counts)
        idx = np.array(np.unravel_index(self.int_flat, dom.counts)).T  # (N, q)
        self.arms = []
        torus = dom.torus
        n_s = dom.n_s
        for e in self.dirs:
            e = np.array(e)
            arm = {}
            for sgn, key in ((1, "p"), (-1, "m")):
                tgt = idx + sgn * e
                t = np.ones(self.N)
                if not torus:
                    en = sgn * e[-1]
                    s0 = idx[:, -1]
                    if en > 0:
                        over = tgt[:, -1] > n_s
                        t = np.where(over, (n_s - s0) / en, 1.0)
                    elif en < 0:
                        over = tgt[:, -1] < 0
                        t = np.where(over, s0 / (-en), 1.0)
                    else:
                        over = np.zeros(self.N, dtype=bool)
                else:
                    over = np.zeros(self.N, dtype=bool)
                wrap = tgt.copy()
                per = slice(None) if torus else slice(0, dom.q - 1)
                wrap[:, per] %= counts[per]
                clipped = over
                wrap[clipped] = 0
                flat = np.ravel_multi_index(tuple(wrap.T), dom.counts)
                known_val = np.zeros(self.N)
                if np.any(clipped):
                    frac = idx[clipped] + (t[clipped, None] * sgn) * e
                    pts = dom.origin + frac @ dom.steps
                    face = "top" if sgn * e[-1] > 0 else "bottom"
                    known_val[clipped] = self._face_values(face, pts)
                unk = np.where(clipped, -1, self.unknown_of[flat])
                arm[key] = (flat, unk, clipped, known_val, t)
            tp, tm = arm["p"][4], arm["m"][4]
            cp = 2.0 / ((tp + tm) * tp)
            cm = 2.0 / ((tp + tm) * tm)
            uniform = np.all(tp == 1) and np.all(tm == 1)
            self.arms.append({"p": arm["p"], "m": arm["m"], "cp": 1.0 if uniform else cp,
                              "cm": 1.0 if uniform else cm, "c0": 2.0 if uniform else cp + cm})

    # ---- evaluation
    def second_differences(self, u_full: np.ndarray) -> np.ndarray:
        """(n_e, N) array of -Delta_e u at interior nodes."""
        D = np.empty((len(self.dirs), self.N))
        u0 = u_full[self.int_flat]
        for k, a in enumerate(self.arms):
            up = np.where(a["p"][2], a["p"][3], u_full[a["p"][0]])
            um = np.where(a["m"][2], a["m"][3], u_full[a["m"][0]])
            D[k] = a["c0"] * u0 - a["cp"] * up - a["cm"] * um
        return D

    def _leaf_value(self, k, D):
        v = self.W[k] @ D if not self.ydep[k] else np.einsum("en,en->n", self.W[k], D)
        if self.offsets is not None:
            v = v + self.offsets[k]
        return v

    def leaf_value_at(self, k, D, sel):
        if self.ydep[k]:
            v = np.einsum("en,en->n", self.W[k][:, sel], D[:, sel])
        else:
            v = self.W[k] @ D[:, sel]
        if self.offsets is not None:
            v = v + np.broadcast_to(self.offsets[k], (self.N,))[sel]
        return v

    def evaluate(self, u_full, frozen=None):
        """Return (F_h[u] - f at interior nodes, active leaf per node)."""
        frozen = frozen or {}
        D = self.second_differences(u_full)
        T = self.tree
        cache = {}

        def child_val(c):
            if c[0] == "leaf":
                return self._leaf_value(c[1], D), np.full(self.N, c[1], dtype=np.int64)
            return node_val(c[1])

        def node_val(j):
            if j in cache:
                return cache[j]
            op, kids, _ = T.nodes[j]
            best = bestleaf = None
            choice = frozen.get(j)
            for pos, c in enumerate(kids):
                v, lf = child_val(c)
                if choice is not None:
                    if best is None:
                        best, bestleaf = np.where(choice == pos, v, 0.0), np.where(choice == pos, lf, -1)
                    else:
                        sel = choice == pos
                        best, bestleaf = np.where(sel, v, best), np.where(sel, lf, bestleaf)
                    continue
                if best is None:
                    best, bestleaf = v, lf
                else:
                    better = v < best if op == "min" else v > best
                    best, bestleaf = np.where(better, v, best), np.where(better, lf, bestleaf)
            cache[j] = (best, bestleaf)
            return cache[j]

        val, leaf = child_val(T.root)
        return val - self.f, leaf, D

    def node_choices(self, u_full, ids, frozen):
        """Optimal child position at each node id (used for outer Hoffman-Karp freezing)."""
        out = {}
        for j in ids:
            f2 = dict(frozen)
            op, kids, _ = self.tree.nodes[j]
            vals = []
            for pos in range(len(kids)):
                f2[j] = np.full(self.N, pos)
                v, _, _ = self.evaluate(u_full, f2)
                vals.append(v)
            V = np.array(vals)
            out[j] = np.argmin(V, axis=0) if op == "min" else np.argmax(V, axis=0)
        return out, None

    def residual(self, u_full) -> float:
        r, _, _ = self.evaluate(u_full)
        return float(np.max(np.abs(r))) if r.size else 0.0

    # ---- linear systems
    def linear_system(self, leaf, u_bnd):
        """Frozen-policy matrix A (N x N) and right-hand side b with A u_int = b."""
        rows, cols, data = [], [], []
        diag = np.zeros(self.N)
        rhs = self.f.copy()
        if self.offsets is not None:
            off = np.array([np.broadcast_to(o, (self.N,)) for o in self.offsets])
            rhs -= off[leaf, np.arange(self.N)]
        Wsel = self._policy_weights(leaf)  # (n_e, N)
        ar = np.arange(self.N)
        for k, a in enumerate(self.arms):
            w = Wsel[k]
            nz = w != 0
            diag += w * a["c0"]
            for key, c in (("p", a["cp"]), ("m", a["cm"])):
                flat, unk, clipped, kv, _ = a[key]
                coef = w * c
                inside = (unk >= 0) & nz
                rows.append(ar[inside])
                cols.append(unk[inside])
                data.append(-(np.broadcast_to(coef, (self.N,))[inside]))
                known = (unk < 0) & nz
                val = np.where(clipped, kv, u_bnd[flat])
                rhs[known] += np.broadcast_to(coef, (self.N,))[known] * val[known]
        rows.append(ar)
        cols.append(ar)
        data.append(diag)
        A = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.N, self.N))
        return A, rhs

    def _policy_weights(self, leaf):
        n_e = len(self.dirs)
        Wsel = np.zeros((n_e, self.N))
        for k in np.unique(leaf):
            sel = leaf == k
            if self.ydep[k]:
                Wsel[:, sel] = self.W[k][:, sel]
            else:
                Wsel[:, sel] = self.W[k][:, None]
        return Wsel

    def diag_max(self) -> float:
        best = 0.0
        for k in range(len(self.W)):
            w = self.W[k] if not self.ydep[k] else self.W[k].max(axis=1)
            best = max(best, float(np.sum(w * 2.0)))
        return best


def assemble(op: Operator, domain: Domain, f=None, bc=(None, None), stencil_order: int | None = None,
             offsets=None) -> DiscreteProblem:
    """Build the monotone discrete operator for `op` on `domain`.

    bc = (bottom, top): float or callable on lab points, for strips.
    """
    return DiscreteProblem(domain, op.control_tree(), f, bc[0], bc[1], stencil_order, offsets)


# --------------------------------------------------------------------------- solvers


def _linsolve(A, b):
    return spsolve(A.tocsc(), b, permc_spec="COLAMD")


def _initial_guess(P: DiscreteProblem) -> np.ndarray:
    u = P.boundary_vector().reshape(P.domain.counts)
    if not P.domain.torus:
        n = P.domain.n_s
        s = np.arange(n + 1) / n
        u = (1 - s) * u[..., :1] + s * u[..., -1:]
    return u.ravel().copy()


def _howard(P, u, frozen, tol, max_iter, report, deadline):
    report.fixed_point = False
    leaf_old = None
    seen = set()
    for _ in range(max_iter):
        r, leaf, D = P.evaluate(u, frozen)
        report.iterations += 1
        res = float(np.max(np.abs(r))) if r.size else 0.0
        report.history.append(res)
        if res <= tol:
            return u, True
        if leaf_old is not None:
            # keep the previous control where it is still optimal up to rounding
            scale = 1e-12 * (1.0 + np.abs(r).max() + np.abs(P.f).max())
            old_val = np.empty(P.N)
            for k in np.unique(leaf_old):
                sel = leaf_old == k
                old_val[sel] = P.leaf_value_at(k, D, sel)
            adm = _admissible(P, leaf_old, frozen)
            keep = adm & (np.abs(old_val - (r + P.f)) <= scale)
            leaf = np.where(keep, leaf_old, leaf)
        key = leaf.tobytes()
        if key in seen:
            # a repeated policy is a fixed point (converged up to round-off) or a cycle
            report.fixed_point = leaf_old is not None and np.array_equal(leaf, leaf_old)
            return u, report.fixed_point
        seen.add(key)
        A, b = P.linear_system(leaf, u)
        x = _linsolve(A, b)
        report.linear_solves += 1
        u = u.copy()
        u[P.int_flat] = x
        leaf_old = leaf
        if deadline is not None and time.perf_counter() > deadline:
            break
    r, _, _ = P.evaluate(u, frozen)
    return u, float(np.max(np.abs(r))) <= tol


def _admissible(P, leaf, frozen):
    ok = np.ones(P.N, dtype=bool)
    if not frozen:
        return ok
    for k in np.unique(leaf):
        sel = leaf == k
        for j, pos in P.tree.paths[k]:
            if j in frozen:
                ok[sel] &= frozen[j][sel] == pos
    return ok


def _policy_solve(P, u, frozen, tol, max_iter, report, deadline, depth=0):
    ops = P.tree.ops(frozen)
    if len(ops) <= 1:
        return _howard(P, u, frozen, tol, max_iter, report, deadline)
    free = [j for j in range(len(P.tree.nodes)) if j not in frozen]
    level = min(P.tree.nodes[j][2] for j in free)
    ids = [j for j in free if P.tree.nodes[j][2] == level]
    choices = None
    for _ in range(max_iter):
        new, _ = P.node_choices(u, ids, frozen)
        if choices is not None:
            same = all(np.array_equal(new[j], choices[j]) for j in ids)
            if same:
                break
            # stable tie-breaking: keep the old choice where it is as good
            f_old = dict(frozen)
            f_old.update(choices)
            r_old, _, _ = P.evaluate(u, f_old)
            f_new = dict(frozen)
            f_new.update(new)
            r_new, _, _ = P.evaluate(u, f_new)
            keep = np.abs(r_old - r_new) <= 1e-12 * (1 + np.abs(r_new).max())
            for j in ids:
                new[j] = np.where(keep, choices[j], new[j])
            if all(np.array_equal(new[j], choices[j]) for j in ids):
                break
        choices = new
        f2 = dict(frozen)
        f2.update(choices)
        u, _ = _policy_solve(P, u, f2, tol, max_iter, report, deadline, depth + 1)
        if deadline is not None and time.perf_counter() > deadline:
            break
    return u, P.residual(u) <= tol if not frozen else True


def _pseudo_time(P, u, tol, max_steps, report):
    tau = 1.0 / max(P.diag_max(), 1e-300)
    for _ in range(max_steps):
        r, _, _ = P.evaluate(u)
        res = float(np.max(np.abs(r)))
        if res <= tol:
            return u, True
        u = u.copy()
        u[P.int_flat] -= tau * r
        report.iterations += 1
    return u, P.residual(u) <= tol


def solve(P: DiscreteProblem, tol: float | None = None, max_iter: int = 100, u0=None,
          pseudo_time_steps: int = 20000, time_limit: float | None = None) -> tuple[GridFunction, SolveReport]:
    """Howard policy iteration (Hoffman-Karp nesting for mixed min/max trees), pseudo-time fallback."""
    t0 = time.perf_counter()
    deadline = None if time_limit is None else t0 + time_limit
    u = _initial_guess(P) if u0 is None else np.asarray(u0, dtype=float).ravel().copy()
    if u0 is not None and not P.domain.torus:
        bnd = P.boundary_vector().reshape(P.domain.counts)
        uu = u.reshape(P.domain.counts)
        uu[..., 0], uu[..., -1] = bnd[..., 0], bnd[..., -1]
        u = uu.ravel()
    if tol is None:
        b = P.boundary_vector().reshape(P.domain.counts)
        faces = np.concatenate([b[..., 0].ravel(), b[..., -1].ravel()]) if not P.domain.torus else b.ravel()
        tol = 1e-8 * max(float(faces.max() - faces.min()), 1e-6 * float(np.abs(faces).max()), 1e-12)
    report = SolveReport(0, np.inf, 0.0, False)
    u, ok = _policy_solve(P, u, {}, tol, max_iter, report, deadline)
    res = P.residual(u)
    if res > tol and report.fixed_point:
        report.method = "howard (policy fixed point)"
        tol = res
    if res > tol:
        report.method = "howard+pseudo-time"
        u, ok = _pseudo_time(P, u, tol, pseudo_time_steps, report)
        res = P.residual(u)
    report.residual = res
    report.converged = res <= tol
    report.wall_time = time.perf_counter() - t0
    return GridFunction(P.domain, u), report


def residual(P: DiscreteProblem, u) -> float:
    vals = u.values.ravel() if isinstance(u, GridFunction) else np.asarray(u).ravel()
    return P.residual(vals)
