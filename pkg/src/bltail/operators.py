"""Uniformly elliptic operators F(M, y) in Isaacs form, Pucci operators, projections, perturbations."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeVector

SYM_TOL = 1e-12


class OperatorError(ValueError):
    pass


class EllipticityError(AssertionError):
    def __init__(self, msg, witness=None):
        super().__init__(msg)
        self.witness = witness


def as_sym(M, d: int | None = None) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise OperatorError(f"not a square matrix: shape {M.shape}")
    if d is not None and M.shape[-1] != d:
        raise OperatorError(f"dimension mismatch: expected {d}, got {M.shape[-1]}")
    if M.shape[-1] not in (1, 2, 3):
        raise OperatorError("only d in {2, 3} supported")
    scale = max(1.0, float(np.max(np.abs(M))) if M.size else 1.0)
    if np.max(np.abs(M - np.swapaxes(M, -1, -2)), initial=0.0) > SYM_TOL * scale:
        raise OperatorError("matrix is not symmetric")
    return M


def _tr(A, M):
    return np.einsum("...ij,...ji->...", A, M)


# --------------------------------------------------------------------------- torus functions


@dataclass(frozen=True)
class TorusFunction:
    """Z^d-periodic scalar field: trig terms sum a cos(2 pi k.y + phase) plus optional grid samples."""

    d: int
    terms: tuple = ()  # ((amp, (k_1..k_d), phase), ...)
    grid: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        terms = tuple((float(a), tuple(int(k) for k in f), float(p)) for a, f, p in self.terms)
        for _, f, _ in terms:
            if len(f) != self.d:
                raise OperatorError("frequency vector has wrong dimension")
        object.__setattr__(self, "terms", terms)
        if self.grid is not None:
            g = np.array(self.grid, dtype=float)
            if g.ndim != self.d:
                raise OperatorError("grid samples must have d axes")
            g.setflags(write=False)
            object.__setattr__(self, "grid", g)

    @classmethod
    def constant(cls, d: int, c: float) -> "TorusFunction":
        return cls(d, ((c, (0,) * d, 0.0),))

    @classmethod
    def trig(cls, d: int, terms) -> "TorusFunction":
        return cls(d, tuple(terms))

    @classmethod
    def sampled(cls, values) -> "TorusFunction":
        values = np.asarray(values, dtype=float)
        return cls(values.ndim, (), values)

    @property
    def is_closed_form(self) -> bool:
        return self.grid is None

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.d:
            raise OperatorError("point dimension mismatch")
        out = np.zeros(y.shape[:-1])
        for a, f, p in self.terms:
            if not any(f):
                out = out + a * math.cos(p)
            else:
                out = out + a * np.cos(2 * np.pi * (y @ np.array(f, dtype=float)) + p)
        if self.grid is not None:
            out = out + _multilinear(self.grid, y)
        return out

    def mean(self) -> float:
        m = sum(a * math.cos(p) for a, f, p in self.terms if not any(f))
        if self.grid is not None:
            m += float(self.grid.mean())
        return m

    def frequencies(self) -> list[tuple[int, ...]]:
        """Nonzero frequencies; grid parts report None-like full spectrum via max_frequency."""
        return [f for a, f, p in self.terms if any(f) and a != 0.0]

    def max_frequency(self) -> float:
        fs = [max(abs(k) for k in f) for f in self.frequencies()]
        if self.grid is not None:
            fs.append(min(self.grid.shape) / 2)
        return float(max(fs, default=0.0))

    def bounds(self, n: int = 64) -> tuple[float, float]:
        """Sampled (min, max); exact envelope for trig terms is not attempted."""
        axes = [np.arange(n) / n] * self.d
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        v = self(pts)
        return float(v.min()), float(v.max())

    def plus(self, other: "TorusFunction") -> "TorusFunction":
        if other.d != self.d:
            raise OperatorError("dimension mismatch")
        if self.grid is not None and other.grid is not None:
            if self.grid.shape != other.grid.shape:
                raise OperatorError("grid shapes differ")
            grid = self.grid + other.grid
        else:
            grid = self.grid if self.grid is not None else other.grid
        return TorusFunction(self.d, self.terms + other.terms, grid)

    def scaled(self, t: float) -> "TorusFunction":
        grid = None if self.grid is None else t * self.grid
        return TorusFunction(self.d, tuple((t * a, f, p) for a, f, p in self.terms), grid)

    def to_dict(self) -> dict:
        out = {"d": self.d, "terms": [[a, list(f), p] for a, f, p in self.terms]}
        if self.grid is not None:
            out["grid_shape"] = list(self.grid.shape)
            out["grid"] = self.grid.ravel().tolist()
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TorusFunction":
        grid = None
        if "grid" in obj:
            grid = np.array(obj["grid"], dtype=float).reshape(obj["grid_shape"])
        return cls(int(obj["d"]), tuple((a, tuple(f), p) for a, f, p in obj["terms"]), grid)


def _multilinear(grid: np.ndarray, y: np.ndarray) -> np.ndarray:
    shape = np.array(grid.shape)
    x = (y % 1.0) * shape
    i0 = np.floor(x).astype(int)
    w = x - i0
    out = np.zeros(y.shape[:-1])
    d = grid.ndim
    for corner in range(2**d):
        bits = [(corner >> k) & 1 for k in range(d)]
        idx = tuple((i0[..., k] + bits[k]) % shape[k] for k in range(d))
        wt = np.ones(y.shape[:-1])
        for k in range(d):
            wt = wt * (w[..., k] if bits[k] else 1 - w[..., k])
        out = out + wt * grid[idx]
    return out


def perturb_boundary(psi: TorusFunction, xi, eps: float) -> TorusFunction:
    xi = LatticeVector.of(xi)
    if xi.d != psi.d:
        raise OperatorError("dimension mismatch")
    if eps == 0:
        return psi
    return TorusFunction(psi.d, psi.terms + ((float(eps), xi.comps, 0.0),), psi.grid)


# --------------------------------------------------------------------------- matrix fields


@dataclass(frozen=True)
class MatrixField:
    """Symmetric matrix-valued periodic field: const + sum over (i,j) of entry functions."""

    const: np.ndarray
    entries: tuple = ()  # ((i, j, TorusFunction), ...) with i <= j

    def __post_init__(self):
        c = np.array(self.const, dtype=float)
        as_sym(c)
        c.setflags(write=False)
        object.__setattr__(self, "const", c)

    @classmethod
    def of(cls, A) -> "MatrixField":
        return A if isinstance(A, MatrixField) else cls(np.asarray(A, dtype=float))

    @classmethod
    def scalar_times_identity(cls, d: int, a: TorusFunction) -> "MatrixField":
        return cls(np.zeros((d, d)), tuple((i, i, a) for i in range(d)))

    @property
    def d(self) -> int:
        return self.const.shape[0]

    @property
    def homogeneous(self) -> bool:
        return len(self.entries) == 0

    def __call__(self, y=None) -> np.ndarray:
        if self.homogeneous or y is None:
            if not self.homogeneous:
                raise OperatorError("y required for a y-dependent coefficient")
            return self.const
        y = np.asarray(y, dtype=float)
        out = np.broadcast_to(self.const, y.shape[:-1] + self.const.shape).copy()
        for i, j, f in self.entries:
            v = f(y)
            out[..., i, j] += v
            if i != j:
                out[..., j, i] += v
        return out

    def frequencies(self) -> list[tuple[int, ...]]:
        out = []
        for _, _, f in self.entries:
            out.extend(f.frequencies())
        return out

    def to_dict(self) -> dict:
        return {"const": self.const.tolist(),
                "entries": [[i, j, f.to_dict()] for i, j, f in self.entries]}

    @classmethod
    def from_dict(cls, obj) -> "MatrixField":
        return cls(np.array(obj["const"], dtype=float),
                   tuple((int(i), int(j), TorusFunction.from_dict(f)) for i, j, f in obj["entries"]))


# --------------------------------------------------------------------------- control trees


@dataclass(frozen=True)
class Leaf:
    coef: MatrixField


@dataclass(frozen=True)
class Node:
    op: str  # 'min' or 'max'
    children: tuple


def map_constant_leaves(tree, fn):
    if isinstance(tree, Leaf):
        if not tree.coef.homogeneous:
            raise OperatorError("transform requires a spatially homogeneous operator")
        return Leaf(MatrixField(fn(tree.coef.const)))
    return Node(tree.op, tuple(map_constant_leaves(c, fn) for c in tree.children))


def flatten_tree(tree):
    """Merge nested nodes with equal op; collapse single-child nodes."""
    if isinstance(tree, Leaf):
        return tree
    kids = []
    for c in tree.children:
        c = flatten_tree(c)
        if isinstance(c, Node) and c.op == tree.op:
            kids.extend(c.children)
        else:
            kids.append(c)
    if len(kids) == 1:
        return kids[0]
    return Node(tree.op, tuple(kids))


def tree_leaves(tree) -> list[Leaf]:
    if isinstance(tree, Leaf):
        return [tree]
    out = []
    for c in tree.children:
        out.extend(tree_leaves(c))
    return out


# --------------------------------------------------------------------------- operators


class Operator:
    d: int
    Lambda: float
    lam: float = 1.0
    homogeneous: bool = True

    def evaluate(self, M, y=None):
        raise NotImplementedError

    def __call__(self, M, y=None):
        return self.evaluate(M, y)

    def control_tree(self):
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def frequencies(self) -> list[tuple[int, ...]]:
        return []

    @property
    def is_linear(self) -> bool:
        return isinstance(flatten_tree(self.control_tree()), Leaf)

    def digest(self) -> str:
        s = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(s.encode()).hexdigest()[:16]

    def _prep(self, M, y):
        M = as_sym(M, self.d)
        if not self.homogeneous:
            if y is None:
                raise OperatorError("y required for a y-dependent operator")
            y = np.asarray(y, dtype=float)
            if y.shape[-1] != self.d:
                raise OperatorError("point dimension mismatch")
        return M, y


def _check_bounds(A: np.ndarray, lam: float, Lambda: float, what: str):
    ev = np.linalg.eigvalsh(A)
    if ev.min() < lam - 1e-9 or ev.max() > Lambda + 1e-9:
        raise OperatorError(f"{what}: eigenvalues {ev.min():.6g}..{ev.max():.6g} outside [{lam}, {Lambda}]")


class IsaacsOperator(Operator):
    """F(M, y) = min_a max_b -Tr(A^{ab}(y) M)."""

    def __init__(self, table, Lambda: float | None = None, check: bool = True):
        table = tuple(tuple(MatrixField.of(A) for A in row) for row in table)
        if not table or not all(table):
            raise OperatorError("empty control table")
        self.table = table
        self.d = table[0][0].d
        if any(A.d != self.d for row in table for A in row):
            raise OperatorError("controls have mixed dimensions")
        self.homogeneous = all(A.homogeneous for row in table for A in row)
        if Lambda is None:
            Lambda = self._sampled_max_eig()
        self.Lambda = float(Lambda)
        if check:
            self._check_ellipticity_bounds()

    def _sample_points(self, n=8):
        axes = [np.arange(n) / n] * self.d
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)

    def _sampled_max_eig(self):
        pts = self._sample_points()
        return max(max(float(np.linalg.eigvalsh(A(pts) if not A.homogeneous else A.const).max())
                       for A in row) for row in self.table)

    def _check_ellipticity_bounds(self):
        pts = self._sample_points()
        for row in self.table:
            for A in row:
                vals = A.const[None] if A.homogeneous else A(pts)
                for Ay in vals:
                    _check_bounds(Ay, 1.0, self.Lambda, "control")

    def evaluate(self, M, y=None):
        M, y = self._prep(M, y)
        vals = []
        for row in self.table:
            rv = [-_tr(A.const if A.homogeneous else A(y), M) for A in row]
            vals.append(np.max(np.stack(rv), axis=0))
        out = np.min(np.stack(vals), axis=0)
        return float(out) if np.ndim(out) == 0 else out

    def control_tree(self):
        return flatten_tree(Node("min", tuple(Node("max", tuple(Leaf(A) for A in row)) for row in self.table)))

    def frequencies(self):
        out = []
        for row in self.table:
            for A in row:
                out.extend(A.frequencies())
        return out

    def to_dict(self):
        return {"kind": "isaacs", "Lambda": self.Lambda,
                "table": [[A.to_dict() for A in row] for row in self.table]}


class LinearOperator(IsaacsOperator):
    """F(M, y) = -Tr(A(y) M)."""

    def __init__(self, A, Lambda: float | None = None, check: bool = True):
        super().__init__([[A]], Lambda, check)

    @property
    def A(self) -> MatrixField:
        return self.table[0][0]

    def to_dict(self):
        return {"kind": "linear", "Lambda": self.Lambda, "A": self.A.to_dict()}


def laplacian(d: int) -> LinearOperator:
    return LinearOperator(np.eye(d), 1.0)


def pucci(sign: str, lam: float, Lambda: float, M) -> float:
    """P+ = Lambda*sum(pos eig) + lam*sum(neg eig); P- swaps the weights."""
    if not 0 < lam <= Lambda:
        raise OperatorError("need 0 < lambda <= Lambda")
    ev = np.linalg.eigvalsh(as_sym(M))
    pos = np.where(ev > 0, ev, 0.0).sum(axis=-1)
    neg = np.where(ev < 0, ev, 0.0).sum(axis=-1)
    if sign == "+":
        out = Lambda * pos + lam * neg
    elif sign == "-":
        out = lam * pos + Lambda * neg
    else:
        raise OperatorError("sign must be '+' or '-'")
    return float(out) if np.ndim(out) == 0 else out


def _frame_directions(d: int, n_frames: int) -> list[np.ndarray]:
    th = np.arange(n_frames) * np.pi / n_frames
    if d == 2:
        return [np.array([math.cos(t), math.sin(t)]) for t in th]
    dirs = []
    for a, b in ((0, 1), (0, 2), (1, 2)):
        for t in th:
            v = np.zeros(3)
            v[a], v[b] = math.cos(t), math.sin(t)
            v[np.abs(v) < 1e-15] = 0.0
            if not any(np.allclose(v, w) or np.allclose(v, -w) for w in dirs):
                dirs.append(v)
    return dirs


class PucciOperator(Operator):
    """Elliptic Pucci operator F(M) = -P^{sign}_{lam,Lambda}(M).

    Evaluation is exact (eigenvalues). The grid solver uses a finite family of
    extreme diffusions lam*I + (Lambda-lam)*P, P a projector onto a frame
    direction or its complement; in 3-D the frames lie in the coordinate planes.
    """

    def __init__(self, sign: str, Lambda: float, d: int, lam: float = 1.0, n_frames: int = 16):
        if sign not in "+-" or len(sign) != 1:
            raise OperatorError("sign must be '+' or '-'")
        if not 0 < lam <= Lambda:
            raise OperatorError("need 0 < lambda <= Lambda")
        if d not in (2, 3):
            raise OperatorError("only d in {2, 3} supported")
        self.sign, self.Lambda, self.lam, self.d, self.n_frames = sign, float(Lambda), float(lam), d, int(n_frames)
        self.homogeneous = True

    def evaluate(self, M, y=None):
        M = as_sym(M, self.d)
        return -pucci(self.sign, self.lam, self.Lambda, M)

    def family(self) -> list[np.ndarray]:
        I = np.eye(self.d)
        lam, Lam = self.lam, self.Lambda
        out = [lam * I, Lam * I]
        if Lam > lam:
            for v in _frame_directions(self.d, self.n_frames):
                P = np.outer(v, v)
                out.append(lam * I + (Lam - lam) * P)
                if self.d == 3:
                    out.append(Lam * I - (Lam - lam) * P)
        return out

    def control_tree(self):
        op = "min" if self.sign == "+" else "max"
        return Node(op, tuple(Leaf(MatrixField(A)) for A in self.family()))

    def to_dict(self):
        return {"kind": "pucci", "sign": self.sign, "lam": self.lam, "Lambda": self.Lambda,
                "d": self.d, "n_frames": self.n_frames}


def _perturb_map(eta, eps):
    P = np.outer(eta, eta)

    def fwd(M):  # M + eps (eta^T M eta) eta eta^T
        return M + eps * np.einsum("i,...ij,j->...", eta, M, eta)[..., None, None] * P

    return fwd


class PerturbedOperator(Operator):
    """F_eps(M) = max{F(M), F(M + eps (eta^T M eta) eta eta^T)} kept as a two-branch wrapper."""

    def __init__(self, base: Operator, eta1, eps: float):
        if not base.homogeneous:
            raise OperatorError("perturbation requires a spatially homogeneous operator")
        if not eps > 0:
            raise OperatorError("eps must be positive")
        eta = np.asarray(eta1, dtype=float)
        if eta.shape != (base.d,) or abs(np.linalg.norm(eta) - 1) > 1e-12:
            raise OperatorError("eta1 must be a unit vector of matching dimension")
        self.base, self.eta1, self.eps = base, eta, float(eps)
        self.d, self.homogeneous = base.d, True
        self.lam = base.lam
        self.Lambda = base.Lambda * (1 + self.eps)
        self._fwd = _perturb_map(eta, self.eps)

    def evaluate(self, M, y=None):
        M = as_sym(M, self.d)
        a = np.asarray(self.base.evaluate(M))
        b = np.asarray(self.base.evaluate(self._fwd(M)))
        out = np.maximum(a, b)
        return float(out) if out.ndim == 0 else out

    def control_tree(self):
        t = self.base.control_tree()
        eta, eps = self.eta1, self.eps
        # -Tr(C T(M)) = -Tr(T*(C) M) with T*(C) = C + eps (eta^T C eta) eta eta^T
        t2 = map_constant_leaves(t, lambda C: C + eps * float(eta @ C @ eta) * np.outer(eta, eta))
        return Node("max", (t, t2))

    def to_dict(self):
        return {"kind": "perturbed", "base": self.base.to_dict(), "eta1": self.eta1.tolist(), "eps": self.eps}


def perturb_operator(F: Operator, eta1, eps: float) -> PerturbedOperator:
    return PerturbedOperator(F, eta1, eps)


class ProjectedOperator(Operator):
    """G(N) = Fbar(N11 eta eta + N12 (eta xi_hat + xi_hat eta) + N22 xi_hat xi_hat), a 2-D operator."""

    def __init__(self, base: Operator, xi, eta):
        if not base.homogeneous:
            raise OperatorError("projection requires a spatially homogeneous operator")
        xi = LatticeVector.of(xi)
        if xi.d != base.d:
            raise OperatorError("dimension mismatch")
        eta = np.asarray(eta, dtype=float)
        if abs(np.linalg.norm(eta) - 1) > 1e-12:
            raise OperatorError("eta must be a unit vector")
        if abs(eta @ xi.unit) > 1e-10:
            raise OperatorError(f"frame error: eta.xi_hat = {eta @ xi.unit:.3g}")
        self.base, self.xi, self.eta = base, xi, eta
        self.E = np.column_stack([eta, xi.unit])
        self.d, self.homogeneous = 2, True
        self.lam, self.Lambda = base.lam, base.Lambda

    def embed(self, N):
        return np.einsum("ia,...ab,jb->...ij", self.E, N, self.E)

    def evaluate(self, N, y=None):
        N = as_sym(N, 2)
        return self.base.evaluate(self.embed(N))

    def control_tree(self):
        return _project_tree(self.base, self.E)

    def to_dict(self):
        return {"kind": "projected", "base": self.base.to_dict(), "xi": list(self.xi.comps),
                "eta": self.eta.tolist()}


def _project_tree(base: Operator, E: np.ndarray):
    if isinstance(base, PucciOperator):
        # rotation invariance: the embedding has the 2-D eigenvalues plus zeros
        return PucciOperator(base.sign, base.Lambda, 2, base.lam, base.n_frames).control_tree()
    if isinstance(base, ProjectedOperator):
        return _project_tree(base.base, base.E @ E)
    if isinstance(base, PerturbedOperator):
        a = E.T @ base.eta1
        r = base.eta1 - E @ a
        inner = _project_tree(base.base, E)
        if np.linalg.norm(a) < 1e-12:
            # eta1 orthogonal to the plane: both branches coincide on embedded matrices
            return inner
        if np.linalg.norm(r) < 1e-12:
            eps = base.eps
            t2 = map_constant_leaves(inner, lambda C: C + eps * float(a @ C @ a) * np.outer(a, a))
            return Node("max", (inner, t2))
    return map_constant_leaves(base.control_tree(), lambda C: E.T @ C @ E)


def project_2d(Fbar: Operator, xi, eta) -> ProjectedOperator:
    return ProjectedOperator(Fbar, xi, eta)


# --------------------------------------------------------------------------- checks and io


def _random_sym(rng, d, n):
    B = rng.standard_normal((n, d, d))
    return 0.5 * (B + np.swapaxes(B, 1, 2))


def check_ellipticity(F: Operator, n_samples: int = 200, seed: int = 0, tol: float = 1e-10) -> float:
    """Sample the degenerate-ellipticity and Pucci sandwiches; return the largest observed ratio."""
    if n_samples < 1:
        raise OperatorError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    d = F.d
    M = _random_sym(rng, d, n_samples)
    Q = rng.standard_normal((n_samples, d, d))
    N = Q @ np.swapaxes(Q, 1, 2)
    # include axis-aligned rank-one N where sandwiches tend to be tight
    N[: min(n_samples, d)] = [np.diag(np.eye(d)[k]) for k in range(min(n_samples, d))]
    Y = rng.random((n_samples, d)) if not F.homogeneous else None
    worst = 0.0
    for k in range(n_samples):
        y = None if Y is None else Y[k]
        trN = float(np.trace(N[k]))
        diff = F.evaluate(M[k], y) - F.evaluate(M[k] + N[k], y)
        scale = tol * (1 + np.abs(M[k]).max() + np.abs(N[k]).max())
        if diff < F.lam * trN - scale or diff > F.Lambda * trN + scale:
            raise EllipticityError("degenerate ellipticity violated", (M[k], N[k], y))
        worst = max(worst, diff / trN)
        M2 = M[k] + _random_sym(rng, d, 1)[0]
        dF = F.evaluate(M[k], y) - F.evaluate(M2, y)
        lo = -pucci("+", F.lam, F.Lambda, M[k] - M2)
        hi = -pucci("-", F.lam, F.Lambda, M[k] - M2)
        if dF < lo - scale or dF > hi + scale:
            raise EllipticityError("Pucci sandwich violated", (M[k], M2, y))
    return worst


def operator_from_dict(obj: dict) -> Operator:
    kind = obj["kind"]
    if kind == "linear":
        return LinearOperator(MatrixField.from_dict(obj["A"]), obj["Lambda"], check=False)
    if kind == "isaacs":
        table = [[MatrixField.from_dict(A) for A in row] for row in obj["table"]]
        return IsaacsOperator(table, obj["Lambda"], check=False)
    if kind == "pucci":
        return PucciOperator(obj["sign"], obj["Lambda"], obj["d"], obj.get("lam", 1.0), obj.get("n_frames", 16))
    if kind == "perturbed":
        return PerturbedOperator(operator_from_dict(obj["base"]), obj["eta1"], obj["eps"])
    if kind == "projected":
        return ProjectedOperator(operator_from_dict(obj["base"]), obj["xi"], obj["eta"])
    raise OperatorError(f"unknown operator kind {kind!r}")


def dump_operator(F: Operator) -> str:
    return json.dumps(F.to_dict())


def load_operator(text: str) -> Operator:
    return operator_from_dict(json.loads(text))
