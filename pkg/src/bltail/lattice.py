"""Rational directions: irreducibility, periods, tangent lattices, Dirichlet approximation."""
from __future__ import annotations

import decimal
import math
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

DIRICHLET_MAX_N = 10**6


class LatticeError(ValueError):
    pass


@dataclass(frozen=True)
class LatticeVector:
    comps: tuple[int, ...]
    gcd: int = field(init=False, compare=False)

    def __post_init__(self):
        comps = tuple(int(c) for c in self.comps)
        if all(c == 0 for c in comps):
            raise LatticeError("zero lattice vector")
        object.__setattr__(self, "comps", comps)
        object.__setattr__(self, "gcd", reduce(math.gcd, (abs(c) for c in comps)))

    @classmethod
    def of(cls, xi) -> "LatticeVector":
        if isinstance(xi, LatticeVector):
            return xi
        return cls(tuple(int(c) for c in xi))

    @property
    def d(self) -> int:
        return len(self.comps)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.comps, dtype=float)

    @property
    def norm(self) -> float:
        return math.sqrt(sum(c * c for c in self.comps))

    @property
    def unit(self) -> np.ndarray:
        return self.array / self.norm

    def reduced(self) -> "LatticeVector":
        return LatticeVector(tuple(c // self.gcd for c in self.comps))

    def __iter__(self):
        return iter(self.comps)

    def __len__(self):
        return len(self.comps)


@dataclass(frozen=True)
class Direction:
    """Unit normal with a rationality tag: 'rational', 'irrational' or 'approximated'."""

    nu: tuple[float, ...]
    tag: str = "irrational"
    xi: LatticeVector | None = None
    error: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.nu, dtype=float)
        n = np.linalg.norm(v)
        if n == 0:
            raise LatticeError("zero direction")
        if abs(n - 1.0) > 1e-14:
            v = v / n
        object.__setattr__(self, "nu", tuple(float(c) for c in v))
        if self.tag not in ("rational", "irrational", "approximated"):
            raise LatticeError(f"unknown direction tag {self.tag!r}")
        if self.tag != "irrational" and self.xi is None:
            raise LatticeError("rational or approximated direction needs its lattice vector")

    @classmethod
    def rational(cls, xi) -> "Direction":
        xi = LatticeVector.of(xi).reduced()
        return cls(tuple(xi.unit), "rational", xi)

    @classmethod
    def of(cls, nu) -> "Direction":
        if isinstance(nu, Direction):
            return nu
        if isinstance(nu, LatticeVector):
            return cls.rational(nu)
        arr = np.asarray(nu)
        if arr.dtype.kind in "iu":
            return cls.rational(arr)
        return cls(tuple(float(c) for c in arr))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.nu)

    @property
    def d(self) -> int:
        return len(self.nu)


@dataclass(frozen=True)
class ApproachDirection:
    eta: np.ndarray
    degenerate: bool = False

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(self.eta))

    @property
    def eta_hat(self) -> np.ndarray | None:
        if self.degenerate:
            return None
        return self.eta / self.angle


def is_irreducible(xi) -> bool:
    return LatticeVector.of(xi).gcd == 1


def period_T(xi) -> float:
    xi = LatticeVector.of(xi)
    if xi.gcd != 1:
        raise LatticeError(f"{xi.comps} is reducible (gcd {xi.gcd})")
    # correctly rounded 1/sqrt(|xi|^2); the float route rounds twice
    n = sum(c * c for c in xi.comps)
    with decimal.localcontext() as ctx:
        ctx.prec = 40
        return float(1 / decimal.Decimal(n).sqrt())


def _max_index(comps) -> int:
    a = [abs(c) for c in comps]
    return a.index(max(a))


def tangent_basis(xi) -> list[LatticeVector]:
    """f^j = xi_m e_j - xi_j e_m for j != m, m the index of the largest |xi_i|."""
    xi = LatticeVector.of(xi)
    m = _max_index(xi.comps)
    out = []
    for j in range(xi.d):
        if j == m:
            continue
        f = [0] * xi.d
        f[j] = xi.comps[m]
        f[m] = -xi.comps[j]
        out.append(LatticeVector(tuple(f)))
    return out


def _gauss_reduce(b1: np.ndarray, b2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    while True:
        if b1 @ b1 > b2 @ b2:
            b1, b2 = b2, b1
        mu = int(round((b1 @ b2) / (b1 @ b1)))
        if mu == 0:
            return b1, b2
        b2 = b2 - mu * b1


def plane_lattice_basis(xi) -> list[np.ndarray]:
    """Reduced integer basis of the full lattice {x in Z^d : x.xi = 0}.

    The tangent_basis vectors span a sublattice of index |xi_m| in general;
    the strip solver uses this smaller primitive cell instead.
    """
    xi = LatticeVector.of(xi).reduced()
    d = xi.d
    a = list(xi.comps)
    U = np.eye(d, dtype=np.int64)
    while sum(1 for c in a if c != 0) > 1:
        nz = [i for i in range(d) if a[i] != 0]
        p = min(nz, key=lambda i: abs(a[i]))
        for i in nz:
            if i == p:
                continue
            q = a[i] // a[p]
            a[i] -= q * a[p]
            U[:, i] -= q * U[:, p]
    piv = next(i for i in range(d) if a[i] != 0)
    basis = [U[:, i].copy() for i in range(d) if i != piv]
    if d == 3:
        b1, b2 = _gauss_reduce(basis[0], basis[1])
        basis = [b1, b2]
    for b in basis:
        assert int(b @ np.array(xi.comps)) == 0
    return basis


def dirichlet_approx(alpha, N: int) -> tuple[np.ndarray, int]:
    """Smallest q in 1..N with max_i |q alpha_i - p_i| <= N^(-1/n).

    A q meeting the bound strictly is preferred; the boundary case is accepted
    only when no strict one exists (so alpha = 1/2, N = 2 gives q = 2, not 1).
    """
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    N = int(N)
    if N < 1:
        raise LatticeError("N must be >= 1")
    if N > DIRICHLET_MAX_N:
        raise LatticeError(f"N = {N} exceeds the exhaustive-search cap {DIRICHLET_MAX_N}")
    n = alpha.size
    bound = N ** (-1.0 / n)
    # small slack absorbs rounding when the bound is attained exactly
    slack = 1e-12 * max(1.0, float(np.max(np.abs(alpha))) * N)
    chunk = 65536
    boundary = None
    for start in range(1, N + 1, chunk):
        q = np.arange(start, min(N, start + chunk - 1) + 1, dtype=float)
        qa = q[:, None] * alpha[None, :]
        err = np.max(np.abs(qa - np.round(qa)), axis=1)
        strict = np.nonzero(err < bound - slack)[0]
        if boundary is None:
            ok = np.nonzero(err <= bound + slack)[0]
            if ok.size:
                boundary = int(q[ok[0]])
        if strict.size:
            qq = int(q[strict[0]])
            return np.round(qq * alpha).astype(np.int64), qq
    if boundary is None:
        raise LatticeError("no admissible denominator found")  # unreachable by Dirichlet
    return np.round(boundary * alpha).astype(np.int64), boundary


def rational_approx_direction(nu, eps: float) -> tuple[LatticeVector, float]:
    nu = Direction.of(nu)
    if nu.tag in ("rational", "approximated"):
        xi = nu.xi.reduced()
        return xi, float(np.linalg.norm(xi.array - xi.norm * nu.array))
    if not 0 < eps < 0.5:
        raise LatticeError("eps must lie in (0, 1/2)")
    v = nu.array
    d = v.size
    m = int(np.argmax(np.abs(v)))
    scaled = v / abs(v[m])
    others = [i for i in range(d) if i != m]
    N = math.ceil(eps ** (-(d - 1) / d))
    p, q = dirichlet_approx(scaled[others], N)
    comps = [0] * d
    comps[m] = q * int(np.sign(v[m]))
    for i, pi in zip(others, p):
        comps[i] = int(pi)
    xi = LatticeVector(tuple(comps)).reduced()
    return xi, float(np.linalg.norm(xi.array - xi.norm * v))


def approach_direction(nu, xi) -> ApproachDirection:
    v = Direction.of(nu).array
    xh = LatticeVector.of(xi).unit
    c = float(np.clip(v @ xh, -1.0, 1.0))
    perp = v - c * xh
    pn = np.linalg.norm(perp)
    if pn < 1e-15:
        if c < 0:
            raise LatticeError("nu = -xi_hat has no approach direction")
        return ApproachDirection(np.zeros_like(v), True)
    theta = math.atan2(pn, c)
    return ApproachDirection(-theta * perp / pn)


def geodesic_toward(xi, eta_hat, t: float) -> Direction:
    xh = LatticeVector.of(xi).unit
    e = np.asarray(eta_hat, dtype=float)
    if abs(e @ xh) > 1e-12:
        raise LatticeError("eta_hat must be orthogonal to xi")
    if not 0 <= t <= math.pi / 4 + 1e-15:
        raise LatticeError("t must lie in [0, pi/4]")
    e = e / np.linalg.norm(e)
    v = math.cos(t) * xh - math.sin(t) * e
    if t == 0:
        return Direction.rational(xi)
    return Direction(tuple(v))


def tangent_frame(xi, eta=None) -> np.ndarray:
    """Orthonormal columns (t_1..t_{d-1}, xi_hat); t_1 = eta when given."""
    xh = LatticeVector.of(xi).unit
    d = xh.size
    cols = []
    if eta is not None:
        e = np.asarray(eta, dtype=float)
        cols.append(e / np.linalg.norm(e))
    for k in range(d):
        if len(cols) == d - 1:
            break
        v = np.eye(d)[k]
        for c in cols + [xh]:
            v = v - (v @ c) * c
        if np.linalg.norm(v) > 1e-8:
            cols.append(v / np.linalg.norm(v))
    return np.column_stack(cols + [xh])
