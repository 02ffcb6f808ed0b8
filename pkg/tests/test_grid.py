import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bltail.grid import (GridError, GridFunction, MonotonicityError, assemble, decompose_diffusion,
                         decompose_index, residual, slice_osc, solve, stencil, strip_domain, torus_domain)
from bltail.operators import IsaacsOperator, LinearOperator, PucciOperator, laplacian
from oracles import strip_exact


def unit_strip(n=16, R=1.0, d=2):
    lat = list(np.eye(d)[:-1])
    n_s = round(R * n)
    return strip_domain(lat, [n] * (d - 1), np.eye(d)[-1], R, n_s)


def test_decompose_example():
    w = decompose_diffusion([[2.0, 1.0], [1.0, 2.0]], stencil(2, 2))
    assert w[(1, 0)] == pytest.approx(1.0)
    assert w[(0, 1)] == pytest.approx(1.0)
    assert w[(1, 1)] == pytest.approx(2.0)  # weight of the unit direction (1,1)/sqrt2
    assert w[(1, -1)] == pytest.approx(0.0)


def test_decompose_axes_only_fails_with_nearest():
    with pytest.raises(MonotonicityError) as err:
        decompose_diffusion([[2.0, 1.0], [1.0, 2.0]], stencil(2, 1))
    assert err.value.nearest is not None
    assert err.value.residual > 0


def test_decompose_lp_wide_stencil_reconstructs():
    A = np.array([[1.0, 1.5], [1.5, 4.0]])  # not diagonally dominant
    with pytest.raises(MonotonicityError):
        decompose_index(A, stencil(2, 2))
    dirs = stencil(2, 3)
    lam = decompose_index(A, dirs)
    assert np.all(lam >= 0)
    E = np.array(dirs, dtype=float)
    np.testing.assert_allclose(np.einsum("k,ki,kj->ij", lam, E, E), A, atol=1e-9)


def test_stencil_sizes():
    assert len(stencil(2, 1)) == 2
    assert len(stencil(2, 2)) == 4
    assert len(stencil(3, 2)) == 9
    with pytest.raises(GridError):
        stencil(2, 4)


def test_degenerate_domains():
    with pytest.raises(GridError):
        strip_domain([np.array([1.0, 0.0])], [16], np.array([0.0, 1.0]), 0.1, 3)
    with pytest.raises(GridError):
        torus_domain(2, 3)


def test_linear_profile_is_exact():
    dom = unit_strip(8, 2.0)
    u, rep = solve(assemble(laplacian(2), dom, bc=(1.0, 0.0)))
    assert rep.converged
    s = np.arange(dom.n_s + 1) * dom.h
    np.testing.assert_allclose(u.values, np.broadcast_to(1 - s / 2.0, u.values.shape), atol=1e-12)


def test_constant_data_constant_solution():
    for F in (laplacian(2), PucciOperator("+", 2, 2)):
        u, rep = solve(assemble(F, unit_strip(8), bc=(3.5, 3.5)))
        assert np.abs(u.values - 3.5).max() <= 1e-12


def test_harmonic_strip_second_order():
    errs = []
    for n in (16, 32):
        dom = unit_strip(n, 1.0)
        bottom = lambda p: np.cos(2 * np.pi * p[..., 0])
        u, rep = solve(assemble(laplacian(2), dom, bc=(bottom, 0.0)))
        errs.append(np.abs(u.values - strip_exact(1.0, 1.0, dom.points())).max())
    assert errs[1] < 0.01
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_pucci_strip_residual_and_rotated_cell():
    dom = strip_domain([np.array([1.0, 2.0]) / 1.0], [24], np.array([2.0, -1.0]), 1.0, 12)
    bottom = lambda p: np.cos(2 * np.pi * p[..., 0])
    P = assemble(PucciOperator("+", 2, 2), dom, bc=(bottom, 0.0))
    u, rep = solve(P)
    assert rep.converged
    assert residual(P, u) <= 1e-7


def test_comparison_principle():
    dom = unit_strip(12)
    F = PucciOperator("-", 2, 2)
    g = lambda p: np.sin(2 * np.pi * p[..., 0])
    u1, _ = solve(assemble(F, dom, bc=(g, 0.0)))
    u2, _ = solve(assemble(F, dom, bc=(lambda p: g(p) + 0.3, 0.1)))
    assert np.all(u2.values >= u1.values - 1e-12)


def test_isaacs_mixed_tree_solves():
    F = IsaacsOperator([[np.eye(2), np.diag([2.0, 1.0])], [np.diag([1.0, 3.0])]])
    dom = unit_strip(12)
    P = assemble(F, dom, bc=(lambda p: np.cos(2 * np.pi * p[..., 0]), 0.0))
    u, rep = solve(P)
    assert rep.converged


def test_slice_osc_and_maximum_principle():
    dom = unit_strip(16, 1.0)
    u, _ = solve(assemble(laplacian(2), dom, bc=(lambda p: np.cos(2 * np.pi * p[..., 0]), 0.0)))
    assert slice_osc(u, 0.0) == pytest.approx(2.0)
    assert slice_osc(u, 0.5) < slice_osc(u, 0.25) < slice_osc(u, 0.0)
    assert u.values.max() <= 1 + 1e-12 and u.values.min() >= -1 - 1e-12


def test_binary_and_csv_io(tmp_path):
    dom = unit_strip(8)
    rng = np.random.default_rng(0)
    u = GridFunction(dom, rng.random(dom.counts))
    u.to_binary(tmp_path / "u.bin")
    v = GridFunction.from_binary(tmp_path / "u.bin")
    assert np.array_equal(u.values, v.values)
    u.to_csv(tmp_path / "u.csv")
    raw = (tmp_path / "u.csv").read_bytes()
    assert raw.count(b"\r\n") == 1 + u.values.size
    assert raw.splitlines()[0] == b"i0,i1,y0,y1,u"
    with pytest.raises(GridError):
        GridFunction(dom, np.full(dom.counts, np.nan))


def test_linear_layered_torus_problem_assembles():
    from bltail.operators import MatrixField, TorusFunction
    a = TorusFunction(2, ((2.0, (0, 0), 0.0), (1.0, (1, 0), 0.0)))
    F = LinearOperator(MatrixField.scalar_times_identity(2, a))
    P = assemble(F, torus_domain(2, 8), offsets=[np.ones(64)])
    assert P.N == 64


@settings(max_examples=15, deadline=None)
@given(st.floats(-2, 2), st.floats(0.1, 2), st.integers(0, 10**6))
def test_affine_invariance(c, a, seed):
    # u solves with data g  =>  a u + c solves with data a g + c (positively homogeneous F)
    rng = np.random.default_rng(seed)
    coef = rng.standard_normal(3)
    g = lambda p: coef[0] * np.cos(2 * np.pi * p[..., 0]) + coef[1] * np.sin(4 * np.pi * p[..., 0])
    dom = unit_strip(8)
    F = PucciOperator("+", 2, 2)
    u, _ = solve(assemble(F, dom, bc=(g, coef[2])))
    v, _ = solve(assemble(F, dom, bc=(lambda p: a * g(p) + c, a * coef[2] + c)))
    assert np.abs(v.values - (a * u.values + c)).max() <= 1e-8 * (1 + abs(c) + a * np.abs(u.values).max())
