import math

import numpy as np
import pytest

from saddlelmm.directions import (
    RESTART_EVERY,
    DiagonalPreconditioner,
    DirectionError,
    DirectionState,
    IdentityPreconditioner,
    cg_fr,
    cone_bounds,
    make_preconditioner,
    next_direction,
    preconditioned,
    steepest,
)
from saddlelmm.grid import assemble_operator, build_mesh, inner_a, norm_a
from saddlelmm.subspace import decompose, empty_basis, orthonormalize, project_complement

MESH = build_mesh("square", 9)
OP = assemble_operator(MESH, lambda x: 8.0 * np.sum(x**2, axis=1))
A = OP.matrix.toarray()
N = MESH.n_interior


def setup(rng, m=2):
    L = orthonormalize([rng.standard_normal(N) for _ in range(m)], OP) if m else empty_basis(OP)
    v = rng.standard_normal(N)
    state = decompose(v / norm_a(OP, v), L)
    g = project_complement(rng.standard_normal(N), state, L)
    return L, state, g


def tangent_ok(d, state, L, tol=1e-8):
    dn = norm_a(OP, d)
    checks = [abs(inner_a(OP, d, state.v))] + [abs(inner_a(OP, d, e)) for e in L.vectors]
    return max(checks) <= tol * max(dn, 1e-300)


class TestCone:
    def test_first_step(self):
        assert cone_bounds(0.4, 0) == pytest.approx((-1.0, -1.0))

    def test_limit(self):
        lo, hi = cone_bounds(0.4, 200)
        assert lo == pytest.approx(-1 / 0.6) and hi == pytest.approx(-0.2 / 0.6)

    @pytest.mark.parametrize("s", [0.1, 0.25, 0.4, 0.49])
    def test_nested_and_negative(self, s):
        prev = None
        for j in range(30):
            lo, hi = cone_bounds(s, j)
            assert lo <= hi < 0
            if prev is not None:
                assert lo <= prev[0] and hi >= prev[1]
            prev = (lo, hi)


class TestSteepest:
    def test_zero(self):
        np.testing.assert_array_equal(steepest(np.zeros(4)), 0.0)

    def test_descent_and_length(self):
        rng = np.random.default_rng(0)
        L, state, g = setup(rng)
        d = steepest(g)
        np.testing.assert_allclose(inner_a(OP, g, d), -norm_a(OP, g) ** 2, rtol=1e-14)
        np.testing.assert_allclose(norm_a(OP, d), norm_a(OP, g), rtol=1e-14)
        assert tangent_ok(d, state, L)


def spectral_preconditioner(scales):
    """a-self-adjoint map with eigenvalues ``scales`` in the eigenbasis of A."""
    lam, Q = np.linalg.eigh(A)
    T = Q @ np.diag(scales) @ Q.T
    return lambda g: T @ g


class TestPreconditioned:
    def test_identity_is_steepest(self):
        rng = np.random.default_rng(1)
        L, state, g = setup(rng)
        d, c3, c4 = preconditioned(IdentityPreconditioner(), g, state, L)
        np.testing.assert_allclose(d, -g, atol=1e-12)
        assert c3 == pytest.approx(1.0) and c4 == pytest.approx(1.0)

    def test_scaling(self):
        rng = np.random.default_rng(2)
        L, state, g = setup(rng)
        d, c3, c4 = preconditioned(lambda x: 2.0 * x, g, state, L)
        np.testing.assert_allclose(d, -2 * g, atol=1e-12)
        np.testing.assert_allclose(inner_a(OP, g, d), -2 * norm_a(OP, g) ** 2, rtol=1e-12)

    def test_spectral_bounds(self):
        rng = np.random.default_rng(3)
        T = spectral_preconditioner(rng.uniform(0.5, 2.0, N))
        for _ in range(20):
            L, state, g = setup(rng, m=0)
            d, c3, c4 = preconditioned(T, g, state, L)
            assert c4 >= 0.5 - 1e-12 and c3 <= 2.0 + 1e-12
            assert tangent_ok(d, state, L)
            assert inner_a(OP, g, d) < 0

    def test_diagonal_preconditioner(self):
        rng = np.random.default_rng(4)
        P = make_preconditioner("diagonal", OP)
        assert isinstance(P, DiagonalPreconditioner)
        for _ in range(10):
            g = rng.standard_normal(N)
            Tg = P(g)
            c4 = inner_a(OP, Tg, g) / inner_a(OP, g, g)
            assert 0 < c4 <= 2.0 + 1e-12
            np.testing.assert_allclose(inner_a(OP, Tg, g), inner_a(OP, g, Tg), rtol=1e-12)

    def test_non_descent(self):
        rng = np.random.default_rng(5)
        L, state, g = setup(rng)
        with pytest.raises(DirectionError):
            preconditioned(lambda x: -x, g, state, L)

    def test_unknown(self):
        with pytest.raises(ValueError):
            make_preconditioner("ilu", OP)


class TestCG:
    def test_first_step_is_steepest(self):
        rng = np.random.default_rng(6)
        L, state, g = setup(rng)
        ds = DirectionState(kind="cg-fr")
        info = cg_fr(g, state, L, ds, 1.0, math.nan)
        np.testing.assert_allclose(info.d, -g, atol=1e-12)
        assert info.beta == 0.0 and not info.restart
        assert info.gd_over_g2 == pytest.approx(-1.0)

    def test_formula_instance(self):
        rng = np.random.default_rng(7)
        L, state, g = setup(rng)
        prev_d = project_complement(rng.standard_normal(N), state, L)
        other = project_complement(rng.standard_normal(N), state, L)
        other -= inner_a(OP, other, g) / inner_a(OP, g, g) * g  # a-orthogonal to g
        ds = DirectionState(kind="cg-fr")
        g2 = inner_a(OP, g, g)
        ds.remember(other, prev_d, g2, -1.0, 2.5, OP)
        info = cg_fr(g, state, L, ds, 2.5, 0.0)
        if info.restart:
            pytest.skip("random data happened to be non-descent")
        assert info.gamma == pytest.approx(1.0) and info.beta == pytest.approx(1.0)
        np.testing.assert_allclose(info.d, -g + prev_d, atol=1e-12)

    def test_gamma_uses_normalized_t(self):
        rng = np.random.default_rng(8)
        L, state, g = setup(rng)
        prev_d = 1e-3 * project_complement(rng.standard_normal(N), state, L)
        ds = DirectionState(kind="cg-fr")
        ds.remember(np.zeros(N), prev_d, inner_a(OP, g, g), -1.0, 2.0, OP)
        info = cg_fr(g, state, L, ds, 3.0, 0.5)
        expected = 3.0 / math.sqrt(1 + 0.25 * norm_a(OP, prev_d) ** 2) / 2.0
        assert info.gamma == pytest.approx(expected, rel=1e-12)
        assert info.beta >= 0

    def test_restarts(self):
        rng = np.random.default_rng(9)
        L, state, g = setup(rng)
        ds = DirectionState(kind="cg-fr")
        ds.remember(g.copy(), -g, inner_a(OP, g, g), -1.0, 1.0, OP)
        info = cg_fr(g, state, L, ds, 1.0, 0.1)
        assert info.restart and info.extra["restart_reason"] == "conjugacy"
        ds.force_restart = True
        info = cg_fr(g, state, L, ds, 1.0, 0.1)
        assert info.extra["restart_reason"] == "forced"
        assert not ds.force_restart
        ds.since_restart = RESTART_EVERY - 1
        ds.prev_g = np.zeros(N)
        info = cg_fr(g, state, L, ds, 1.0, 0.1)
        assert info.extra["restart_reason"] == "periodic"
        assert ds.restart_count == 3

    def test_non_descent_restart(self):
        rng = np.random.default_rng(10)
        L, state, g = setup(rng)
        ds = DirectionState(kind="cg-fr")
        ds.remember(np.zeros(N), 1e3 * g, 1e-6 * inner_a(OP, g, g), -1.0, 1.0, OP)
        info = cg_fr(g, state, L, ds, 1.0, 0.0)
        assert info.extra["restart_reason"] == "non-descent"
        np.testing.assert_allclose(info.d, -g, atol=1e-12)


class TestDispatch:
    @pytest.mark.parametrize("kind", ["sd", "psd", "cg-fr"])
    def test_tangent_and_descent(self, kind):
        rng = np.random.default_rng(11)
        L, state, _ = setup(rng)
        g = rng.standard_normal(N)  # includes a component outside the tangent space
        r = OP.matrix @ g
        ds = DirectionState(kind=kind)
        pre = make_preconditioner("diagonal", OP) if kind == "psd" else None
        info = next_direction(ds, g, r, state, L, 1.0, math.nan, pre)
        assert tangent_ok(info.d, state, L)
        assert float(info.d @ (OP.matrix @ info.g)) < 0
        assert info.a1_ok and info.a2_ok
        row = info.row(0)
        assert set(row) == {"k", "beta", "gamma", "gd_over_g2", "restart_flag", "c1_est", "c2_est"}

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            DirectionState(kind="bfgs")

    def test_memory_only_for_cg(self):
        ds = DirectionState(kind="sd")
        ds.remember(np.ones(N), np.ones(N), 1.0, -1.0, 1.0, OP)
        assert not ds.has_history
