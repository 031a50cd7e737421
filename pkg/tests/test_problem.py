import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from saddlelmm.grid import build_mesh, inner_a, norm_a, solve_linear
from saddlelmm.problem import (
    DivergenceError,
    chandrasekhar_primitive,
    energy,
    energy_difference,
    energy_report,
    first_variation,
    gradient,
    initial_direction,
    make_problem,
    residual_pairing,
    residual_sup,
)

from oracles import bilinear_by_edges

CASES = ["nlse", "henon", "chandrasekhar"]


def small(case, res=11, domain=None):
    if domain is None:
        domain = "dumbbell" if case == "chandrasekhar" else "square"
    return make_problem(case, domain=domain, resolution=res)


def random_field(p, rng, scale=1.0):
    return scale * rng.standard_normal(p.mesh.n_interior)


class TestNonlinearities:
    @pytest.mark.parametrize("case", CASES)
    def test_f_vanishes_at_zero(self, case):
        p = small(case)
        z = np.zeros(p.mesh.n_interior)
        np.testing.assert_array_equal(p.f(z), 0.0)
        np.testing.assert_array_equal(p.F(z), 0.0)

    @pytest.mark.parametrize("case", CASES)
    def test_primitive_derivative(self, case):
        rng = np.random.default_rng(3)
        p = small(case)
        xi = rng.uniform(-2, 3, p.mesh.n_interior)
        xi[np.abs(xi) < 0.05] = 0.5  # keep away from the kink of the extension
        eps = 1e-5
        fd = (p.F(xi + eps) - p.F(xi - eps)) / (2 * eps)
        np.testing.assert_allclose(fd, p.f(xi), rtol=1e-7, atol=1e-9)

    @pytest.mark.parametrize("case", CASES)
    def test_df_derivative(self, case):
        rng = np.random.default_rng(4)
        p = small(case)
        xi = rng.uniform(0.1, 3, p.mesh.n_interior)
        eps = 1e-6
        fd = (p.f(xi + eps) - p.f(xi - eps)) / (2 * eps)
        np.testing.assert_allclose(fd, p.df(xi), rtol=1e-6, atol=1e-9)

    def test_chandrasekhar_extension(self):
        xi = np.array([-3.0, -1e-8, 0.0, 1e-12])
        p = small("chandrasekhar")
        np.testing.assert_array_equal(p.f(xi[:3]), 0.0)
        assert p.f(xi[3:])[0] < 1e-15  # continuous at 0

    @pytest.mark.parametrize("xi", [1e-6, 5e-4, 1e-3, 0.0499, 0.05, 0.3, 1.0, 2.5, 7.0, 20.0])
    def test_chandrasekhar_primitive_vs_adaptive_quadrature(self, xi):
        ref, _ = quad(lambda t: (t * t + 2 * t) ** 1.5, 0, xi, epsabs=0, epsrel=1e-13)
        np.testing.assert_allclose(chandrasekhar_primitive(np.array([xi]))[0], ref, rtol=1e-12)

    def test_henon_weight(self):
        p = small("henon")
        x = p.mesh.node_coords
        u = np.ones(p.mesh.n_interior)
        np.testing.assert_allclose(p.f(u), np.hypot(x[:, 0], x[:, 1]) ** 6)

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            make_problem("nlse", domain="square", resolution=9, omega=-1)
        with pytest.raises(ValueError):
            make_problem("henon", domain="square", resolution=9, ell=-1)
        with pytest.raises(ValueError):
            make_problem("kdv", domain="square", resolution=9)

    def test_custom_matches_nlse(self):
        pytest.importorskip("sympy")
        mesh = build_mesh("square", 11)
        a = make_problem("nlse", mesh)
        b = make_problem("custom", mesh, f="u**3", a="8*(x1**2+x2**2)")
        u = np.random.default_rng(5).standard_normal(mesh.n_interior)
        np.testing.assert_allclose(energy(a, u), energy(b, u), rtol=1e-12)


class TestEnergy:
    @pytest.mark.parametrize("case", CASES)
    def test_zero(self, case):
        assert energy(small(case), np.zeros(small(case).mesh.n_interior)) == 0.0

    @pytest.mark.parametrize("case", CASES)
    def test_node_by_node_accumulator(self, case):
        rng = np.random.default_rng(6)
        p = small(case)
        u = random_field(p, rng)
        quad_F = sum(p.mesh.h**2 * float(Fi) for Fi in p.F(u))
        ref = 0.5 * bilinear_by_edges(p.mesh, p.a_values, u, u) - quad_F
        np.testing.assert_allclose(energy(p, u), ref, rtol=1e-12)

    def test_divergence(self):
        p = small("nlse")
        u = np.full(p.mesh.n_interior, 1e200)
        with pytest.raises(DivergenceError):
            energy(p, u)

    @pytest.mark.parametrize("case", CASES)
    def test_difference_far_fields(self, case):
        rng = np.random.default_rng(7)
        p = small(case)
        u, w = random_field(p, rng), random_field(p, rng)
        np.testing.assert_allclose(energy_difference(p, u, w), energy(p, u) - energy(p, w), rtol=1e-12)

    @pytest.mark.parametrize("case", CASES)
    def test_difference_close_fields(self, case):
        rng = np.random.default_rng(8)
        p = small(case)
        u = np.abs(random_field(p, rng)) + 0.5
        delta = 1e-9 * random_field(p, rng)
        # second-order Taylor model is exact up to O(|delta|^3)
        A = p.operator.matrix
        model = residual_pairing(p, u, delta) + 0.5 * float(
            delta @ (A @ delta) - p.mesh.h**2 * np.sum(p.df(u) * delta * delta)
        )
        np.testing.assert_allclose(energy_difference(p, u + delta, u), model, rtol=1e-7)


class TestPairingAndGradient:
    @pytest.mark.parametrize("case", CASES)
    def test_pairing_zero_field(self, case):
        p = small(case)
        phi = np.random.default_rng(9).standard_normal(p.mesh.n_interior)
        assert residual_pairing(p, np.zeros(p.mesh.n_interior), phi) == 0.0

    @pytest.mark.parametrize("case", CASES)
    def test_pairing_vs_central_difference(self, case):
        rng = np.random.default_rng(10)
        p = small(case)
        for _ in range(5):
            u = random_field(p, rng, 0.7)
            phi = random_field(p, rng)
            eps = 1e-5
            fd = (energy(p, u + eps * phi) - energy(p, u - eps * phi)) / (2 * eps)
            np.testing.assert_allclose(residual_pairing(p, u, phi), fd, rtol=1e-6)

    @pytest.mark.parametrize("case", CASES)
    def test_gradient_identity(self, case):
        rng = np.random.default_rng(11)
        p = small(case, res=17)
        for _ in range(20):
            u = random_field(p, rng)
            phi = random_field(p, rng)
            g = gradient(p, u)
            lhs = inner_a(p.operator, g, phi)
            assert abs(lhs - residual_pairing(p, u, phi)) <= 1e-8 * norm_a(p.operator, phi)

    def test_gradient_closed_form(self):
        rng = np.random.default_rng(12)
        p = small("nlse", res=17)
        u = random_field(p, rng)
        g = gradient(p, u)
        ref = u - solve_linear(p.operator, p.operator.weights * p.f(u))
        np.testing.assert_allclose(g, ref, atol=1e-9)

    def test_gradient_zero(self):
        p = small("henon")
        np.testing.assert_array_equal(gradient(p, np.zeros(p.mesh.n_interior)), 0.0)

    def test_report_fields(self):
        p = small("nlse")
        rep = energy_report(p, np.random.default_rng(13).standard_normal(p.mesh.n_interior))
        assert np.isfinite(rep.value) and rep.grad_norm >= 0 and rep.sup_residual >= 0


class TestResidualSup:
    def test_zero(self):
        p = small("nlse")
        assert residual_sup(p, np.zeros(p.mesh.n_interior)) == 0.0

    def test_manufactured_solution(self):
        errs = []
        for res in (17, 33, 65):
            base = small("nlse", res=res)
            x1, x2 = base.mesh.node_coords.T
            exact = np.sin(np.pi * x1) * np.sin(np.pi * x2)
            source = (2 * np.pi**2 + base.a_values) * exact
            # f(x, u) = u^3 + (source - exact^3) makes ``exact`` the continuous solution
            shift = source - exact**3
            p = dataclasses.replace(base, f=lambda u, s=shift: u**3 + s)
            errs.append(residual_sup(p, exact))
            assert errs[-1] <= 25.0 * base.mesh.h**2
        assert 3.5 <= errs[1] / errs[2] <= 4.5


class TestInitialDirection:
    def test_positive_for_whole_domain(self):
        p = small("nlse", res=17)
        v = initial_direction(p, "Omega", "empty")
        assert np.all(v > 0)
        np.testing.assert_allclose(norm_a(p.operator, v), 1.0, atol=1e-12)

    def test_odd_symmetry(self):
        p = small("nlse", res=33)
        v = initial_direction(p, "x1>0", "complement")
        V = p.mesh.to_grid(v)
        np.testing.assert_allclose(V, -V[:, ::-1], atol=1e-12)
        np.testing.assert_allclose(norm_a(p.operator, v), 1.0, atol=1e-12)

    def test_sign_pattern(self):
        p = small("henon", res=33)
        v = initial_direction(p, "x1>0,x2>0", "x1<0,x2<0")
        x1, x2 = p.mesh.node_coords.T
        assert v[np.argmin((x1 - 0.5) ** 2 + (x2 - 0.5) ** 2)] > 0
        assert v[np.argmin((x1 + 0.5) ** 2 + (x2 + 0.5) ** 2)] < 0

    def test_empty_regions(self):
        p = small("nlse")
        with pytest.raises(ValueError):
            initial_direction(p, "empty", "empty")


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1), st.sampled_from(CASES))
def test_energy_is_even_for_odd_nonlinearities(seed, case):
    # cubic cases are even in u; the extended Chandrasekhar term is not
    rng = np.random.default_rng(seed)
    p = small(case, res=9)
    u = rng.standard_normal(p.mesh.n_interior)
    if case == "chandrasekhar":
        w = -np.abs(u)
        assert energy(p, w) == pytest.approx(0.5 * inner_a(p.operator, w, w), rel=1e-12)
    else:
        assert energy(p, u) == pytest.approx(energy(p, -u), rel=1e-12)
