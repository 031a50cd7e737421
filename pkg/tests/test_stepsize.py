import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saddlelmm.peak import DegeneratePeak
from saddlelmm.stepsize import (
    ConfigError,
    LineSearchError,
    MeritPoint,
    RuleParams,
    check_conditions,
    line_search,
    search_armijo,
    search_exact,
    search_goldstein,
    search_wolfe,
)


class Synthetic:
    """``alpha -> MeritPoint`` for a closed-form merit function."""

    def __init__(self, phi, dphi, bad=None):
        self.phi, self.dphi, self.bad = phi, dphi, bad
        self.calls = []

    def at_zero(self):
        return MeritPoint(0.0, self.phi(0.0), self.dphi(0.0))

    def __call__(self, a):
        self.calls.append(a)
        if self.bad is not None and self.bad(a):
            raise DegeneratePeak("synthetic degenerate trial")
        return MeritPoint(a, self.phi(a), self.dphi(a))


def cubic():
    return Synthetic(lambda a: 5.0 - a + a**3 / 3, lambda a: -1.0 + a * a)


def quadratic(slope, kappa):
    return Synthetic(lambda a: 2.0 + slope * a + 0.5 * kappa * a * a, lambda a: slope + kappa * a)


def intervals(slope, kappa, prm):
    s = -slope / kappa
    return {
        "sufficient_decrease": (0.0, 2 * (1 - prm.sigma1) * s),
        "strong_curvature": ((1 - prm.sigma2) * s, (1 + prm.sigma2) * s),
        "curvature": ((1 - prm.sigma2) * s, math.inf),
        "armijo": (0.0, 2 * (1 - prm.sigma) * s),
        "goldstein_lower": (2 * (1 - prm.delta) * s, math.inf),
    }


def replay(merit, res, prm, rule):
    flags = check_conditions(merit.at_zero(), res.point, prm)
    if rule == "strong-wolfe":
        return flags["sufficient_decrease"] and flags["strong_curvature"]
    if rule == "wolfe":
        return flags["sufficient_decrease"] and flags["curvature"]
    if rule == "armijo":
        return flags["armijo"]
    return flags["goldstein_upper"] and flags["goldstein_lower"]


class TestConditions:
    def test_at_zero(self):
        m = cubic()
        p0 = m.at_zero()
        c = check_conditions(p0, p0, RuleParams())
        assert c["sufficient_decrease"]
        assert not c["strong_curvature"]
        assert not c["curvature"]

    @pytest.mark.parametrize("slope, kappa", [(-1.0, 1.0), (-3.0, 0.5), (-0.2, 7.0)])
    def test_quadratic_intervals(self, slope, kappa):
        prm = RuleParams(rule="goldstein")
        prm_w = RuleParams()
        m = quadratic(slope, kappa)
        p0 = m.at_zero()
        span = 3 * (-slope / kappa)
        for a in np.linspace(1e-3, span, 997):
            pa = m(a)
            for p, keys in ((prm_w, ("sufficient_decrease", "strong_curvature", "curvature")),
                            (prm, ("goldstein_upper", "goldstein_lower"))):
                got = check_conditions(p0, pa, p)
                iv = intervals(slope, kappa, p)
                iv["goldstein_upper"] = (0.0, 2 * (1 - p.sigma) * (-slope / kappa))
                for key in keys:
                    lo, hi = iv[key]
                    if min(abs(a - lo), abs(a - hi)) < 1e-9:
                        continue
                    assert got[key] == (lo <= a <= hi), (key, a)

    def test_strong_implies_weak_examples(self):
        m = cubic()
        p0 = m.at_zero()
        for a in np.linspace(0.01, 2.0, 200):
            c = check_conditions(p0, m(a), RuleParams())
            if c["strong_curvature"]:
                assert c["curvature"]


@settings(max_examples=200, deadline=None)
@given(
    st.floats(min_value=-10, max_value=-1e-3),
    st.floats(min_value=-20, max_value=20),
    st.floats(min_value=0.01, max_value=0.49),
    st.floats(min_value=0.5, max_value=0.99),
)
def test_strong_wolfe_implies_weak(d0, da, s1, s2):
    p0 = MeritPoint(0.0, 1.0, d0)
    pa = MeritPoint(0.5, 0.9, da)
    c = check_conditions(p0, pa, RuleParams(sigma1=s1, sigma2=s2))
    assert (not c["strong_curvature"]) or c["curvature"]


class TestWolfe:
    def test_unit_step_accepted(self):
        m = cubic()
        res = search_wolfe(m, m.at_zero(), RuleParams())
        assert res.point.alpha == 1.0 and res.evals == 1

    @pytest.mark.parametrize("a0", [0.01, 0.1, 3.0, 10.0])
    @pytest.mark.parametrize("rule", ["wolfe", "strong-wolfe"])
    def test_cubic_acceptable_set(self, a0, rule):
        m = cubic()
        prm = RuleParams(rule=rule, alpha_init=a0)
        res = search_wolfe(m, m.at_zero(), prm)
        a = res.point.alpha
        assert replay(m, res, prm, rule)
        if rule == "strong-wolfe":
            assert math.sqrt(0.6) - 1e-12 <= a <= math.sqrt(1.4) + 1e-12

    @pytest.mark.parametrize("safeguard", [0.1, 1.0 / 3.0])
    def test_quadratic_bracket_and_zoom(self, safeguard):
        m = quadratic(-1.0, 40.0)
        prm = RuleParams(safeguard=safeguard)
        res = search_wolfe(m, m.at_zero(), prm)
        lo, hi = intervals(-1.0, 40.0, prm)["strong_curvature"]
        assert lo <= res.point.alpha <= hi
        assert len(res.trace) == res.evals

    def test_degenerate_trials_shrink(self):
        m = Synthetic(cubic().phi, cubic().dphi, bad=lambda a: a > 1.5)
        prm = RuleParams(alpha_init=4.0)
        res = search_wolfe(m, m.at_zero(), prm)
        assert replay(m, res, prm, "strong-wolfe")
        assert any(row[3] == "degenerate" for row in res.trace)

    def test_unbounded(self):
        m = Synthetic(lambda a: -a, lambda a: -1.0)
        with pytest.raises(LineSearchError, match="unbounded"):
            search_wolfe(m, m.at_zero(), RuleParams(alpha_max=64.0))

    def test_not_descent(self):
        m = Synthetic(lambda a: a, lambda a: 1.0)
        with pytest.raises(LineSearchError):
            search_wolfe(m, m.at_zero(), RuleParams())

    def test_eval_cap(self):
        m = Synthetic(lambda a: -a, lambda a: -1.0)
        with pytest.raises(LineSearchError, match="exceeded"):
            search_wolfe(m, m.at_zero(), RuleParams(max_evals=3))


@settings(max_examples=100, deadline=None)
@given(
    st.floats(min_value=-5, max_value=-0.01),
    st.floats(min_value=0.05, max_value=50),
    st.floats(min_value=0.01, max_value=20),
)
def test_wolfe_on_random_quadratics(slope, kappa, a0):
    m = quadratic(slope, kappa)
    prm = RuleParams(alpha_init=a0)
    res = search_wolfe(m, m.at_zero(), prm)
    assert replay(m, res, prm, "strong-wolfe")
    assert res.point.phi < m.at_zero().phi


class TestArmijo:
    def test_first_trial(self):
        m = cubic()
        res = search_armijo(m, m.at_zero(), RuleParams(rule="armijo"))
        assert res.point.alpha == 0.1 and res.evals == 1

    @pytest.mark.parametrize("kappa", [0.5, 30.0, 400.0, 1e5])
    def test_exhaustive_scan(self, kappa):
        m = quadratic(-1.0, kappa)
        prm = RuleParams(rule="armijo")
        p0 = m.at_zero()
        m_scan = next(
            k for k in range(61)
            if m.phi(0.1 * 0.5**k) - p0.phi <= prm.sigma * 0.1 * 0.5**k * p0.dphi
        )
        res = search_armijo(m, p0, prm)
        assert res.point.alpha == 0.1 * 0.5**m_scan
        assert replay(m, res, prm, "armijo")

    def test_feasible_for_any_descent(self):
        m = Synthetic(lambda a: -a + 1e6 * a * a, lambda a: -1 + 2e6 * a)
        res = search_armijo(m, m.at_zero(), RuleParams(rule="armijo"))
        assert res.point.phi < m.at_zero().phi

    def test_exhausted(self):
        m = Synthetic(lambda a: 1.0 + a, lambda a: -1.0)  # inconsistent slope
        with pytest.raises(LineSearchError, match="exhausted"):
            search_armijo(m, m.at_zero(), RuleParams(rule="armijo", armijo_max_m=5))


class TestGoldstein:
    def test_first_trial(self):
        m = quadratic(-1.0, 1.0)
        res = search_goldstein(m, m.at_zero(), RuleParams(rule="goldstein"))
        assert res.evals == 1 and res.point.alpha == 1.0

    @pytest.mark.parametrize("slope, kappa, a0", [(-1.0, 30.0, 1.0), (-2.0, 0.05, 1.0), (-1.0, 1.0, 50.0)])
    def test_interval(self, slope, kappa, a0):
        m = quadratic(slope, kappa)
        prm = RuleParams(rule="goldstein", alpha_init=a0)
        res = search_goldstein(m, m.at_zero(), prm)
        s = -slope / kappa
        assert 2 * (1 - prm.delta) * s <= res.point.alpha <= 2 * (1 - prm.sigma) * s
        assert replay(m, res, prm, "goldstein")

    def test_bad_constants(self):
        with pytest.raises(ConfigError):
            RuleParams(rule="goldstein", sigma=0.8, delta=0.5)


class TestExact:
    def test_known_minimizer(self):
        astar = 0.37
        m = Synthetic(
            lambda a: (a - astar) ** 4 + (a - astar) ** 2,
            lambda a: 4 * (a - astar) ** 3 + 2 * (a - astar),
        )
        res = search_exact(m, m.at_zero(), RuleParams(rule="exact"))
        assert abs(res.point.alpha - astar) <= 1e-5
        assert abs(res.point.dphi) <= 1e-4 * abs(m.at_zero().dphi)

    def test_inside_strong_wolfe_set(self):
        m = cubic()
        res = search_exact(m, m.at_zero(), RuleParams(rule="exact", alpha_init=0.2))
        assert replay(m, res, RuleParams(), "strong-wolfe")

    def test_dispatch(self):
        m = cubic()
        for rule in ("exact", "armijo", "goldstein", "wolfe", "strong-wolfe"):
            res = line_search(m, m.at_zero(), RuleParams(rule=rule))
            assert res.point.phi < m.at_zero().phi


class TestParams:
    def test_defaults(self):
        prm = RuleParams()
        assert (prm.sigma1, prm.sigma2, prm.alpha_max, prm.max_evals) == (0.1, 0.4, 1e3, 50)
        assert RuleParams(rule="goldstein").sigma == 0.2
        assert RuleParams(rule="armijo").sigma == 0.1

    def test_cg_needs_small_sigma2(self):
        with pytest.raises(ConfigError, match="1/2"):
            RuleParams(sigma2=0.6).validate(for_cg=True)
        with pytest.raises(ConfigError):
            RuleParams(rule="armijo").validate(for_cg=True)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"rule": "bisect"},
            {"sigma1": 0.5, "sigma2": 0.4},
            {"rule": "armijo", "rho": 1.0},
            {"alpha_init": 0.0},
            {"safeguard": 0.6},
            {"max_evals": 0},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            RuleParams(**kwargs)
