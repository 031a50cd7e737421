"""Merit function ``phi(alpha) = E(p(v(alpha)))`` and normalized step-size rules.

Every search takes a *merit* callable ``alpha -> MeritPoint`` and the point
at ``alpha = 0``.  :class:`MeritFunction` provides the real one; tests can
pass any callable returning :class:`MeritPoint` values.

All decrease tests are written with ``p0.dphi = t_k <E'(w_k), d_k>``, which
for ``d_k = -g_k`` is ``-t_k ||g_k||^2`` and reproduces the classical
Armijo and Goldstein forms.

Comparisons use ``MeritPoint.change = phi(alpha) - phi(0)`` when the merit
function supplies it; near convergence this difference is far below the
round-off of ``phi`` itself.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .peak import DegeneratePeak, PeakError, PeakPoint, maximize_on_halfspace
from .problem import ProblemDef, energy_difference, residual_pairing
from .subspace import SphereState, SupportBasis, normalized_update

log = logging.getLogger(__name__)

__all__ = [
    "MeritPoint",
    "RuleParams",
    "StepResult",
    "LineSearchError",
    "ConfigError",
    "MeritFunction",
    "check_conditions",
    "accepts",
    "search_wolfe",
    "search_armijo",
    "search_goldstein",
    "search_exact",
    "line_search",
    "RULES",
]

RULES = ("exact", "armijo", "goldstein", "wolfe", "strong-wolfe")


class ConfigError(ValueError):
    pass


class LineSearchError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass(frozen=True, eq=False)
class MeritPoint:
    alpha: float
    phi: float
    dphi: float
    t_hat: float = 1.0
    peak: Optional[PeakPoint] = None
    state: Optional[SphereState] = None
    change: Optional[float] = None


def _chg(p: MeritPoint, p0: MeritPoint) -> float:
    return p.change if p.change is not None else p.phi - p0.phi


@dataclass(frozen=True)
class RuleParams:
    """Constants of one step-size rule.

    ``sigma`` is shared by Armijo (default 0.1) and Goldstein (default 0.2);
    leaving it ``None`` picks the rule's default.
    """

    rule: str = "strong-wolfe"
    sigma1: float = 0.1
    sigma2: float = 0.4
    sigma: Optional[float] = None
    delta: float = 0.8
    lam: float = 0.1
    rho: float = 0.5
    alpha_init: float = 1.0
    alpha_max: float = 1e3
    max_evals: int = 50
    armijo_max_m: int = 60
    exact_tol: float = 1e-6
    safeguard: float = 0.1  # zoom candidates stay this fraction away from the bracket ends

    def __post_init__(self):
        if self.sigma is None:
            object.__setattr__(self, "sigma", 0.2 if self.rule == "goldstein" else 0.1)
        self.validate()

    def validate(self, for_cg: bool = False) -> "RuleParams":
        r = self.rule
        if r not in RULES:
            raise ConfigError(f"unknown step-size rule {r!r}; choose from {', '.join(RULES)}")
        if r in ("wolfe", "strong-wolfe") and not (0 < self.sigma1 < self.sigma2 < 1):
            raise ConfigError(f"Wolfe constants need 0 < sigma1 < sigma2 < 1 (got {self.sigma1}, {self.sigma2})")
        if r == "goldstein" and not (0 < self.sigma < self.delta < 1):
            raise ConfigError(f"Goldstein constants need 0 < sigma < delta < 1 (got {self.sigma}, {self.delta})")
        if r == "armijo":
            if not 0 < self.sigma < 1:
                raise ConfigError(f"Armijo sigma must lie in (0, 1) (got {self.sigma})")
            if not (self.lam > 0 and 0 < self.rho < 1):
                raise ConfigError("Armijo needs lambda > 0 and rho in (0, 1)")
        if not (0 < self.alpha_init <= self.alpha_max):
            raise ConfigError("need 0 < alpha_init <= alpha_max")
        if not 0 < self.safeguard <= 0.5:
            raise ConfigError("safeguard must lie in (0, 1/2]")
        if self.max_evals < 1:
            raise ConfigError("max_evals must be positive")
        if for_cg:
            if r != "strong-wolfe":
                raise ConfigError("the CG-FR direction requires the strong Wolfe rule")
            if not self.sigma2 < 0.5:
                raise ConfigError(
                    f"the CG-FR direction requires sigma2 < 1/2 to stay a descent direction (got {self.sigma2})"
                )
        return self


@dataclass
class StepResult:
    point: MeritPoint
    rule: str
    evals: int
    trace: list = field(default_factory=list)
    fallback: bool = False


class MeritFunction:
    """``alpha -> MeritPoint`` for one outer iteration.

    The peak at ``v(alpha)`` is warm-started from the current ``(t_k, c_k)``.
    """

    def __init__(
        self,
        problem: ProblemDef,
        L: SupportBasis,
        state: SphereState,
        d: np.ndarray,
        peak0: PeakPoint,
        inner_tol: float = 1e-8,
        t_min: float = 1e-6,
    ):
        self.problem = problem
        self.L = L
        self.state = state
        self.d = d
        self.peak0 = peak0
        self.inner_tol = inner_tol
        self.t_min = t_min
        self.d_norm2 = float(d @ (problem.operator.matrix @ d))
        self.evals = 0
        self.inner_iterations = 0

    def at_zero(self) -> MeritPoint:
        pk = self.peak0
        return MeritPoint(
            alpha=0.0,
            phi=pk.value,
            dphi=pk.t * residual_pairing(self.problem, pk.w, self.d),
            t_hat=pk.t,
            peak=pk,
            state=self.state,
            change=0.0,
        )

    def __call__(self, alpha: float) -> MeritPoint:
        if alpha < 0:
            raise ValueError("alpha must be nonnegative")
        self.evals += 1
        st = normalized_update(self.state, self.d, alpha, self.L)
        pk = maximize_on_halfspace(
            self.problem,
            self.L,
            st.v,
            init=(self.peak0.t, self.peak0.coeffs),
            tol=self.inner_tol,
            t_min=self.t_min,
        )
        self.inner_iterations += pk.iterations
        t_hat = pk.t / math.sqrt(1.0 + alpha * alpha * self.d_norm2)
        dphi = t_hat * residual_pairing(self.problem, pk.w, self.d)
        change = energy_difference(self.problem, pk.w, self.peak0.w)
        return MeritPoint(alpha=alpha, phi=pk.value, dphi=dphi, t_hat=t_hat, peak=pk, state=st, change=change)


def check_conditions(p0: MeritPoint, pa: MeritPoint, params: RuleParams) -> dict:
    """Evaluate every rule inequality at ``pa`` relative to ``p0``."""
    a = pa.alpha
    dphi0 = p0.dphi
    change = _chg(pa, p0)
    return {
        "sufficient_decrease": change <= params.sigma1 * a * dphi0,
        "curvature": pa.dphi >= params.sigma2 * dphi0,
        "strong_curvature": abs(pa.dphi) <= -params.sigma2 * dphi0,
        "armijo": change <= params.sigma * a * dphi0,
        "goldstein_upper": change <= params.sigma * a * dphi0,
        "goldstein_lower": change >= params.delta * a * dphi0,
        "decrease": change < 0.0,
    }


def accepts(p0: MeritPoint, pa: MeritPoint, params: RuleParams, rule: str | None = None) -> bool:
    c = check_conditions(p0, pa, params)
    rule = rule or params.rule
    if rule == "wolfe":
        return c["sufficient_decrease"] and c["curvature"]
    if rule == "strong-wolfe":
        return c["sufficient_decrease"] and c["strong_curvature"]
    if rule == "armijo":
        return c["armijo"]
    if rule == "goldstein":
        return c["goldstein_upper"] and c["goldstein_lower"]
    if rule == "exact":
        return c["decrease"]
    raise ConfigError(f"unknown rule {rule!r}")


def _flags(p0, pa, params):
    c = check_conditions(p0, pa, params)
    keys = ("sufficient_decrease", "curvature", "strong_curvature", "armijo", "goldstein_upper", "goldstein_lower")
    return "".join("1" if c[k] else "0" for k in keys)


class _Tracker:
    def __init__(self, merit, p0, params, limit):
        self.merit = merit
        self.p0 = p0
        self.params = params
        self.limit = limit
        self.evals = 0
        self.trace = []

    def __call__(self, alpha):
        if self.evals >= self.limit:
            raise LineSearchError(f"line search exceeded {self.limit} evaluations", self.trace)
        self.evals += 1
        try:
            pa = self.merit(alpha)
        except DegeneratePeak as exc:
            self.trace.append((alpha, math.nan, math.nan, "degenerate"))
            log.info("trial alpha=%.4g gave a degenerate peak: %s", alpha, exc)
            return None
        except PeakError as exc:
            self.trace.append((alpha, math.nan, math.nan, "peak-failure"))
            log.info("trial alpha=%.4g: inner maximization failed: %s", alpha, exc)
            return None
        self.trace.append((alpha, pa.phi, pa.dphi, _flags(self.p0, pa, self.params)))
        return pa


def _require_descent(p0):
    if not p0.dphi < 0:
        raise LineSearchError(f"not a descent direction (phi'(0) = {p0.dphi:.3e})")


def _interpolate(lo: MeritPoint, hi_alpha: float, hi: Optional[MeritPoint], p0: MeritPoint, safeguard: float = 0.1) -> float:
    a, b = lo.alpha, hi_alpha
    width = b - a
    cand = 0.5 * (a + b)
    if hi is not None and width != 0.0:
        curv = (_chg(hi, p0) - _chg(lo, p0) - lo.dphi * width) / (width * width)
        if curv > 0:
            cand = a - lo.dphi / (2.0 * curv)
    left, right = min(a, b), max(a, b)
    margin = safeguard * (right - left)
    return min(max(cand, left + margin), right - margin)


def search_wolfe(merit: Callable, p0: MeritPoint, params: RuleParams) -> StepResult:
    """Bracketing then zoom for the (strong) Wolfe conditions."""
    _require_descent(p0)
    strong = params.rule != "wolfe"
    track = _Tracker(merit, p0, params, params.max_evals)
    dphi0 = p0.dphi

    def decrease_ok(pa):
        return _chg(pa, p0) <= params.sigma1 * pa.alpha * dphi0

    def curvature_ok(pa):
        if strong:
            return abs(pa.dphi) <= -params.sigma2 * dphi0
        return pa.dphi >= params.sigma2 * dphi0

    def done(pa):
        return StepResult(pa, params.rule, track.evals, track.trace)

    def zoom(lo: MeritPoint, hi_alpha: float, hi: Optional[MeritPoint]):
        while True:
            a = _interpolate(lo, hi_alpha, hi, p0, params.safeguard)
            if abs(hi_alpha - lo.alpha) <= 1e-14 * max(1.0, abs(lo.alpha)):
                raise LineSearchError("zoom interval collapsed", track.trace)
            pa = track(a)
            if pa is None:
                hi_alpha, hi = a, None
                continue
            if not decrease_ok(pa) or _chg(pa, p0) >= _chg(lo, p0):
                hi_alpha, hi = a, pa
                continue
            if curvature_ok(pa):
                return done(pa)
            if pa.dphi * (hi_alpha - lo.alpha) >= 0:
                hi_alpha, hi = lo.alpha, lo
            lo = pa

    prev = p0
    a = min(params.alpha_init, params.alpha_max)
    first = True
    while True:
        pa = track(a)
        if pa is None:
            return zoom(prev, a, None)
        if not decrease_ok(pa) or (not first and _chg(pa, p0) >= _chg(prev, p0)):
            return zoom(prev, a, pa)
        if curvature_ok(pa):
            return done(pa)
        if pa.dphi >= 0:
            return zoom(pa, prev.alpha, prev)
        if a >= params.alpha_max:
            raise LineSearchError(
                f"no bracket up to alpha_max={params.alpha_max:g}: phi may be unbounded below "
                "along this ray, or alpha_max is too small",
                track.trace,
            )
        prev, first = pa, False
        a = min(2.0 * a, params.alpha_max)


def search_armijo(merit: Callable, p0: MeritPoint, params: RuleParams) -> StepResult:
    """Largest ``lam * rho^m`` passing the normalized Armijo decrease test."""
    _require_descent(p0)
    track = _Tracker(merit, p0, params, params.armijo_max_m + 1)
    for m in range(params.armijo_max_m + 1):
        a = params.lam * params.rho**m
        pa = track(a)
        if pa is None:
            continue
        if _chg(pa, p0) <= params.sigma * a * p0.dphi:
            return StepResult(pa, "armijo", track.evals, track.trace)
    raise LineSearchError(f"Armijo backtracking exhausted m <= {params.armijo_max_m}", track.trace)


def search_goldstein(merit: Callable, p0: MeritPoint, params: RuleParams) -> StepResult:
    """Bisection on the two-sided Goldstein test."""
    _require_descent(p0)
    track = _Tracker(merit, p0, params, params.max_evals)
    lo, hi = 0.0, math.inf
    a = min(params.alpha_init, params.alpha_max)
    while True:
        pa = track(a)
        if pa is None or _chg(pa, p0) > params.sigma * a * p0.dphi:
            hi = a
        elif _chg(pa, p0) < params.delta * a * p0.dphi:
            lo = a
        else:
            return StepResult(pa, "goldstein", track.evals, track.trace)
        if math.isinf(hi):
            if a >= params.alpha_max:
                raise LineSearchError("Goldstein search reached alpha_max", track.trace)
            a = min(2.0 * a, params.alpha_max)
        else:
            a = 0.5 * (lo + hi)


_GOLD = (math.sqrt(5.0) - 1.0) / 2.0


def search_exact(merit: Callable, p0: MeritPoint, params: RuleParams) -> StepResult:
    """Golden-section minimization of ``phi`` after a tripling bracket.

    Expensive; intended for diagnostics and cross-checks.
    """
    _require_descent(p0)
    track = _Tracker(merit, p0, params, max(params.max_evals, 100))
    best = [p0]

    def val(a):
        pa = track(a)
        if pa is None:
            return math.inf
        val_a = _chg(pa, p0)
        if val_a < _chg(best[0], p0):
            best[0] = pa
        return val_a

    # bracket a < b < c with phi(b) below both ends (values relative to phi(0))
    a, fa = 0.0, 0.0
    b = min(params.alpha_init, params.alpha_max)
    fb = val(b)
    if fb >= fa:
        c, fc = b, fb
        b = a + _GOLD * (c - a)
        fb = val(b)
        while fb >= fa:
            c, fc = b, fb
            b = a + (1 - _GOLD) * (c - a)
            fb = val(b)
            if c < 1e-14:
                raise LineSearchError("exact search could not find any decrease", track.trace)
    else:
        c = min(3.0 * b, params.alpha_max)
        fc = val(c)
        while fc < fb:
            if c >= params.alpha_max:
                raise LineSearchError("exact search reached alpha_max", track.trace)
            a, fa, b, fb = b, fb, c, fc
            c = min(3.0 * c, params.alpha_max)
            fc = val(c)
    # golden section on [a, c] keeping b
    while c - a > params.exact_tol:
        if (c - b) > (b - a):
            x = b + (1 - _GOLD) * (c - b)
            fx = val(x)
            if fx < fb:
                a, b, fb = b, x, fx
            else:
                c = x
        else:
            x = b - (1 - _GOLD) * (b - a)
            fx = val(x)
            if fx < fb:
                c, b, fb = b, x, fx
            else:
                a = x
    pa = best[0]
    if pa is p0:
        raise LineSearchError("exact search found no decrease", track.trace)
    return StepResult(pa, "exact", track.evals, track.trace)


_SEARCHES = {
    "wolfe": search_wolfe,
    "strong-wolfe": search_wolfe,
    "armijo": search_armijo,
    "goldstein": search_goldstein,
    "exact": search_exact,
}


def line_search(merit: Callable, p0: MeritPoint, params: RuleParams) -> StepResult:
    return _SEARCHES[params.rule](merit, p0, params)
