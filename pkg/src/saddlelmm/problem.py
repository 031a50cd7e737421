"""Semilinear problems ``-Lap u + a u = f(x, u)`` with zero Dirichlet data.

The energy is ``E(u) = 1/2 ||u||_a^2 - int F(x, u)`` and on the grid all
functionals are evaluated with the same matrix and quadrature, so the
discrete gradient is the exact Riesz representer of the discrete
derivative.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import binom

from .grid import EllipticOperator, Mesh, assemble_operator, build_mesh, norm_a, solve_linear
from .regions import Region, parse_region

log = logging.getLogger(__name__)

__all__ = [
    "ProblemDef",
    "EnergyReport",
    "DivergenceError",
    "make_problem",
    "nlse_problem",
    "henon_problem",
    "chandrasekhar_problem",
    "custom_problem",
    "energy",
    "energy_difference",
    "first_variation",
    "residual_pairing",
    "gradient",
    "initial_direction",
    "residual_sup",
    "energy_report",
    "chandrasekhar_primitive",
]


class DivergenceError(ArithmeticError):
    """Energy or nonlinearity evaluated to a non-finite number."""


@dataclass(frozen=True, eq=False)
class ProblemDef:
    """A benchmark or user problem bound to a mesh.

    ``f``, ``F`` and ``df`` act on nodal arrays; any ``x``-dependence has
    already been evaluated at the interior nodes.
    """

    case: str
    params: dict
    mesh: Mesh
    operator: EllipticOperator
    f: Callable[[np.ndarray], np.ndarray]
    F: Callable[[np.ndarray], np.ndarray]
    df: Callable[[np.ndarray], np.ndarray]
    notes: tuple = ()
    solver: dict = field(default_factory=lambda: {"rel_tol": 1e-10, "method": "direct"})

    @property
    def a_values(self) -> np.ndarray:
        return self.operator.a_values


@dataclass(frozen=True)
class EnergyReport:
    value: float
    grad_norm: float
    sup_residual: float


# -- nonlinearities ---------------------------------------------------------


def _cubic(weight):
    if weight is None:
        return (lambda u: u**3, lambda u: 0.25 * u**4, lambda u: 3.0 * u**2)
    return (
        lambda u: weight * u**3,
        lambda u: 0.25 * weight * u**4,
        lambda u: 3.0 * weight * u**2,
    )


# (1 + y)^(3/2) binomial series with y = t/2, integrated against (2t)^(3/2);
# each entry is (coefficient of t^k, power k + 5/2)
_CH_SERIES = [(float(binom(1.5, k)) / 2.0**k, k + 2.5) for k in range(12)]
_CH_SWITCH = 0.05  # below this the closed form loses digits to cancellation


def chandrasekhar_primitive(xi: np.ndarray) -> np.ndarray:
    """``F(xi) = int_0^xi (t^2 + 2t)^(3/2) dt`` for ``xi > 0``, zero below."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros_like(xi)
    pos = xi > 0
    small = pos & (xi < _CH_SWITCH)
    big = pos & ~small
    if np.any(big):
        s = 1.0 + xi[big]
        root = np.sqrt(xi[big] * (xi[big] + 2.0))
        out[big] = s / 8.0 * (2.0 * s * s - 5.0) * root + 0.375 * np.log1p(xi[big] + root)
    if np.any(small):
        x = xi[small]
        acc = np.zeros_like(x)
        for c, p in reversed(_CH_SERIES):
            acc += c * x**p / p
        out[small] = 2.0**1.5 * acc
    return out


def _chandrasekhar():
    def f(u):
        up = np.maximum(u, 0.0)
        return (up * (up + 2.0)) ** 1.5

    def df(u):
        up = np.maximum(u, 0.0)
        return 3.0 * (up + 1.0) * np.sqrt(up * (up + 2.0))

    return f, chandrasekhar_primitive, df


# -- constructors -----------------------------------------------------------


def _bind(case, params, mesh, a, funcs, notes=(), solver=None):
    op = assemble_operator(mesh, a)
    f, F, df = funcs
    return ProblemDef(
        case=case,
        params=dict(params),
        mesh=mesh,
        operator=op,
        f=f,
        F=F,
        df=df,
        notes=tuple(notes),
        solver=dict(solver or {"rel_tol": 1e-10, "method": "direct"}),
    )


def nlse_problem(mesh: Mesh, omega: float = 8.0, solver=None) -> ProblemDef:
    """Focusing NLSE: ``f = u^3``, ``a = omega |x|^2``."""
    if omega <= 0:
        raise ValueError("omega must be positive")
    a = omega * np.sum(mesh.node_coords**2, axis=1)
    return _bind("nlse", {"omega": omega}, mesh, a, _cubic(None), solver=solver)


def henon_problem(mesh: Mesh, ell: float = 6.0, solver=None) -> ProblemDef:
    """Henon: ``f = |x|^ell u^3``, ``a = 0``."""
    if ell < 0:
        raise ValueError("ell must be nonnegative")
    weight = np.hypot(mesh.node_coords[:, 0], mesh.node_coords[:, 1]) ** ell
    return _bind("henon", {"ell": ell}, mesh, 0.0, _cubic(weight), solver=solver)


def chandrasekhar_problem(mesh: Mesh, solver=None) -> ProblemDef:
    """Chandrasekhar: ``f = (u^2 + 2u)^(3/2)`` for ``u >= 0``, extended by zero."""
    return _bind(
        "chandrasekhar",
        {},
        mesh,
        0.0,
        _chandrasekhar(),
        notes=("f and F extended by zero for u < 0",),
        solver=solver,
    )


def custom_problem(mesh: Mesh, f_expr: str, a_expr: str = "0", solver=None) -> ProblemDef:
    """Problem from symbolic ``f(x1, x2, u)`` and ``a(x1, x2)`` expressions.

    ``F`` is the symbolic primitive when sympy finds one, otherwise 16-point
    Gauss-Legendre quadrature in ``u``.
    """
    import sympy

    x1, x2, u, s = sympy.symbols("x1 x2 u s", real=True)
    ns = {"x1": x1, "x2": x2, "u": u}
    f_sym = sympy.sympify(f_expr, locals=ns)
    a_sym = sympy.sympify(a_expr, locals=ns)
    if u in a_sym.free_symbols:
        raise ValueError("a(x) must not depend on u")
    X1, X2 = mesh.node_coords[:, 0], mesh.node_coords[:, 1]
    a_vals = np.broadcast_to(
        np.asarray(sympy.lambdify((x1, x2), a_sym, "numpy")(X1, X2), dtype=float), X1.shape
    ).copy()
    f_num = sympy.lambdify((x1, x2, u), f_sym, "numpy")
    df_num = sympy.lambdify((x1, x2, u), sympy.diff(f_sym, u), "numpy")

    def f(w):
        return np.broadcast_to(np.asarray(f_num(X1, X2, w), dtype=float), w.shape)

    def df(w):
        return np.broadcast_to(np.asarray(df_num(X1, X2, w), dtype=float), w.shape)

    F_sym = None
    try:
        cand = sympy.integrate(f_sym.subs(u, s), (s, 0, u))
        if not cand.has(sympy.Integral):
            F_sym = cand
    except Exception:  # sympy raises a zoo of types here
        F_sym = None
    if F_sym is not None:
        F_num = sympy.lambdify((x1, x2, u), F_sym, "numpy")

        def F(w):
            return np.broadcast_to(np.asarray(F_num(X1, X2, w), dtype=float), w.shape)
    else:
        nodes, weights = np.polynomial.legendre.leggauss(16)

        def F(w):
            acc = np.zeros_like(w)
            for z, wt in zip(nodes, weights):
                acc += wt * f(0.5 * (z + 1.0) * w)
            return 0.5 * w * acc

    params = {"f": f_expr, "a": a_expr}
    return _bind("custom", params, mesh, a_vals, (f, F, df), solver=solver)


def make_problem(case: str, mesh: Mesh | None = None, *, domain="square", resolution=129, solver=None, **params) -> ProblemDef:
    if mesh is None:
        mesh = build_mesh(domain, resolution)
    if case == "nlse":
        return nlse_problem(mesh, float(params.get("omega", 8.0)), solver=solver)
    if case == "henon":
        return henon_problem(mesh, float(params.get("ell", 6.0)), solver=solver)
    if case == "chandrasekhar":
        return chandrasekhar_problem(mesh, solver=solver)
    if case == "custom":
        return custom_problem(mesh, params["f"], params.get("a", "0"), solver=solver)
    raise ValueError(f"unknown problem case {case!r}")


# -- functionals ------------------------------------------------------------


def _finite(x, what):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite {what}")
    return x


def energy(p: ProblemDef, u: np.ndarray) -> float:
    u = p.mesh.check(u)
    with np.errstate(over="ignore", invalid="ignore"):  # overflow is reported as DivergenceError
        Fu = p.F(u)
    quad = p.mesh.h**2 * np.sum(_finite(Fu, "primitive F(x, u)"))
    val = 0.5 * float(u @ (p.operator.matrix @ u)) - float(quad)
    if not math.isfinite(val):
        raise DivergenceError("non-finite energy")
    return val


_GL_S, _GL_W = np.polynomial.legendre.leggauss(6)
_GL_S = 0.5 * (_GL_S + 1.0)
_GL_W = 0.5 * _GL_W


def energy_difference(p: ProblemDef, u_new: np.ndarray, u_old: np.ndarray) -> float:
    """``E(u_new) - E(u_old)`` without subtracting two large energies.

    Uses ``F(b) - F(a) = (b - a) * int_0^1 f(a + s (b - a)) ds`` with 6-point
    Gauss-Legendre in ``s``, which keeps full relative accuracy when the two
    fields are close.  Far-apart fields fall back to the plain difference.
    """
    u_new = p.mesh.check(u_new)
    u_old = p.mesh.check(u_old)
    delta = u_new - u_old
    scale = float(np.max(np.abs(u_old))) if u_old.size else 0.0
    if float(np.max(np.abs(delta), initial=0.0)) > 1e-2 * max(scale, 1e-300):
        return energy(p, u_new) - energy(p, u_old)
    mean_f = np.zeros_like(delta)
    for s, w in zip(_GL_S, _GL_W):
        mean_f += w * p.f(u_old + s * delta)
    _finite(mean_f, "f(x, u)")
    quad = 0.5 * float(delta @ (p.operator.matrix @ (u_new + u_old)))
    return quad - p.mesh.h**2 * float(delta @ mean_f)


def first_variation(p: ProblemDef, u: np.ndarray) -> np.ndarray:
    """Vector ``r`` with ``<E'(u), phi> = phi @ r`` for every grid function ``phi``."""
    u = p.mesh.check(u)
    return p.operator.matrix @ u - p.operator.weights * _finite(p.f(u), "f(x, u)")


def residual_pairing(p: ProblemDef, u: np.ndarray, phi: np.ndarray) -> float:
    return float(p.mesh.check(phi) @ first_variation(p, u))


def gradient(p: ProblemDef, u: np.ndarray, r: np.ndarray | None = None) -> np.ndarray:
    """a-gradient ``g = u - A^{-1} W f(u)``.

    Solved in residual form ``A g = A u - W f(u)`` which is the same
    vector but does not lose digits to cancellation near a solution.
    """
    if r is None:
        r = first_variation(p, u)
    return solve_linear(p.operator, r, **p.solver)


def residual_sup(p: ProblemDef, u: np.ndarray, r: np.ndarray | None = None) -> float:
    """``max_i |Lap_h u - a u + f(x, u)|`` at the interior nodes."""
    if r is None:
        r = first_variation(p, u)
    return float(np.max(np.abs(r))) / p.mesh.h**2


def energy_report(p: ProblemDef, u: np.ndarray) -> EnergyReport:
    r = first_variation(p, u)
    g = gradient(p, u, r)
    return EnergyReport(
        value=energy(p, u),
        grad_norm=math.sqrt(max(float(g @ (p.operator.matrix @ g)), 0.0)),
        sup_residual=residual_sup(p, u, r),
    )


def initial_direction(p: ProblemDef, omega1, omega2) -> np.ndarray:
    """Normalized solution of ``-Lap v = 1_{omega1} - 1_{omega2}``.

    ``omega1``/``omega2`` are :class:`Region` objects or predicate strings;
    ``omega2`` may also be ``"complement"`` for the complement of ``omega1``.
    Indicators are cell averages (see :meth:`Region.fraction`).
    """
    mesh = p.mesh
    r1 = omega1 if isinstance(omega1, Region) else parse_region(omega1)
    frac1 = r1.fraction(mesh.node_coords, mesh.h)
    if isinstance(omega2, str) and omega2.strip().lower() == "complement":
        frac2 = 1.0 - frac1
    else:
        r2 = omega2 if isinstance(omega2, Region) else parse_region(omega2)
        frac2 = r2.fraction(mesh.node_coords, mesh.h)
    load = mesh.h**2 * (frac1 - frac2)
    if not np.any(load):
        raise ValueError("initial direction undefined: both regions miss every node")
    lap = p.operator.laplacian()
    v = solve_linear(lap, load, **p.solver)
    nrm = norm_a(p.operator, v)
    if nrm == 0.0:
        raise ValueError("initial direction vanished")
    return v / nrm
