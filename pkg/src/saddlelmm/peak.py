"""Local peak selection: maximize ``E`` over the half subspace ``[L, v]``.

Points of ``[L, v]`` are ``w = t v + sum_j c_j e_j`` with ``t >= 0``.  The
reduced function ``g(t, c) = E(w)`` lives in at most a handful of
dimensions, and both its gradient ``<E'(w), b>`` and its Hessian
``b^T (A - W f'(w)) b'`` over the spanning vectors are exact and cheap, so
the ascent uses Newton steps (with eigenvalue flipping away from concave
regions) instead of a secant update.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .problem import DivergenceError, ProblemDef, energy, first_variation
from .subspace import SupportBasis

log = logging.getLogger(__name__)

__all__ = [
    "PeakPoint",
    "PeakError",
    "DegeneratePeak",
    "maximize_on_halfspace",
    "verify_peak",
]

OVERFLOW_GUARD = 1e12


class PeakError(RuntimeError):
    pass


class DegeneratePeak(PeakError):
    """The maximizer collapsed onto ``L`` (``t`` below ``t_min``)."""

    def __init__(self, msg, peak=None):
        super().__init__(msg)
        self.peak = peak


@dataclass(frozen=True, eq=False)
class PeakPoint:
    t: float
    coeffs: np.ndarray
    w: np.ndarray
    value: float
    first_order_res: float
    iterations: int = 0

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([[self.t], self.coeffs])


def _reduced(problem: ProblemDef, B: np.ndarray):
    A = problem.operator.matrix
    W = problem.operator.weights
    AB = (A @ B.T).T  # rows A b_j
    BAB = B @ AB.T
    BAB = 0.5 * (BAB + BAB.T)
    h2 = problem.mesh.h ** 2

    def value(x):
        w = x @ B
        F = problem.F(w)
        val = 0.5 * float(x @ BAB @ x) - h2 * float(np.sum(F))
        if not math.isfinite(val):
            raise DivergenceError("non-finite energy in peak search")
        return val

    def grad(x):
        w = x @ B
        r = A @ w - W * problem.f(w)
        return B @ r, w

    def hess(w):
        return BAB - (B * (h2 * problem.df(w))) @ B.T

    return value, grad, hess


def maximize_on_halfspace(
    problem: ProblemDef,
    L: SupportBasis,
    v: np.ndarray,
    init=(1.0, None),
    tol: float = 1e-8,
    t_min: float = 1e-6,
    max_iter: int = 200,
) -> PeakPoint:
    """Local maximizer of ``E`` on ``[L, v]`` started from ``init = (t0, c0)``.

    Iterates until the first-order residual ``max_b |<E'(w), b>|`` over
    ``b in {v, e_1, ...}`` drops below ``tol``, then keeps polishing while
    Newton still makes progress (at most a few steps) so that downstream
    identities hold close to round-off.

    Raises :class:`DegeneratePeak` when ``t`` ends below ``t_min`` and
    :class:`PeakError` on non-convergence or an unbounded ascent.
    """
    t0, c0 = init
    if not t0 > 0:
        raise ValueError("initial t must be positive")
    m = L.dim
    c0 = np.zeros(m) if c0 is None else np.asarray(c0, dtype=float)
    if c0.shape != (m,):
        raise ValueError(f"initial coefficients must have length {m}")
    B = np.vstack([v[None, :], L.vectors]) if m else v[None, :].copy()
    value, grad, hess = _reduced(problem, B)
    x = np.concatenate([[float(t0)], c0])
    fx = value(x)
    G, w = grad(x)
    res = float(np.max(np.abs(G)))
    scale = max(1.0, float(np.linalg.norm(x)))
    polish_tol = 1e-13 * scale
    t_floor = 0.1 * t_min
    it = 0
    polish = 0
    while res > polish_tol:
        if it >= max_iter:
            break
        if res <= tol:
            polish += 1
            if polish > 3:
                break
        it += 1
        H = hess(w)
        lam, V = np.linalg.eigh(0.5 * (H + H.T))
        concave = bool(np.all(lam < 0))
        mag = np.maximum(np.abs(lam), 1e-10 * max(1.0, float(np.max(np.abs(lam)))))
        p = V @ ((V.T @ G) / mag)  # ascent step, equals -H^{-1} G when H < 0
        slope = float(G @ p)
        # keep t positive; the floor never sits above the current iterate
        floor = min(t_floor, 0.5 * x[0])
        if concave and x[0] + p[0] >= floor:
            # near the peak value changes drop below round-off, so a full
            # Newton step is judged by the residual
            xn = x + p
            fn = value(xn)
            Gn, wn = grad(xn)
            new_res = float(np.max(np.abs(Gn)))
            if new_res < res and fn >= fx - 1e-12 * max(1.0, abs(fx)):
                x, fx, G, w = xn, fn, Gn, wn
                if res <= tol and new_res >= 0.5 * res:
                    res = new_res
                    break
                res = new_res
                continue
            if res <= tol:
                break
        s = 1.0
        if x[0] + p[0] < floor:
            s = 0.5 * (x[0] - floor) / max(-p[0], 1e-300)
        xn = x + s * p
        fn = value(xn)
        back = 0
        while not fn >= fx + 1e-4 * s * slope and back < 60:
            s *= 0.5
            xn = x + s * p
            fn = value(xn)
            back += 1
        if back == 60:
            # no ascent along p: accept if we are already at tolerance
            if res <= tol:
                break
            raise PeakError(f"peak search stalled at residual {res:.3e}")
        if not concave and back == 0:
            # outside the concave region: expand while the value keeps rising
            while True:
                s2 = 2.0 * s
                if x[0] + s2 * p[0] < floor:
                    break
                x2 = x + s2 * p
                f2 = value(x2)
                if not f2 > fn:
                    break
                s, xn, fn = s2, x2, f2
                if fn > OVERFLOW_GUARD:
                    break
        if fn > OVERFLOW_GUARD:
            raise PeakError("energy unbounded above on [L, v]")
        x, fx = xn, fn
        G, w = grad(x)
        new_res = float(np.max(np.abs(G)))
        if res <= tol and new_res >= 0.5 * res:
            res = new_res
            break
        res = new_res
    if res > tol:
        raise PeakError(f"peak search did not reach tolerance {tol:.1e} (residual {res:.3e}, {it} steps)")
    w = x @ B
    r = first_variation(problem, w)
    fo = float(np.max(np.abs(B @ r)))
    pk = PeakPoint(
        t=float(x[0]),
        coeffs=x[1:].copy(),
        w=w,
        value=energy(problem, w),
        first_order_res=fo,
        iterations=it,
    )
    if pk.t < t_min:
        raise DegeneratePeak(f"peak collapsed onto L (t = {pk.t:.3e} < {t_min:.1e})", pk)
    return pk


def verify_peak(problem: ProblemDef, L: SupportBasis, v: np.ndarray, pk: PeakPoint, t_min: float = 1e-6) -> dict:
    """Residuals of the orthogonality ``<E'(w), b> = 0`` for ``b`` in ``[L, v]``."""
    r = first_variation(problem, pk.w)
    return {
        "along_v": abs(float(v @ r)),
        "along_basis": [abs(float(e @ r)) for e in L.vectors],
        "nehari": abs(float(pk.w @ r)),
        "degenerate": bool(pk.t < t_min),
    }
