"""Descent directions on the sphere: steepest, preconditioned and FR-type CG.

All directions are returned already projected onto ``[L, v]^perp`` so
that :func:`normalized_update` accepts them.  Pairings with the gradient
are computed as ``d @ r`` where ``r`` is the first-variation vector, which
is the same number the line search sees through ``phi'``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .grid import EllipticOperator
from .subspace import SphereState, SupportBasis, project_complement, project_out

log = logging.getLogger(__name__)

__all__ = [
    "DIRECTIONS",
    "DirectionError",
    "DirectionState",
    "DirectionInfo",
    "IdentityPreconditioner",
    "DiagonalPreconditioner",
    "make_preconditioner",
    "steepest",
    "preconditioned",
    "cg_fr",
    "cone_bounds",
    "next_direction",
]

DIRECTIONS = ("sd", "psd", "cg-fr")
RESTART_EVERY = 50
CONJUGACY_LOSS = 0.9
CONE_SLACK = 1e-12


class DirectionError(RuntimeError):
    pass


class IdentityPreconditioner:
    name = "identity"

    def __call__(self, g: np.ndarray) -> np.ndarray:
        return g.copy()


class DiagonalPreconditioner:
    """``T g = D^{-1} A g`` with ``D = diag(A)``.

    Self-adjoint and positive in the a-inner product, with spectrum inside
    ``(0, 2]`` for the 5-point operator.
    """

    name = "diagonal"

    def __init__(self, op: EllipticOperator):
        self.op = op
        self.inv_diag = 1.0 / op.matrix.diagonal()

    def __call__(self, g: np.ndarray) -> np.ndarray:
        return self.inv_diag * (self.op.matrix @ g)


def make_preconditioner(spec: Union[str, Callable, None], op: EllipticOperator) -> Callable:
    if spec is None or spec == "identity":
        return IdentityPreconditioner()
    if spec == "diagonal":
        return DiagonalPreconditioner(op)
    if callable(spec):
        return spec
    raise ValueError(f"unknown preconditioner {spec!r}; choose identity or diagonal")


@dataclass
class DirectionState:
    """Per-run memory of the direction provider."""

    kind: str = "sd"
    prev_d: Optional[np.ndarray] = None
    prev_g: Optional[np.ndarray] = None
    prev_g_norm: float = math.nan  # squared a-norm of the previous gradient
    prev_t: float = math.nan
    prev_alpha: float = math.nan
    prev_d_norm: float = math.nan
    prev_gd: float = math.nan
    restart_count: int = 0
    since_restart: int = 0
    force_restart: bool = False
    sigma2: float = 0.4

    def __post_init__(self):
        if self.kind not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.kind!r}; choose from {', '.join(DIRECTIONS)}")

    @property
    def has_history(self) -> bool:
        return self.prev_d is not None

    def remember(self, g, d, g_norm2, gd, t, op: EllipticOperator):
        """Store the data of the direction just used (CG only)."""
        if self.kind != "cg-fr":
            return
        self.prev_d = d
        self.prev_g = g
        self.prev_g_norm = g_norm2
        self.prev_gd = gd
        self.prev_t = t
        self.prev_d_norm = math.sqrt(max(float(d @ (op.matrix @ d)), 0.0))

    def set_step(self, alpha: float):
        if self.kind == "cg-fr":
            self.prev_alpha = alpha


@dataclass
class DirectionInfo:
    d: np.ndarray
    beta: float = 0.0
    gamma: float = math.nan
    gd_over_g2: float = -1.0
    restart: bool = False
    c1_est: float = 1.0
    c2_est: float = 1.0
    cone: tuple = (-1.0, -1.0)
    cone_ok: bool = True
    a1_ok: bool = True
    a2_ok: bool = True
    extra: dict = field(default_factory=dict)
    g: Optional[np.ndarray] = None  # tangent gradient the direction was built from
    g2: float = math.nan

    def row(self, k: int) -> dict:
        return {
            "k": k,
            "beta": self.beta,
            "gamma": self.gamma,
            "gd_over_g2": self.gd_over_g2,
            "restart_flag": int(self.restart),
            "c1_est": self.c1_est,
            "c2_est": self.c2_est,
        }


def cone_bounds(sigma2: float, j: int) -> tuple[float, float]:
    """Interval for ``(g, d)/||g||^2`` after ``j`` conjugate steps."""
    s = sigma2 ** (j + 1)
    return (-(1.0 - s) / (1.0 - sigma2), -(1.0 - 2.0 * sigma2 + s) / (1.0 - sigma2))


def _anorm(op, x):
    return math.sqrt(max(float(x @ (op.matrix @ x)), 0.0))


def steepest(g: np.ndarray) -> np.ndarray:
    return -g


def preconditioned(T: Callable, g: np.ndarray, state: SphereState, L: SupportBasis, r: np.ndarray | None = None) -> tuple[np.ndarray, float, float]:
    """``d = -P(T g)`` with ``P`` the projection onto ``[L, v]^perp``.

    Returns ``(d, c3, c4)`` with ``c3 = ||Tg||/||g||`` and
    ``c4 = (Tg, g)/||g||^2``.
    """
    op = L.op
    Tg = np.asarray(T(g), dtype=float)
    Ag = op.matrix @ g if r is None else r
    g2 = float(g @ Ag)
    if g2 <= 0.0:
        return np.zeros_like(g), math.nan, math.nan
    c3 = _anorm(op, Tg) / math.sqrt(g2)
    c4 = float(Tg @ Ag) / g2
    d = -project_complement(Tg, state, L)
    if not float(d @ Ag) < 0.0:
        raise DirectionError(
            "preconditioned direction is not a descent direction after projection; "
            "the preconditioner is incompatible with [L, v]^perp"
        )
    return d, c3, c4


def cg_fr(
    g: np.ndarray,
    state: SphereState,
    L: SupportBasis,
    ds: DirectionState,
    t_k: float,
    alpha_prev: float,
    r: np.ndarray | None = None,
) -> DirectionInfo:
    """FR-type conjugate direction ``d = -g + beta P d_prev``.

    ``beta = gamma ||g||^2 / ||g_prev||^2`` and
    ``gamma = t_hat / t_prev`` with ``t_hat = t_k / sqrt(1 + alpha^2 ||d_prev||^2)``.
    """
    op = L.op
    Ag = op.matrix @ g if r is None else r
    g2 = float(g @ Ag)
    restart_reason = None
    if not ds.has_history:
        restart_reason = "first"
    elif ds.force_restart:
        restart_reason = "forced"
    elif ds.since_restart + 1 >= RESTART_EVERY:
        restart_reason = "periodic"
    elif abs(float(ds.prev_g @ Ag)) > CONJUGACY_LOSS * g2:
        restart_reason = "conjugacy"
    beta, gamma = 0.0, math.nan
    d = None
    if restart_reason is None:
        t_hat = t_k / math.sqrt(1.0 + alpha_prev * alpha_prev * ds.prev_d_norm**2)
        gamma = t_hat / ds.prev_t
        beta = gamma * g2 / ds.prev_g_norm
        d = -g + beta * project_out(ds.prev_d, state, L)
        d = project_complement(d, state, L)
        if not float(d @ Ag) < 0.0:
            restart_reason = "non-descent"
            d = None
            beta = 0.0
    if d is None:
        d = project_complement(-g, state, L)
        j = 0
        if restart_reason not in ("first",):
            ds.restart_count += 1
            log.info("CG restart (%s)", restart_reason)
        ds.since_restart = 0
    else:
        ds.since_restart += 1
        j = ds.since_restart
    ds.force_restart = False
    gd = float(d @ Ag) / g2 if g2 > 0 else -1.0
    lo, hi = cone_bounds(ds.sigma2, j)
    cone_ok = lo - CONE_SLACK <= gd <= hi + CONE_SLACK
    if not cone_ok:
        log.warning("CG descent cone violated: %.6g not in [%.6g, %.6g]", gd, lo, hi)
    c1 = (1.0 - 2.0 * ds.sigma2) / (1.0 - ds.sigma2)
    c2 = _anorm(op, d) / math.sqrt(g2) if g2 > 0 else math.nan
    return DirectionInfo(
        d=d,
        beta=beta,
        gamma=gamma,
        gd_over_g2=gd,
        restart=restart_reason is not None and restart_reason != "first",
        c1_est=c1,
        c2_est=c2,
        cone=(lo, hi),
        cone_ok=cone_ok,
        a1_ok=gd <= -c1 + CONE_SLACK,
        a2_ok=True,
        extra={"restart_reason": restart_reason, "j": j},
    )


def next_direction(
    ds: DirectionState,
    g: np.ndarray,
    r: np.ndarray,
    state: SphereState,
    L: SupportBasis,
    t_k: float,
    alpha_prev: float,
    preconditioner: Callable | None = None,
) -> DirectionInfo:
    """Dispatch on ``ds.kind`` and fill the monitor columns.

    ``g`` is first projected onto ``[L, v]^perp``: it lies there in exact
    arithmetic, and the small part outside (of the size of the inner
    solve residual) would otherwise pollute the monitors.
    """
    op = L.op
    g_full2 = float(g @ r)
    gt = project_complement(g, state, L)
    Agt = op.matrix @ gt
    g2 = float(gt @ Agt)
    leak = abs(1.0 - g2 / g_full2) if g_full2 > 0 else 0.0
    if ds.kind == "cg-fr":
        info = cg_fr(gt, state, L, ds, t_k, alpha_prev, r=Agt)
        info.extra["leak"] = leak
        info.g, info.g2 = gt, g2
        return info
    if ds.kind == "sd":
        d = steepest(gt)
        c3 = c4 = 1.0
    else:
        T = preconditioner or IdentityPreconditioner()
        d, c3, c4 = preconditioned(T, gt, state, L, r=Agt)
    gd = float(d @ Agt) / g2 if g2 > 0 else -1.0
    dn = _anorm(op, d)
    c2_bound = 1.0 / c3 if c3 and math.isfinite(c3) else math.nan
    info = DirectionInfo(
        d=d,
        gd_over_g2=gd,
        c1_est=c4,
        c2_est=c2_bound,
        cone=(-math.inf, 0.0),
        extra={"leak": leak},
        g=gt,
        g2=g2,
    )
    # descent bound <E', d> <= -c1 ||g||^2 and length bound ||d|| <= ||g|| / c2 with c2 = 1/c3
    info.a1_ok = gd <= -c4 + 1e-10 * max(1.0, abs(c4))
    info.a2_ok = g2 <= 0 or dn <= c3 * math.sqrt(g2) * (1.0 + 1e-8)
    if not info.a1_ok:
        log.warning("descent-bound monitor: gd/g2 = %.6g above -c1 = %.6g", gd, -c4)
    return info
