"""Support space ``L``, sphere states and the normalized update ``v(alpha)``."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .grid import EllipticOperator

log = logging.getLogger(__name__)

__all__ = [
    "SupportBasis",
    "SphereState",
    "SubspaceError",
    "orthonormalize",
    "empty_basis",
    "decompose",
    "project_out",
    "project_complement",
    "normalized_update",
]


# a second Gram-Schmidt pass runs when the first leaves more than this much
# overlap with earlier vectors; small enough that the basis Gram matrix is
# the identity to 1e-10 even for nearly dependent inputs
REPASS_LOSS = 1e-12


class SubspaceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SupportBasis:
    """a-orthonormal rows ``e_1..e_m`` spanning ``L``."""

    vectors: np.ndarray  # (m, N)
    op: EllipticOperator
    source_ids: tuple = ()

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    def coords(self, u: np.ndarray) -> np.ndarray:
        """Coefficients ``(u, e_j)_a``."""
        if self.dim == 0:
            return np.zeros(0)
        return self.vectors @ (self.op.matrix @ u)

    def combine(self, coeffs) -> np.ndarray:
        if self.dim == 0:
            return np.zeros(self.op.mesh.n_interior)
        return np.asarray(coeffs, dtype=float) @ self.vectors

    def gram(self) -> np.ndarray:
        return self.vectors @ (self.op.matrix @ self.vectors.T)


def empty_basis(op: EllipticOperator) -> SupportBasis:
    return SupportBasis(np.zeros((0, op.mesh.n_interior)), op, ())


def orthonormalize(solutions, op: EllipticOperator, source_ids=None, rank_tol: float = 1e-10) -> SupportBasis:
    """Modified Gram-Schmidt in the a-inner product, with one re-pass when needed."""
    solutions = [op.mesh.check(s) for s in solutions]
    if source_ids is None:
        source_ids = tuple(range(len(solutions)))
    A = op.matrix
    basis: list[np.ndarray] = []
    for k, s in enumerate(solutions):
        in_norm = math.sqrt(max(float(s @ (A @ s)), 0.0))
        if in_norm == 0.0:
            raise SubspaceError(f"support source {source_ids[k]!r} is the zero field")
        q = s.copy()
        for _ in range(2):
            for e in basis:
                q -= float(e @ (A @ q)) * e
            qn = math.sqrt(max(float(q @ (A @ q)), 0.0))
            if qn <= rank_tol * in_norm:
                raise SubspaceError(
                    f"support sources are linearly dependent at {source_ids[k]!r}"
                )
            if not basis:
                break
            loss = max(abs(float(e @ (A @ q))) / qn for e in basis)
            if loss <= REPASS_LOSS:
                break
        basis.append(q / qn)
    vecs = np.array(basis) if basis else np.zeros((0, op.mesh.n_interior))
    return SupportBasis(vecs, op, tuple(source_ids))


@dataclass(frozen=True, eq=False)
class SphereState:
    """Unit vector ``v = vL + vperp`` with ``vL`` in ``L`` and ``vperp`` orthogonal to it."""

    v: np.ndarray
    vL: np.ndarray
    vperp: np.ndarray
    vperp_norm: float
    coords: np.ndarray  # coefficients of vL in the basis


def decompose(v: np.ndarray, L: SupportBasis, renormalize: bool = True) -> SphereState:
    op = L.op
    v = op.mesh.check(v)
    nrm = math.sqrt(max(float(v @ (op.matrix @ v)), 0.0))
    if abs(nrm - 1.0) > 1e-8:
        log.debug("decompose: renormalizing v with ||v||_a = %.12g", nrm)
    if renormalize and nrm > 0:
        v = v / nrm
    c = L.coords(v)
    vL = L.combine(c)
    vperp = v - vL
    pn = math.sqrt(max(float(vperp @ (op.matrix @ vperp)), 0.0))
    if pn <= 1e-12:
        raise SubspaceError("v lies in the support space L")
    return SphereState(v=v, vL=vL, vperp=vperp, vperp_norm=pn, coords=c)


def project_complement(x: np.ndarray, state: SphereState, L: SupportBasis) -> np.ndarray:
    """Orthogonal projection of ``x`` onto ``[L, v]^perp``."""
    A = L.op.matrix
    y = x - L.combine(L.coords(x)) if L.dim else x.copy()
    c = float(state.vperp @ (A @ y)) / state.vperp_norm**2
    return y - c * state.vperp


def project_out(d_prev: np.ndarray, state: SphereState, L: SupportBasis, tol: float = 1e-8) -> np.ndarray:
    """``d - (d, vperp)/||vperp||^2 vperp`` for ``d`` already orthogonal to ``L``.

    Falls back to the full projection when ``d`` is not L-orthogonal.
    """
    A = L.op.matrix
    Ad = A @ d_prev
    dn = math.sqrt(max(float(d_prev @ Ad), 0.0))
    if L.dim:
        leak = np.max(np.abs(L.vectors @ Ad))
        if leak > tol * max(dn, 1e-300):
            log.warning("project_out: previous direction leaks into L (%.2e); full re-projection", leak)
            return project_complement(d_prev, state, L)
    c = float(state.vperp @ Ad) / state.vperp_norm**2
    return d_prev - c * state.vperp


def _check_tangent(d, state: SphereState, L: SupportBasis, tol):
    A = L.op.matrix
    Ad = A @ d
    dn2 = float(d @ Ad)
    scale = math.sqrt(max(dn2, 0.0)) + 1e-300
    bad = abs(float(state.v @ Ad))
    if L.dim:
        bad = max(bad, float(np.max(np.abs(L.vectors @ Ad))))
    if bad > tol * scale:
        raise SubspaceError(f"direction is not orthogonal to [L, v] (defect {bad / scale:.2e})")
    return dn2


def normalized_update(state: SphereState, d: np.ndarray, alpha: float, L: SupportBasis, tol: float = 1e-8) -> SphereState:
    """``v(alpha) = (v + alpha d) / sqrt(1 + alpha^2 ||d||^2)`` for ``d`` in ``[L, v]^perp``."""
    dn2 = _check_tangent(d, state, L, tol)
    if alpha == 0.0:
        return state
    ell = math.sqrt(1.0 + alpha * alpha * dn2)
    return decompose((state.v + alpha * d) / ell, L)
