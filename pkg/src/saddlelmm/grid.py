"""Masked uniform grids, the a-weighted 5-point operator and linear solves.

Grid functions are plain ``numpy`` arrays holding one value per interior
node, in the order fixed by :attr:`Mesh.index`.  The operator matrix already
carries the ``h**2`` quadrature weight, so that the discrete inner product
``(u, v)_a`` is exactly ``u @ A @ v``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

__all__ = [
    "Mesh",
    "EllipticOperator",
    "MeshError",
    "LinearSolveError",
    "build_mesh",
    "mesh_from_mask",
    "read_mask_file",
    "write_mask_file",
    "assemble_operator",
    "solve_linear",
    "inner_a",
    "norm_a",
    "quadrature",
    "write_field",
    "read_field",
    "DUMBBELL",
]


class MeshError(ValueError):
    pass


class LinearSolveError(RuntimeError):
    pass


# small disk (-1, 0) r=0.5, large disk (2, 0) r=1, corridor |x2| <= 0.2
DUMBBELL = {
    "small_center": (-1.0, 0.0),
    "small_radius": 0.5,
    "large_center": (2.0, 0.0),
    "large_radius": 1.0,
    "corridor_x1": (-1.0, 2.0),
    "corridor_half_width": 0.2,
}

_MEMBERSHIP_EPS = 1e-12


def dumbbell_contains(x1, x2):
    """Strict membership in the open dumbbell; works on scalars and arrays."""
    d = DUMBBELL
    (a1, a2), ra = d["small_center"], d["small_radius"]
    (b1, b2), rb = d["large_center"], d["large_radius"]
    lo, hi = d["corridor_x1"]
    hw = d["corridor_half_width"]
    in_small = (x1 - a1) ** 2 + (x2 - a2) ** 2 < ra**2 - _MEMBERSHIP_EPS
    in_large = (x1 - b1) ** 2 + (x2 - b2) ** 2 < rb**2 - _MEMBERSHIP_EPS
    in_corridor = (
        (x1 > lo + _MEMBERSHIP_EPS)
        & (x1 < hi - _MEMBERSHIP_EPS)
        & (np.abs(x2) < hw - _MEMBERSHIP_EPS)
    )
    return in_small | in_large | in_corridor


@dataclass(frozen=True, eq=False)
class Mesh:
    """Uniform grid of ``ny`` rows by ``nx`` columns with an interior mask.

    ``x1[i] = center[0] + (i - (nx - 1) / 2) * h`` and likewise for ``x2``;
    centering the coordinates keeps mirror-image nodes exactly negated.
    Non-interior nodes carry homogeneous Dirichlet data.
    """

    domain_kind: str
    nx: int
    ny: int
    h: float
    center: tuple[float, float]
    mask: np.ndarray  # (ny, nx) bool, True on interior nodes
    index: np.ndarray = field(repr=False)  # (ny, nx) int, -1 off the interior
    node_coords: np.ndarray = field(repr=False)  # (N, 2)
    node_ij: np.ndarray = field(repr=False)  # (N, 2) column, row

    @property
    def n_interior(self) -> int:
        return self.node_coords.shape[0]

    @property
    def x1(self) -> np.ndarray:
        return self.center[0] + (np.arange(self.nx) - (self.nx - 1) / 2) * self.h

    @property
    def x2(self) -> np.ndarray:
        return self.center[1] + (np.arange(self.ny) - (self.ny - 1) / 2) * self.h

    @property
    def mesh_id(self) -> str:
        digest = hashlib.sha1()
        digest.update(f"{self.domain_kind}|{self.nx}|{self.ny}|{self.h!r}|{self.center!r}".encode())
        digest.update(np.packbits(self.mask).tobytes())
        return digest.hexdigest()[:16]

    def to_grid(self, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Scatter interior values onto the full ``(ny, nx)`` array."""
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_interior,):
            raise MeshError(f"expected {self.n_interior} nodal values, got {values.shape}")
        out = np.full((self.ny, self.nx), fill, dtype=float)
        out[self.mask] = values[self.index[self.mask]]
        return out

    def check(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_interior,):
            raise MeshError(
                f"grid function has {values.shape} values, mesh has {self.n_interior} interior nodes"
            )
        return values


def mesh_from_mask(mask: np.ndarray, h: float, center=(0.0, 0.0), domain_kind="custom-mask") -> Mesh:
    mask = np.array(mask, dtype=bool)
    if mask.ndim != 2:
        raise MeshError("mask must be two-dimensional")
    if h <= 0:
        raise MeshError("grid spacing must be positive")
    # the outer frame is always Dirichlet
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False
    ny, nx = mask.shape
    rows, cols = np.nonzero(mask)
    n = rows.size
    if n == 0:
        raise MeshError("mesh has an empty interior")
    index = np.full((ny, nx), -1, dtype=np.int64)
    index[rows, cols] = np.arange(n)
    x1 = center[0] + (cols - (nx - 1) / 2) * h
    x2 = center[1] + (rows - (ny - 1) / 2) * h
    return Mesh(
        domain_kind=domain_kind,
        nx=nx,
        ny=ny,
        h=float(h),
        center=(float(center[0]), float(center[1])),
        mask=mask,
        index=index,
        node_coords=np.column_stack([x1, x2]),
        node_ij=np.column_stack([cols, rows]),
    )


def build_mesh(domain_spec: Union[str, dict], resolution: int = 129) -> Mesh:
    """Build the grid for a square, the dumbbell, or a mask file.

    ``resolution`` is the number of nodes across the unit-length-2 direction,
    so ``h = 2 / (resolution - 1)`` for both the square ``(-1, 1)^2`` and the
    dumbbell (whose ``x2``-extent is ``[-1, 1]``).  ``domain_spec`` may be a
    kind string or a mapping with ``kind`` and, for masks, ``mask_file``.
    """
    if isinstance(domain_spec, str):
        spec = {"kind": domain_spec}
    else:
        spec = dict(domain_spec)
    kind = spec.get("kind", "square")
    if kind in ("mask", "custom-mask"):
        return read_mask_file(spec["mask_file"])
    resolution = int(resolution)
    if resolution < 3:
        raise MeshError(f"resolution {resolution} too small (need at least 3 nodes per axis)")
    h = 2.0 / (resolution - 1)
    if kind == "square":
        n = resolution
        mask = np.zeros((n, n), dtype=bool)
        mask[1:-1, 1:-1] = True
        return mesh_from_mask(mask, h, (0.0, 0.0), "square")
    if kind == "dumbbell":
        ny = resolution
        # bounding box x1 in [-1.5, 3]; extend symmetrically when 4.5/h is fractional
        nx = int(math.ceil(4.5 / h - 1e-9)) + 1
        center = (0.75, 0.0)
        x1 = center[0] + (np.arange(nx) - (nx - 1) / 2) * h
        x2 = center[1] + (np.arange(ny) - (ny - 1) / 2) * h
        X1, X2 = np.meshgrid(x1, x2)
        mask = dumbbell_contains(X1, X2)
        return mesh_from_mask(mask, h, center, "dumbbell")
    raise MeshError(f"unknown domain kind {kind!r}")


def read_mask_file(path) -> Mesh:
    """Read a 0/1 mask grid.

    Format: a header line ``nx ny h`` followed by ``ny`` rows of ``nx``
    characters; the first row is the bottom row (smallest ``x2``).  Node
    ``(i, j)`` sits at ``(i*h, j*h)``.
    """
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise MeshError(f"{path}: empty mask file")
    try:
        nx_s, ny_s, h_s = lines[0].split()
        nx, ny, h = int(nx_s), int(ny_s), float(h_s)
    except ValueError as exc:
        raise MeshError(f"{path}: header must be 'nx ny h'") from exc
    rows = lines[1:]
    if len(rows) != ny or any(len(r) != nx or set(r) - {"0", "1"} for r in rows):
        raise MeshError(f"{path}: expected {ny} rows of {nx} characters from {{0,1}}")
    mask = np.array([[c == "1" for c in r] for r in rows], dtype=bool)
    center = ((nx - 1) / 2 * h, (ny - 1) / 2 * h)
    return mesh_from_mask(mask, h, center, "custom-mask")


def write_mask_file(path, mask: np.ndarray, h: float) -> None:
    mask = np.asarray(mask, dtype=bool)
    ny, nx = mask.shape
    body = "\n".join("".join("1" if c else "0" for c in row) for row in mask)
    Path(path).write_text(f"{nx} {ny} {h!r}\n{body}\n")


@dataclass(frozen=True, eq=False)
class EllipticOperator:
    """Matrix of ``(u, v)_a = integral(grad u . grad v + a u v)`` on a mesh.

    ``matrix = stiffness + diag(h**2 * a)`` where ``stiffness`` is the
    5-point stencil with 4 on the diagonal and -1 to interior neighbours.
    """

    mesh: Mesh
    matrix: sp.csr_matrix
    stiffness: sp.csr_matrix
    a_values: np.ndarray
    weights: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def h2(self) -> float:
        return self.mesh.h**2

    def factor(self):
        lu = self._cache.get("lu")
        if lu is None:
            lu = spla.splu(self.matrix.tocsc(), permc_spec="COLAMD")
            self._cache["lu"] = lu
        return lu

    def laplacian(self) -> "EllipticOperator":
        """The same mesh with ``a = 0`` (shares this operator when ``a`` vanishes)."""
        if not np.any(self.a_values):
            return self
        lap = self._cache.get("laplacian")
        if lap is None:
            lap = assemble_operator(self.mesh, 0.0)
            self._cache["laplacian"] = lap
        return lap

    @property
    def solve_count(self) -> int:
        return self._cache.get("solves", 0)


def _stencil(mesh: Mesh) -> sp.csr_matrix:
    n = mesh.n_interior
    idx = mesh.index
    rows = [np.arange(n)]
    cols = [np.arange(n)]
    vals = [np.full(n, 4.0)]
    ci, ri = mesh.node_ij[:, 0], mesh.node_ij[:, 1]
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        cj, rj = ci + di, ri + dj
        inside = (cj >= 0) & (cj < mesh.nx) & (rj >= 0) & (rj < mesh.ny)
        nb = np.full(n, -1, dtype=np.int64)
        nb[inside] = idx[rj[inside], cj[inside]]
        keep = nb >= 0
        rows.append(np.arange(n)[keep])
        cols.append(nb[keep])
        vals.append(np.full(keep.sum(), -1.0))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def assemble_operator(mesh: Mesh, a_field: Union[float, np.ndarray, Callable] = 0.0) -> EllipticOperator:
    """Assemble ``A = stiffness + h^2 diag(a)`` and the load weights ``W = h^2``.

    ``a_field`` is a constant, an array of nodal values, or a callable taking
    the ``(N, 2)`` node coordinates.
    """
    n = mesh.n_interior
    if callable(a_field):
        a = np.asarray(a_field(mesh.node_coords), dtype=float)
    else:
        a = np.asarray(a_field, dtype=float)
    a = np.broadcast_to(a, (n,)).astype(float)
    if not np.all(np.isfinite(a)):
        raise MeshError("coefficient a(x) is not finite")
    if np.any(a < 0):
        raise MeshError(f"coefficient a(x) must be nonnegative (min {a.min():.3g})")
    stiff = _stencil(mesh)
    h2 = mesh.h**2
    matrix = (stiff + sp.diags(h2 * a)).tocsr()
    return EllipticOperator(
        mesh=mesh,
        matrix=matrix,
        stiffness=stiff,
        a_values=a,
        weights=np.full(n, h2),
    )


def _pcg(op: EllipticOperator, b: np.ndarray, rel_tol: float) -> np.ndarray:
    n = op.mesh.n_interior
    maxiter = int(20 * math.sqrt(n)) + 1000
    inv_diag = 1.0 / op.matrix.diagonal()
    M = spla.LinearOperator((n, n), matvec=lambda x: inv_diag * x)
    try:
        x, info = spla.cg(op.matrix, b, rtol=rel_tol, atol=0.0, maxiter=maxiter, M=M)
    except TypeError:  # older scipy spells it tol
        x, info = spla.cg(op.matrix, b, tol=rel_tol, atol=0.0, maxiter=maxiter, M=M)
    if info != 0:
        raise LinearSolveError(f"PCG did not converge within {maxiter} iterations")
    return x


def solve_linear(
    op: EllipticOperator, rhs: np.ndarray, rel_tol: float = 1e-10, method: str = "direct"
) -> np.ndarray:
    """Solve ``A x = rhs`` with ``||A x - rhs||_2 <= rel_tol * ||rhs||_2``.

    ``rhs`` is taken as given; callers apply the quadrature weight.  The
    default method reuses a sparse LU factorization cached on ``op`` and
    adds iterative refinement if the residual target is missed.
    """
    if not (0.0 < rel_tol <= 1e-6):
        raise ValueError(f"rel_tol must lie in (0, 1e-6], got {rel_tol}")
    b = op.mesh.check(rhs)
    op._cache["solves"] = op._cache.get("solves", 0) + 1
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    if method == "pcg":
        x = _pcg(op, b, rel_tol)
    elif method == "direct":
        lu = op.factor()
        x = lu.solve(b)
        for _ in range(3):
            r = b - op.matrix @ x
            if np.linalg.norm(r) <= rel_tol * bnorm:
                break
            x = x + lu.solve(r)
    else:
        raise ValueError(f"unknown linear solver {method!r}")
    res = np.linalg.norm(op.matrix @ x - b)
    if not res <= rel_tol * bnorm:
        raise LinearSolveError(f"linear solve residual {res:.3e} exceeds {rel_tol:.1e} * {bnorm:.3e}")
    return x


def inner_a(op: EllipticOperator, u: np.ndarray, v: np.ndarray) -> float:
    u = op.mesh.check(u)
    v = op.mesh.check(v)
    return float(u @ (op.matrix @ v))


def norm_a(op: EllipticOperator, u: np.ndarray) -> float:
    return math.sqrt(max(inner_a(op, u, u), 0.0))


def quadrature(mesh: Mesh, node_values: np.ndarray) -> float:
    """Discrete integral ``sum_i h^2 * value_i`` over the interior nodes."""
    return float(mesh.h**2 * np.sum(mesh.check(node_values)))


# -- solution field files ---------------------------------------------------


def write_field(path, mesh: Mesh, values: np.ndarray, extra: dict | None = None) -> None:
    """Write one JSON header line then the interior values as little-endian float64."""
    values = mesh.check(values)
    header = {
        "mesh": mesh.mesh_id,
        "nx": mesh.nx,
        "ny": mesh.ny,
        "h": mesh.h,
        "domain_kind": mesh.domain_kind,
        "n": int(values.size),
    }
    if extra:
        header.update(extra)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(values.astype("<f8").tobytes())
    tmp.replace(path)


def read_field(path, mesh: Mesh | None = None) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        values = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    if "n" in header and values.size != header["n"]:
        raise MeshError(f"{path}: header announces {header['n']} values, found {values.size}")
    if mesh is not None:
        if header.get("mesh") != mesh.mesh_id:
            raise MeshError(f"{path}: field belongs to mesh {header.get('mesh')}, not {mesh.mesh_id}")
        mesh.check(values)
    return header, values
