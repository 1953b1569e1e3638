"""P1 finite elements for div(a grad u) = 0 on the unit disk.

The Dirichlet-to-Neumann map is assembled weakly: for boundary data f, g,

    <Lambda_a f, g> = int a grad u . grad v,

where u solves the Dirichlet problem with trace f and v is any P1 field with
trace g (we take the boundary interpolant extended by zero).  Eliminating the
interior unknowns gives the Schur complement of the stiffness matrix on the
boundary nodes, and every DtN quantity below is a quadratic form in it.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import Delaunay

from .hilbert import (
    BoundaryFunction,
    BoundaryFunctional,
    mode_labels,
    multiplier_weights,
    n_modes,
    trig_design,
)

log = logging.getLogger(__name__)

MAX_VERTICES = 400_000


class AssemblyError(RuntimeError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message if residual is None else f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    angles: np.ndarray
    h: float

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_boundary(self) -> int:
        return self.boundary.size

    @property
    def interior(self) -> np.ndarray:
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self.boundary] = False
        return np.flatnonzero(mask)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def max_trig_order(self) -> int:
        return self.n_boundary // 4

    def to_json(self) -> dict:
        return {
            "h": self.h,
            "vertices": self.vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "boundary": self.boundary.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Mesh":
        v = np.asarray(obj["vertices"], dtype=float)
        b = np.asarray(obj["boundary"], dtype=np.int64)
        ang = np.mod(np.arctan2(v[b, 1], v[b, 0]), 2 * np.pi)
        return cls(v, np.asarray(obj["triangles"], dtype=np.int64), b, ang, float(obj["h"]))


def boundary_count(h: float) -> int:
    """Number of boundary vertices: the smallest power of two >= 2 pi / h.

    A power of two makes the count double exactly when h halves.
    """
    return int(2 ** np.ceil(np.log2(2 * np.pi / h)))


def generate_mesh(h: float) -> Mesh:
    """Ring-based Delaunay triangulation of the unit disk.

    Rings are equally spaced in radius with an even count, so the circle
    r = 1/2 is always a ring of vertices.
    """
    if not 0 < h < 1:
        raise ValueError(f"mesh size must lie in (0, 1), got {h}")
    nb = boundary_count(h)
    h_eff = 2 * np.pi / nb
    n_rings = 2 * int(np.ceil(1.0 / (2 * h_eff)))
    est = int(np.pi * n_rings**2 / 2 + nb)
    if est > MAX_VERTICES:
        raise MemoryError(f"mesh size h={h} needs ~{est} vertices (limit {MAX_VERTICES})")

    pts = [np.zeros((1, 2))]
    for i in range(1, n_rings):
        r = i / n_rings
        n = max(6, int(round(2 * np.pi * r / h_eff)))
        t = 2 * np.pi * (np.arange(n) + 0.5 * (i % 2)) / n
        pts.append(np.column_stack([r * np.cos(t), r * np.sin(t)]))
    t_b = 2 * np.pi * np.arange(nb) / nb
    pts.append(np.column_stack([np.cos(t_b), np.sin(t_b)]))
    vertices = np.vstack(pts)

    tri = Delaunay(vertices).simplices.astype(np.int64)
    p = vertices[tri]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    flip = area < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    tri = tri[np.abs(area) > 1e-14 * h_eff**2]

    boundary = np.arange(vertices.shape[0] - nb, vertices.shape[0], dtype=np.int64)
    return Mesh(vertices, tri, boundary, t_b, float(h))


def _gradients(mesh: Mesh):
    """Per-triangle P1 basis gradients (T, 3, 2) and areas (T,)."""
    p = mesh.vertices[mesh.triangles]
    x, y = p[..., 0], p[..., 1]
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    grads = np.stack([b, c], axis=-1) / (2 * area)[:, None, None]
    return grads, area


def stiffness_matrix(mesh: Mesh, element_values: np.ndarray) -> sp.csr_matrix:
    grads, area = _gradients(mesh)
    local = np.einsum("tid,tjd->tij", grads, grads) * (area * element_values)[:, None, None]
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    _, area = _gradients(mesh)
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = area[:, None, None] * ref[None]
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


@dataclass(frozen=True, eq=False)
class ConductivityField:
    """Nodal conductivity with optional exact per-triangle values.

    ``element_values`` defaults to the centroid average of the nodal values;
    fields built with :meth:`from_function` instead sample the function at the
    centroids so sharp interfaces are not smeared across a layer of elements.
    """

    nodal_values: np.ndarray
    bounds: tuple
    kl_coeffs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    element_values: Optional[np.ndarray] = None

    def __post_init__(self):
        lo, hi = self.bounds
        if not 0 < lo <= hi:
            raise ValueError(f"invalid conductivity bounds {self.bounds}")
        for v in (self.nodal_values, self.element_values):
            if v is None:
                continue
            if not np.all(np.isfinite(v)) or v.min() < lo * (1 - 1e-12) or v.max() > hi * (1 + 1e-12):
                raise ValueError(f"conductivity outside bounds [{lo}, {hi}]")

    @classmethod
    def constant(cls, mesh: Mesh, value: float) -> "ConductivityField":
        return cls(np.full(mesh.n_vertices, float(value)), (float(value), float(value)))

    @classmethod
    def from_function(cls, mesh: Mesh, fn: Callable, bounds=None) -> "ConductivityField":
        nodal = np.asarray(fn(mesh.vertices[:, 0], mesh.vertices[:, 1]), dtype=float) * np.ones(mesh.n_vertices)
        c = mesh.centroids()
        elem = np.asarray(fn(c[:, 0], c[:, 1]), dtype=float) * np.ones(c.shape[0])
        if bounds is None:
            bounds = (float(min(nodal.min(), elem.min())), float(max(nodal.max(), elem.max())))
        return cls(nodal, bounds, element_values=elem)

    def on_elements(self, mesh: Mesh) -> np.ndarray:
        if self.element_values is not None:
            return self.element_values
        return self.nodal_values[mesh.triangles].mean(axis=1)

    @property
    def a_hi(self) -> float:
        return float(self.bounds[1])


class DtNOperator:
    """Discrete DtN map for one (mesh, conductivity) pair.

    Assembles the stiffness matrix once and keeps a single sparse LU
    factorization of its interior block for all Dirichlet solves.
    """

    def __init__(self, mesh: Mesh, a: ConductivityField, method: str = "direct"):
        elem = a.on_elements(mesh)
        if elem.shape[0] != mesh.triangles.shape[0]:
            raise AssemblyError("conductivity does not match the mesh")
        if np.any(elem <= 0) or not np.all(np.isfinite(elem)):
            raise AssemblyError("conductivity must be positive and finite on every element")
        self.mesh, self.a = mesh, a
        self.K_full = stiffness_matrix(mesh, elem)
        self._interior = mesh.interior
        self._bnd = mesh.boundary
        self._K_II = self.K_full[self._interior][:, self._interior].tocsc()
        self._K_IB = self.K_full[self._interior][:, self._bnd].tocsc()
        self.method = method
        self._lu = None
        if method == "direct":
            try:
                self._lu = spla.splu(self._K_II)
            except (RuntimeError, MemoryError) as exc:
                log.warning("direct factorization failed (%s); falling back to CG", exc)
                self.method = "cg"
        elif method != "cg":
            raise ValueError(f"unknown solver method {method!r}")

    def _solve_interior(self, rhs: np.ndarray) -> np.ndarray:
        if self.method == "direct":
            x = self._lu.solve(rhs)
        else:
            cols = rhs.reshape(rhs.shape[0], -1)
            x = np.empty_like(cols)
            for j in range(cols.shape[1]):
                x[:, j], info = spla.cg(self._K_II, cols[:, j], rtol=1e-12, atol=0.0, maxiter=20 * rhs.shape[0])
                if info != 0:
                    res = np.linalg.norm(self._K_II @ x[:, j] - cols[:, j]) / max(np.linalg.norm(cols[:, j]), 1e-300)
                    raise SolverError("conjugate gradient did not converge", res)
            x = x.reshape(rhs.shape)
        res = np.linalg.norm(self._K_II @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
        if res > 1e-10:
            raise SolverError("interior solve inaccurate", res)
        return x

    def _check_K(self, K: int):
        if K > self.mesh.max_trig_order():
            raise ValueError(f"truncation K={K} exceeds boundary resolution limit {self.mesh.max_trig_order()}")

    def boundary_values(self, f: BoundaryFunction) -> np.ndarray:
        self._check_K(f.K)
        return trig_design(self.mesh.angles, f.K) @ f.coeffs

    def solve_nodal_boundary(self, gB: np.ndarray) -> np.ndarray:
        u = np.empty((self.mesh.n_vertices,) + gB.shape[1:])
        u[self._bnd] = gB
        u[self._interior] = self._solve_interior(-(self._K_IB @ gB))
        return u

    def solve(self, f: BoundaryFunction) -> np.ndarray:
        return self.solve_nodal_boundary(self.boundary_values(f))

    def boundary_flux(self, gB: np.ndarray) -> np.ndarray:
        """Discrete weak flux (K u)_B for Dirichlet nodal data gB (Schur complement action)."""
        u = self.solve_nodal_boundary(gB)
        return (self.K_full @ u)[self._bnd]

    def pairing(self, f: BoundaryFunction, g: BoundaryFunction) -> float:
        return float(self.boundary_values(g) @ self.boundary_flux(self.boundary_values(f)))

    def apply(self, f: BoundaryFunction) -> BoundaryFunctional:
        flux = self.boundary_flux(self.boundary_values(f))
        return BoundaryFunctional(trig_design(self.mesh.angles, f.K).T @ flux)

    def matrix(self, K: int, basis_kind: str = "raw") -> "DtNMatrix":
        self._check_K(K)
        T = trig_design(self.mesh.angles, K)
        entries = T.T @ self.boundary_flux(T)
        return DtNMatrix(entries, "raw", K).to_basis(basis_kind)


@dataclass(frozen=True, eq=False)
class DtNMatrix:
    """Entries <Lambda_a b_j, b_i> over the truncated trig family.

    ``basis_kind`` is ``raw`` for the unnormalized trig functions or
    ``orthonormal`` for the H^{1/2}-orthonormal family.
    """

    entries: np.ndarray
    basis_kind: str
    K: int

    def __post_init__(self):
        if self.basis_kind not in ("raw", "orthonormal"):
            raise ValueError(f"unknown basis kind {self.basis_kind!r}")
        if self.entries.shape != (n_modes(self.K),) * 2:
            raise ValueError("entries shape does not match truncation")

    def to_basis(self, kind: str) -> "DtNMatrix":
        if kind == self.basis_kind:
            return self
        s = 1.0 / np.sqrt(multiplier_weights(self.K))
        if kind == "orthonormal":
            return DtNMatrix(self.entries * np.outer(s, s), kind, self.K)
        if kind == "raw":
            return DtNMatrix(self.entries / np.outer(s, s), kind, self.K)
        raise ValueError(f"unknown basis kind {kind!r}")

    def truncate(self, K: int) -> "DtNMatrix":
        n = n_modes(K)
        return DtNMatrix(self.entries[:n, :n].copy(), self.basis_kind, K)

    def symmetry_error(self) -> float:
        M = self.entries
        d = np.abs(np.diag(M))
        return float(np.max(np.abs(M - M.T) / (1.0 + d[:, None] + d[None, :])))

    def to_csv(self) -> str:
        lines = [",".join(mode_labels(self.K))]
        for row in self.entries:
            lines.append(",".join(f"{v:.17g}" for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, basis_kind: str = "raw") -> "DtNMatrix":
        rows = text.strip().splitlines()
        K = (len(rows[0].split(",")) - 1) // 2
        entries = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
        return cls(entries, basis_kind, K)

    def to_json(self) -> dict:
        return {"K": self.K, "basis_kind": self.basis_kind, "modes": mode_labels(self.K),
                "entries": self.entries.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "DtNMatrix":
        return cls(np.asarray(obj["entries"], dtype=float), obj["basis_kind"], int(obj["K"]))


def solve_dirichlet(mesh: Mesh, a: ConductivityField, f: BoundaryFunction) -> np.ndarray:
    return DtNOperator(mesh, a).solve(f)


def dtn_pairing(mesh: Mesh, a: ConductivityField, f: BoundaryFunction, g: BoundaryFunction) -> float:
    return DtNOperator(mesh, a).pairing(f, g)


def dtn_apply(mesh: Mesh, a: ConductivityField, f: BoundaryFunction) -> BoundaryFunctional:
    return DtNOperator(mesh, a).apply(f)


def dtn_matrix(mesh: Mesh, a: ConductivityField, K: int, basis_kind: str = "raw") -> DtNMatrix:
    return DtNOperator(mesh, a).matrix(K, basis_kind)


def save_mesh(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        json.dump(mesh.to_json(), fh)


def annulus_dtn_eigenvalue(k: int, inner: float, outer: float, radius: float) -> float:
    """DtN eigenvalue on frequency k for a = inner (r < radius), outer (r > radius).

    Solves the interface conditions of u = A r^k inside and
    u = B r^k + C r^-k outside with u(1) = 1.
    """
    if k == 0:
        return 0.0
    rho = radius
    A = np.array([
        [0.0, 1.0, 1.0],
        [rho**k, -rho**k, -rho**-k],
        [inner * rho ** (k - 1), -outer * rho ** (k - 1), outer * rho ** (-k - 1)],
    ])
    _, B, C = np.linalg.solve(A, np.array([1.0, 0.0, 0.0]))
    return float(outer * k * (B - C))
