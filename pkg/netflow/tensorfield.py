"""Symmetric 2×2 tensor fields.

A tensor [[a, b], [b, c]] is stored as the triple (a, b, c); fields are numpy
arrays of shape (n, 3). Functions here accept a single `SymTensor2` or a stacked
array and return the same kind.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import meshio
import numpy as np

from .errors import ParameterError, PreconditionError
from .mesh import DiamondMap, TriMesh

logger = logging.getLogger(__name__)

# Weights of (a, b, c) in the Frobenius inner product.
FROBENIUS_WEIGHTS = np.array([1.0, 2.0, 1.0])


@dataclass(frozen=True)
class SymTensor2:
    a: float
    b: float
    c: float

    @classmethod
    def from_matrix(cls, m) -> SymTensor2:
        m = np.asarray(m, dtype=float)
        return cls(float(m[0, 0]), float(0.5 * (m[0, 1] + m[1, 0])), float(m[1, 1]))

    @classmethod
    def from_array(cls, v) -> SymTensor2:
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.b, self.c]])


def _unwrap(T):
    if isinstance(T, SymTensor2):
        return T.as_array(), True
    return np.asarray(T, dtype=float), False


def frobenius(T):
    """|T| = sqrt(a² + 2b² + c²)."""
    v, single = _unwrap(T)
    norm = np.sqrt(v[..., 0] ** 2 + 2.0 * v[..., 1] ** 2 + v[..., 2] ** 2)
    return float(norm) if single else norm


def eigvals(T):
    """Eigenvalues (λ₁ ≥ λ₂) in closed form, shape (..., 2)."""
    v, _ = _unwrap(T)
    mean = 0.5 * (v[..., 0] + v[..., 2])
    radius = np.hypot(0.5 * (v[..., 0] - v[..., 2]), v[..., 1])
    return np.stack([mean + radius, mean - radius], axis=-1)


def eig(T):
    """Spectral decomposition: eigenvalues (λ₁ ≥ λ₂) and eigenvectors as columns."""
    v, _ = _unwrap(T)
    lam = eigvals(v)
    theta = 0.5 * np.arctan2(2.0 * v[..., 1], v[..., 0] - v[..., 2])
    cos, sin = np.cos(theta), np.sin(theta)
    vectors = np.stack(
        [np.stack([cos, sin], axis=-1), np.stack([-sin, cos], axis=-1)], axis=-1
    )
    return lam, vectors


def outer(g) -> np.ndarray:
    """g ⊗ g for vectors of shape (..., 2)."""
    g = np.asarray(g, dtype=float)
    return np.stack([g[..., 0] ** 2, g[..., 0] * g[..., 1], g[..., 1] ** 2], axis=-1)


def to_matrices(values) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return np.stack(
        [
            np.stack([values[..., 0], values[..., 1]], axis=-1),
            np.stack([values[..., 1], values[..., 2]], axis=-1),
        ],
        axis=-2,
    )


@dataclass(frozen=True)
class MetabolicLaw:
    """Power law M(s) = s^γ/γ with floor ε₀ for |ℂ| in denominators."""

    gamma: float
    eps0: float = 1e-12

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma <= 0:
            raise ParameterError("gamma must be positive")
        if self.eps0 < 0:
            raise ParameterError("eps0 must be nonnegative")

    def M(self, s):
        return np.power(s, self.gamma) / self.gamma

    def dM(self, s):
        with np.errstate(divide="ignore"):
            return np.power(np.asarray(s, dtype=float), self.gamma - 1.0)

    def d2M(self, s):
        if self.gamma == 1.0:
            return np.zeros_like(np.asarray(s, dtype=float))
        with np.errstate(divide="ignore"):
            return (self.gamma - 1.0) * np.power(np.asarray(s, dtype=float), self.gamma - 2.0)

    def m(self, s):
        """M'(s)/s."""
        with np.errstate(divide="ignore"):
            return np.power(np.asarray(s, dtype=float), self.gamma - 2.0)


def metabolic_force(T, law: MetabolicLaw):
    """M'(|T|)/|T|·T evaluated as max(|T|, ε₀)^{γ-2}·T.

    Returns (force, frozen). `frozen` marks tensors with |T| ≤ ε₀ under γ < 1,
    whose force is undefined; they are returned as zero and left to the caller
    to hold at zero.
    """
    v, single = _unwrap(T)
    norm = np.atleast_1d(frobenius(v))
    floor = np.maximum(norm, law.eps0)
    scale = np.where(norm > 0.0, law.m(floor), 0.0)
    frozen = (norm <= law.eps0) if law.gamma < 1.0 else np.zeros_like(norm, dtype=bool)
    scale = np.where(frozen, 0.0, scale)
    force = scale.reshape(np.shape(v)[:-1] + (1,)) * v
    if single:
        return SymTensor2.from_array(force.reshape(3)), bool(frozen[0])
    return force, frozen.reshape(np.shape(v)[:-1])


@dataclass(frozen=True, eq=False)
class CellTensorField:
    """One tensor per triangle."""

    mesh: TriMesh
    values: np.ndarray

    def __post_init__(self):
        if np.shape(self.values) != (self.mesh.n_triangles, 3):
            raise PreconditionError("cell tensor field must have one tensor per triangle")

    def __getitem__(self, index) -> SymTensor2:
        return SymTensor2.from_array(self.values[index])

    def frobenius(self) -> np.ndarray:
        return frobenius(self.values)

    def eigvals(self) -> np.ndarray:
        return eigvals(self.values)

    def min_eigenvalue(self) -> float:
        return float(self.eigvals()[:, 1].min())


@dataclass(frozen=True, eq=False)
class NodalTensorField:
    """One tensor per vertex, optionally with a zero Dirichlet trace."""

    mesh: TriMesh
    values: np.ndarray
    dirichlet: bool = False

    def __post_init__(self):
        if np.shape(self.values) != (self.mesh.n_vertices, 3):
            raise PreconditionError("nodal tensor field must have one tensor per vertex")
        if self.dirichlet and np.any(self.values[self.mesh.boundary_vertex] != 0.0):
            raise PreconditionError("boundary tensors must vanish under the Dirichlet trace")

    def to_cells(self) -> CellTensorField:
        """Cell tensor = average of the three vertex tensors."""
        return CellTensorField(self.mesh, self.values[self.mesh.triangles].mean(axis=1))

    def frobenius(self) -> np.ndarray:
        return frobenius(self.values)

    def min_eigenvalue(self) -> float:
        return float(eigvals(self.values)[:, 1].min())


def lift_Qh(mesh: TriMesh, diamonds: DiamondMap, C) -> CellTensorField:
    """Lift edge conductivities to the rank-one field 𝒞_ij e⊗e on the half-diamond mesh."""
    C = np.asarray(C, dtype=float)
    if C.shape != (mesh.n_edges,):
        raise PreconditionError("one conductivity per edge is required")
    if np.any(C < 0):
        raise PreconditionError(f"conductivity of edge {int(np.argmin(C))} is negative")
    per_edge = C[:, None] * outer(diamonds.directions)
    halves = diamonds.halves
    return CellTensorField(halves.mesh, per_edge[halves.cell_edge])


def tensor_arrays(name: str, values) -> dict[str, np.ndarray]:
    """(a, b, c) plus derived λ₁, λ₂ and |ℂ| arrays for a snapshot."""
    values = np.asarray(values, dtype=float)
    lam = eigvals(values)
    return {
        name: values,
        f"{name}_lambda1": lam[:, 0],
        f"{name}_lambda2": lam[:, 1],
        f"{name}_norm": frobenius(values),
    }


def write_vtk(
    path: str | Path,
    mesh: TriMesh,
    *,
    point_data: dict[str, np.ndarray] | None = None,
    cell_data: dict[str, np.ndarray] | None = None,
) -> Path:
    """Write a legacy-VTK ASCII unstructured grid."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    points = np.column_stack([mesh.vertices, np.zeros(mesh.n_vertices)])
    grid = meshio.Mesh(
        points=points,
        cells=[("triangle", mesh.triangles.astype(np.int32))],
        point_data={k: np.asarray(v) for k, v in (point_data or {}).items()},
        cell_data={k: [np.asarray(v)] for k, v in (cell_data or {}).items()},
    )
    meshio.write(path, grid, file_format="vtk", binary=False)
    logger.debug("Wrote VTK snapshot", extra={"path": str(path)})
    return path
