"""P1 finite elements for -div((r𝕀 + ℂ)∇p) = S with homogeneous Neumann data.

Pressures are gauged to zero mass-weighted mean. The module also evaluates
the semi-discrete energy, checks the two identities tying the FEM solve for the
lifted conductivity field to the rescaled network model, and runs mesh-refinement
studies of the energy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    IndefinitePermeabilityError,
    InsufficientDataError,
    ParameterError,
    PreconditionError,
)
from .linalg import solve_singular_spd
from .mesh import DiamondMap, TriMesh, build_structured_triangulation
from .network import GAUSS3, NetworkGraph, discrete_energy, project_source
from .tensorfield import CellTensorField, MetabolicLaw, eigvals, frobenius, lift_Qh

logger = logging.getLogger(__name__)

IDENTITY = np.array([1.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class StiffnessSystem:
    mesh: TriMesh
    matrix: sp.csr_matrix
    permeability: np.ndarray
    load: np.ndarray | None = None

    @property
    def weights(self) -> np.ndarray:
        """Gauge weights ∫φ_i of the zero-mean constraint."""
        return self.mesh.lumped_mass


@dataclass(frozen=True, eq=False)
class PressureField:
    mesh: TriMesh
    values: np.ndarray
    gradients: np.ndarray
    load: np.ndarray

    def mean(self) -> float:
        m = self.mesh.lumped_mass
        return float(np.dot(m, self.values) / m.sum())


@dataclass(frozen=True)
class EnergyReport:
    pumping: float
    pumping_source: float
    metabolic: float

    @property
    def total(self) -> float:
        return self.pumping + self.metabolic


def _gauss_points(mesh: TriMesh) -> np.ndarray:
    return np.einsum("qk,tkd->tqd", GAUSS3, mesh.vertices[mesh.triangles])


def cell_tensors(mesh: TriMesh, perm) -> np.ndarray:
    """(n_t, 3) cell tensors from a field, an array or a callable perm(x, y)."""
    if perm is None:
        return np.zeros((mesh.n_triangles, 3))
    if isinstance(perm, CellTensorField):
        if perm.mesh is not mesh and perm.mesh.n_triangles != mesh.n_triangles:
            raise PreconditionError("permeability field belongs to another mesh")
        return perm.values
    if callable(perm):
        pts = _gauss_points(mesh)
        values = np.asarray(perm(pts[..., 0], pts[..., 1]), dtype=float)
        return np.broadcast_to(values, pts.shape[:2] + (3,)).mean(axis=1)
    values = np.asarray(perm, dtype=float)
    if values.shape == (3,):
        return np.tile(values, (mesh.n_triangles, 1))
    if values.shape != (mesh.n_triangles, 3):
        raise PreconditionError("permeability must provide one tensor per triangle")
    return values


def cell_scalars(mesh: TriMesh, r) -> np.ndarray:
    """Background permeability per cell; callables are evaluated at centroids."""
    if callable(r):
        values = np.asarray(r(mesh.centroids[:, 0], mesh.centroids[:, 1]), dtype=float)
    else:
        values = np.asarray(r, dtype=float)
    values = np.broadcast_to(values, (mesh.n_triangles,)).astype(float)
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise ParameterError("r must be finite and nonnegative")
    return values


def as_load(mesh: TriMesh, S) -> np.ndarray:
    if S is None or callable(S):
        return project_source(mesh, S)
    load = np.asarray(S, dtype=float)
    if load.shape != (mesh.n_vertices,):
        raise PreconditionError("load vector must have one entry per vertex")
    if abs(load.sum()) > 1e-12 * max(np.abs(load).sum(), np.finfo(float).tiny):
        raise PreconditionError("load vector is not balanced")
    return load


def assemble(mesh: TriMesh, perm, r, load=None) -> StiffnessSystem:
    """K_uv = Σ_T area(T) ∇φ_u·(r𝕀 + ℂ_T)∇φ_v."""
    total = cell_scalars(mesh, r)[:, None] * IDENTITY + cell_tensors(mesh, perm)
    lam = eigvals(total)
    negative = lam[:, 1] < -1e-12 * np.maximum(1.0, np.abs(lam[:, 0]))
    if negative.any():
        triangle = int(np.flatnonzero(negative)[0])
        raise IndefinitePermeabilityError(
            f"total permeability is indefinite on triangle {triangle}", triangle
        )
    P = np.empty((mesh.n_triangles, 2, 2))
    P[:, 0, 0], P[:, 0, 1], P[:, 1, 0], P[:, 1, 1] = (
        total[:, 0],
        total[:, 1],
        total[:, 1],
        total[:, 2],
    )
    G = mesh.hat_gradients
    local = mesh.areas[:, None, None] * np.einsum("tkd,tde,tle->tkl", G, P, G)
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    K = sp.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(mesh.n_vertices, mesh.n_vertices)
    ).tocsr()
    K.sum_duplicates()
    return StiffnessSystem(mesh=mesh, matrix=K, permeability=total, load=load)


def pressure_gradients(mesh: TriMesh, values: np.ndarray) -> np.ndarray:
    return np.einsum("tk,tkd->td", values[mesh.triangles], mesh.hat_gradients)


def solve_poisson(mesh: TriMesh, perm, r, S) -> PressureField:
    """Galerkin solution of the Neumann problem in the zero-mean gauge.

    With r = 0 the permeability must be uniformly positive definite. The load
    vector S_i = ∫ S φ_i is returned on the pressure field.
    """
    load = as_load(mesh, S)
    system = assemble(mesh, perm, r, load)
    if np.any(cell_scalars(mesh, r) <= 0):
        min_lambda = float(eigvals(system.permeability)[:, 1].min())
        if min_lambda <= 0:
            raise PreconditionError(
                "r = 0 requires a uniformly positive definite permeability "
                f"(smallest cell eigenvalue {min_lambda:.3g})"
            )
    values = solve_singular_spd(system.matrix, load, mesh.lumped_mass, direct="pin", label="poisson")
    return PressureField(mesh, values, pressure_gradients(mesh, values), load)


def _metabolic_integral(mesh: TriMesh, perm, law: MetabolicLaw) -> float:
    if callable(perm) and not isinstance(perm, CellTensorField):
        pts = _gauss_points(mesh)
        values = np.broadcast_to(
            np.asarray(perm(pts[..., 0], pts[..., 1]), dtype=float), pts.shape[:2] + (3,)
        )
        return float(np.sum(mesh.areas[:, None] / 3.0 * law.M(frobenius(values))))
    return float(np.dot(mesh.areas, law.M(frobenius(cell_tensors(mesh, perm)))))


def semi_discrete_energy(
    mesh: TriMesh,
    perm,
    r,
    S,
    law: MetabolicLaw,
    *,
    pressure: PressureField | None = None,
) -> EnergyReport:
    """∫ ∇p^h·(r𝕀 + ℂ)∇p^h + M(|ℂ|), with the pumping term also as ∫ S p^h."""
    if pressure is None:
        pressure = solve_poisson(mesh, perm, r, S)
    total = cell_scalars(mesh, r)[:, None] * IDENTITY + cell_tensors(mesh, perm)
    g = pressure.gradients
    quad = total[:, 0] * g[:, 0] ** 2 + 2.0 * total[:, 1] * g[:, 0] * g[:, 1] + total[:, 2] * g[:, 1] ** 2
    return EnergyReport(
        pumping=float(np.dot(mesh.areas, quad)),
        pumping_source=float(np.dot(pressure.load, pressure.values)),
        metabolic=_metabolic_integral(mesh, perm, law),
    )


@dataclass(frozen=True)
class Prop1Report:
    residual: np.ndarray
    source: np.ndarray
    max_relative: float


@dataclass(frozen=True)
class Prop2Report:
    discrete: float
    semi_discrete: float
    gap: float


def _require_positive(C) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if not np.all(C > 0):
        raise PreconditionError("all conductivities must be strictly positive")
    return C


def primary_tensors(mesh: TriMesh, lifted: CellTensorField) -> np.ndarray:
    """Area-weighted mean of the three half-diamond pieces of each primary triangle.

    Pieces of triangle t are cells 3t..3t+2 and each covers a third of it. P1
    gradients are constant on t, so the stiffness of the result on `mesh`
    equals that of the lift on the half-diamond mesh.
    """
    if lifted.mesh.n_triangles != 3 * mesh.n_triangles:
        raise PreconditionError("lifted field does not belong to the half-diamond mesh of this mesh")
    return lifted.values.reshape(mesh.n_triangles, 3, 3).mean(axis=1)


def _lifted_pressure(mesh: TriMesh, diamonds: DiamondMap, C, S):
    lifted = lift_Qh(mesh, diamonds, C)
    return lifted, solve_poisson(mesh, primary_tensors(mesh, lifted), 0.0, S)


def verify_prop1(mesh: TriMesh, diamonds: DiamondMap, C, S) -> Prop1Report:
    """Rescaled Kirchhoff residual of the FEM vertex pressures for perm = Q^h[𝒞].

    The source is S_i = project_source(mesh, S), the load of the FEM solve.
    """
    C = _require_positive(C)
    _, pressure = _lifted_pressure(mesh, diamonds, C, S)
    graph = NetworkGraph.from_mesh(mesh, diamonds)
    source = pressure.load
    residual = graph.laplacian(C, rescaled=True) @ pressure.values - source
    scale = np.linalg.norm(source)
    worst = float(np.max(np.abs(residual)) / scale) if scale > 0 else float(np.max(np.abs(residual)))
    logger.info("Kirchhoff identity checked", extra={"max_relative": worst, "edges": mesh.n_edges})
    return Prop1Report(residual=residual, source=source, max_relative=worst)


def verify_prop2(mesh: TriMesh, diamonds: DiamondMap, C, S, law: MetabolicLaw) -> Prop2Report:
    """Rescaled discrete energy against the semi-discrete energy of Q^h[𝒞].

    The metabolic term is integrated over the rank-one pieces, where |Q^h| = 𝒞_ij.
    """
    C = _require_positive(C)
    lifted, pressure = _lifted_pressure(mesh, diamonds, C, S)
    graph = NetworkGraph.from_mesh(mesh, diamonds)
    discrete = discrete_energy(graph, C, pressure.values, law, rescaled=True)
    perm = primary_tensors(mesh, lifted)
    pumping = semi_discrete_energy(mesh, perm, 0.0, S, law, pressure=pressure).pumping
    semi = pumping + _metabolic_integral(diamonds.halves.mesh, lifted, law)
    scale = max(abs(semi), abs(discrete))
    gap = abs(discrete - semi) / scale if scale > 0 else 0.0
    logger.info(
        "Energy identity checked",
        extra={"discrete": discrete, "semi_discrete": semi, "gap": gap},
    )
    return Prop2Report(discrete=discrete, semi_discrete=semi, gap=gap)


@dataclass(frozen=True)
class ConvergenceTable:
    h: np.ndarray
    energies: np.ndarray
    gaps: np.ndarray
    order_running: np.ndarray
    order: float
    r_squared: float
    reference: float


def _level_energy(n, rect, perm, r, S, law) -> tuple[float, float]:
    nx, ny = (n, n) if np.isscalar(n) else n
    mesh = build_structured_triangulation(nx, ny, rect)
    return mesh.h, semi_discrete_energy(mesh, perm, r, S, law).total


def convergence_study(
    resolutions: Sequence,
    rect=(0.0, 0.0, 1.0, 1.0),
    perm=None,
    r=1.0,
    S: Callable | None = None,
    law: MetabolicLaw | None = None,
    *,
    reference_energy: float | None = None,
) -> ConvergenceTable:
    """Energy gap |𝓔 - 𝓔^h| per level and its least-squares order in h.

    Without `reference_energy` the reference is computed on a mesh four times
    finer than the finest level.
    """
    if len(resolutions) < 3:
        raise InsufficientDataError("a convergence study needs at least 3 levels")
    law = law or MetabolicLaw(2.0)
    results = [_level_energy(n, rect, perm, r, S, law) for n in resolutions]
    h = np.array([hh for hh, _ in results])
    energies = np.array([e for _, e in results])
    if reference_energy is None:
        finest = resolutions[-1]
        finer = 4 * finest if np.isscalar(finest) else (4 * finest[0], 4 * finest[1])
        _, reference_energy = _level_energy(finer, rect, perm, r, S, law)
    gaps = np.abs(reference_energy - energies)

    floor = 1e-13 * max(abs(reference_energy), 1.0)
    running = np.full(len(h), np.nan)
    order = r_squared = math.nan
    if np.all(gaps > floor):
        running[1:] = np.log(gaps[:-1] / gaps[1:]) / np.log(h[:-1] / h[1:])
        x, y = np.log(h), np.log(gaps)
        order, intercept = np.polyfit(x, y, 1)
        fitted = order * x + intercept
        ss_res = float(np.sum((y - fitted) ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    else:
        logger.info("Energy gap vanishes on some level; no order fitted", extra={"gaps": gaps.tolist()})
    logger.info(
        "Convergence study finished",
        extra={"levels": len(h), "order": order, "r_squared": r_squared},
    )
    return ConvergenceTable(
        h=h,
        energies=energies,
        gaps=gaps,
        order_running=running,
        order=float(order),
        r_squared=float(r_squared),
        reference=float(reference_energy),
    )
