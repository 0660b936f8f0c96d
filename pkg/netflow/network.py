"""Discrete transport network: Kirchhoff law, energies and conductivity adaptation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
import scipy.sparse as sp

from .errors import (
    NonFiniteUpdateError,
    ParameterError,
    PreconditionError,
    SingularSystemError,
)
from .linalg import solve_singular_spd
from .mesh import DiamondMap, TriMesh, compute_diamonds
from .tensorfield import MetabolicLaw

logger = logging.getLogger(__name__)

# Barycentric coordinates of the symmetric 3-point Gauss rule on triangles.
GAUSS3 = np.array(
    [[2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0], [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0]]
)


@dataclass(frozen=True, eq=False)
class NetworkGraph:
    """Vertices, unoriented edges (i < j), lengths L_ij and diamond areas."""

    positions: np.ndarray
    edges: np.ndarray
    lengths: np.ndarray
    volumes: np.ndarray
    graph: nx.Graph = field(repr=False)

    @classmethod
    def from_edges(cls, positions, edges, lengths=None, volumes=None) -> NetworkGraph:
        positions = np.asarray(positions, dtype=float)
        edges = np.sort(np.asarray(edges, dtype=np.int64), axis=1)
        if lengths is None:
            d = positions[edges[:, 0]] - positions[edges[:, 1]]
            lengths = np.hypot(d[:, 0], d[:, 1])
        lengths = np.asarray(lengths, dtype=float)
        volumes = lengths.copy() if volumes is None else np.asarray(volumes, dtype=float)
        if np.any(lengths <= 0) or np.any(volumes <= 0):
            raise PreconditionError("edge lengths and diamond areas must be positive")
        graph = nx.Graph()
        graph.add_nodes_from(range(len(positions)))
        for k, (i, j) in enumerate(edges):
            if graph.has_edge(i, j):
                raise PreconditionError(f"edge ({i}, {j}) is listed twice")
            graph.add_edge(int(i), int(j), index=k, length=lengths[k], volume=volumes[k])
        return cls(positions, edges, lengths, volumes, graph)

    @classmethod
    def from_mesh(cls, mesh: TriMesh, diamonds: DiamondMap | None = None) -> NetworkGraph:
        diamonds = diamonds or compute_diamonds(mesh)
        return cls.from_edges(mesh.vertices, mesh.edges, diamonds.lengths, diamonds.volumes)

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, i: int) -> list[int]:
        """N(i)."""
        return sorted(self.graph.neighbors(i))

    def edge_weights(self, C, rescaled: bool = False) -> np.ndarray:
        C = np.asarray(C, dtype=float)
        if rescaled:
            return C * self.volumes / self.lengths**2
        return C / self.lengths

    def laplacian(self, C, rescaled: bool = False) -> sp.csr_matrix:
        weighted = nx.Graph()
        weighted.add_nodes_from(range(self.n_vertices))
        weighted.add_weighted_edges_from(
            (int(i), int(j), w) for (i, j), w in zip(self.edges, self.edge_weights(C, rescaled))
        )
        return sp.csr_matrix(
            nx.laplacian_matrix(weighted, nodelist=range(self.n_vertices), weight="weight")
        )


def _check_conductivity(graph: NetworkGraph, C) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if C.shape != (graph.n_edges,):
        raise PreconditionError("one conductivity per edge is required")
    if not np.all(np.isfinite(C)) or np.any(C < 0):
        raise PreconditionError("conductivities must be finite and nonnegative")
    return C


def _check_source(S, n: int) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.shape != (n,):
        raise PreconditionError("one source value per vertex is required")
    if abs(S.sum()) > 1e-12 * max(np.abs(S).sum(), np.finfo(float).tiny):
        raise PreconditionError("source is not balanced: sum of S_i must vanish")
    return S


def solve_kirchhoff(graph: NetworkGraph, C, S, rescaled: bool = False) -> np.ndarray:
    """Zero-mean pressures P with -Σ_j w_ij (P_j - P_i) = S_i.

    Components of the positive-conductivity subgraph that carry no source get
    P = 0; more than one component carrying sources is singular.
    """
    C = _check_conductivity(graph, C)
    S = _check_source(S, graph.n_vertices)
    P = np.zeros(graph.n_vertices)
    if not np.any(S):
        return P

    positive = nx.Graph()
    positive.add_nodes_from(range(graph.n_vertices))
    positive.add_edges_from(map(tuple, graph.edges[C > 0]))
    live = [sorted(c) for c in nx.connected_components(positive) if np.any(S[sorted(c)])]
    if len(live) > 1:
        component = min(live, key=len)
        logger.error(
            "Positive-conductivity subgraph is disconnected",
            extra={"components": len(live), "component": component[:10]},
        )
        raise SingularSystemError(
            f"sources lie in {len(live)} disconnected components; "
            f"one of them contains vertices {component[:10]}",
            component,
        )
    index = np.array(live[0])
    if abs(S[index].sum()) > 1e-12 * np.abs(S).sum():
        raise SingularSystemError("source is not balanced on its component", list(index))

    K = graph.laplacian(C, rescaled)[index][:, index]
    P[index] = solve_singular_spd(K, S[index], direct="rank_one", label="kirchhoff")
    return P


def kirchhoff_residual(graph: NetworkGraph, C, S, P, rescaled: bool = False) -> np.ndarray:
    """-Σ_j w_ij (P_j - P_i) - S_i per vertex."""
    return graph.laplacian(C, rescaled) @ np.asarray(P, dtype=float) - np.asarray(S, dtype=float)


def project_source(mesh: TriMesh, S) -> np.ndarray:
    """S_i = ∫ S ψ_i dx by 3-point Gauss quadrature, then balanced exactly.

    `S` is a callable S(x, y) on coordinate arrays, or None for S ≡ 0. The
    balance shifts S by a constant, i.e. subtracts a multiple of ∫ψ_i.
    """
    if S is None:
        return np.zeros(mesh.n_vertices)
    corners = mesh.vertices[mesh.triangles]
    points = np.einsum("qk,tkd->tqd", GAUSS3, corners)
    values = np.asarray(S(points[..., 0], points[..., 1]), dtype=float)
    values = np.broadcast_to(values, points.shape[:2])
    local = (mesh.areas / 3.0)[:, None] * np.einsum("tq,qk->tk", values, GAUSS3)
    load = np.bincount(mesh.triangles.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)
    mass = mesh.lumped_mass
    total = load.sum()
    load -= mass * (total / mass.sum())
    load -= load.sum() / len(load)
    if abs(total) > 1e-8 * max(np.abs(local).sum(), np.finfo(float).tiny):
        logger.warning("Source is not balanced; shifted by a constant", extra={"integral": total})
    return load


def discrete_energy(graph: NetworkGraph, C, P, law: MetabolicLaw, rescaled: bool = False) -> float:
    C = _check_conductivity(graph, C)
    P = np.asarray(P, dtype=float)
    L = graph.lengths
    dP = P[graph.edges[:, 1]] - P[graph.edges[:, 0]]
    summand = (C * dP**2 / L**2 + law.M(C)) * L
    if rescaled:
        summand = summand * graph.volumes / L
    return float(summand.sum())


def stability_bound(graph: NetworkGraph, C, law: MetabolicLaw, rescaled: bool = False) -> float:
    """Heuristic explicit-Euler bound 1/max(M''(C)·w) over positive conductivities."""
    C = np.asarray(C, dtype=float)
    w = graph.volumes if rescaled else graph.lengths
    positive = C > 0
    if not positive.any():
        return math.inf
    stiffness = np.max(np.abs(law.d2M(C[positive])) * w[positive])
    if not np.isfinite(stiffness):
        return 0.0
    return math.inf if stiffness == 0 else float(1.0 / stiffness)


def _advance(graph, C, S, law, dt, rescaled, freeze_extinct):
    P = solve_kirchhoff(graph, C, S, rescaled)
    L = graph.lengths
    w = graph.volumes if rescaled else L
    drive = ((P[graph.edges[:, 1]] - P[graph.edges[:, 0]]) / L) ** 2
    extinct = (C == 0.0) & (law.gamma < 1.0)
    if extinct.any() and not freeze_extinct:
        edge = int(np.flatnonzero(extinct)[0])
        raise NonFiniteUpdateError(f"M'(0) is infinite on edge {edge}", edge)
    cost = np.zeros_like(C)
    cost[~extinct] = law.dM(C[~extinct])
    update = C + dt * (drive - cost) * w
    bad = ~np.isfinite(update)
    if bad.any():
        edge = int(np.flatnonzero(bad)[0])
        raise NonFiniteUpdateError(f"non-finite conductivity update on edge {edge}", edge)
    update = np.maximum(update, 0.0)
    update[extinct] = 0.0
    return update, P


def adaptation_step(
    graph: NetworkGraph,
    C,
    S,
    law: MetabolicLaw,
    dt: float,
    rescaled: bool = False,
    *,
    freeze_extinct: bool = True,
) -> np.ndarray:
    """One explicit Euler step of dC/dt = ((ΔP/L)² - M'(C))·w, clipped at 0.

    For γ < 1 an edge with C = 0 stays at 0 when `freeze_extinct` is set;
    otherwise it raises NonFiniteUpdateError naming the edge.
    """
    if not dt > 0:
        raise ParameterError("dt must be positive")
    C = _check_conductivity(graph, C)
    return _advance(graph, C, S, law, dt, rescaled, freeze_extinct)[0]


@dataclass
class AdaptationTrajectory:
    times: list[float]
    conductivities: list[np.ndarray]
    energies: list[float]
    max_dC: list[float]
    min_C: list[float]
    stability_bound: float
    stopped_early: bool = False


def run_adaptation(
    graph: NetworkGraph,
    C0,
    S,
    law: MetabolicLaw,
    dt: float,
    t_end: float,
    rescaled: bool = False,
    *,
    freeze_extinct: bool = True,
    stop_tol: float = 1e-12,
) -> AdaptationTrajectory:
    """Repeated adaptation steps, logging the discrete energy after each."""
    if not dt > 0:
        raise ParameterError("dt must be positive")
    if not t_end >= 0:
        raise ParameterError("t_end must be nonnegative")
    C = _check_conductivity(graph, C0).copy()
    bound = stability_bound(graph, C, law, rescaled)
    if dt > bound:
        logger.warning(
            "Time step exceeds the explicit stability bound",
            extra={"dt": dt, "bound": bound},
        )
    P = solve_kirchhoff(graph, C, S, rescaled)
    trajectory = AdaptationTrajectory(
        times=[0.0],
        conductivities=[C.copy()],
        energies=[discrete_energy(graph, C, P, law, rescaled)],
        max_dC=[0.0],
        min_C=[float(C.min())],
        stability_bound=bound,
    )
    n_steps = int(math.ceil(t_end / dt - 1e-9))
    for step in range(1, n_steps + 1):
        C_new, _ = _advance(graph, C, S, law, dt, rescaled, freeze_extinct)
        change = float(np.max(np.abs(C_new - C)))
        C = C_new
        P = solve_kirchhoff(graph, C, S, rescaled)
        energy = discrete_energy(graph, C, P, law, rescaled)
        trajectory.times.append(step * dt)
        trajectory.conductivities.append(C.copy())
        trajectory.energies.append(energy)
        trajectory.max_dC.append(change)
        trajectory.min_C.append(float(C.min()))
        logger.debug(
            "Adaptation step",
            extra={"step": step, "t": step * dt, "energy": energy, "max_dC": change},
        )
        if change < stop_tol:
            trajectory.stopped_early = True
            logger.info("Adaptation reached a fixed point", extra={"step": step, "t": step * dt})
            break
    return trajectory
