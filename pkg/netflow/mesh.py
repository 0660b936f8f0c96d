"""Planar triangulations and the edge/diamond geometry built on them.

A `TriMesh` is an immutable, validated triangulation of a polygonal domain.
`compute_diamonds` derives the per-edge quantities of the discrete network
model: edge length L_ij, unit direction and the diamond area vol(⋄_ij), where
every triangle hands one third of its area to each of its three edges. The
same decomposition yields the half-diamond triangulation (x_i, x_j, centroid)
on which piecewise-constant edge tensors are integrated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import MeshFormatError, MeshValidationError, ParameterError

logger = logging.getLogger(__name__)

_LOCAL_EDGES = np.array([[0, 1], [1, 2], [2, 0]])


def _doubled_signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    u = p1 - p0
    v = p2 - p0
    return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Validated planar triangulation.

    Attributes:
        vertices: (n_v, 2) coordinates.
        triangles: (n_t, 3) vertex indices, counter-clockwise.
        edges: (n_e, 2) unordered vertex pairs stored as (i, j) with i < j.
        edge_triangles: (n_e, 2) adjacent triangles, -1 in the second slot for
            boundary edges.
        triangle_edges: (n_t, 3) edge index of local edge k = (v_k, v_{k+1}).
        boundary_vertex: (n_v,) bool.
        boundary_edge: (n_e,) bool.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    edge_triangles: np.ndarray
    triangle_edges: np.ndarray
    boundary_vertex: np.ndarray
    boundary_edge: np.ndarray

    @classmethod
    def from_arrays(cls, vertices, triangles, *, reorient: bool = False) -> TriMesh:
        """Build and validate a mesh.

        Clockwise triangles are rejected unless `reorient` is set, in which case
        they are flipped and a warning is logged.
        """
        vertices = np.array(vertices, dtype=float)
        triangles = np.array(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2 or len(vertices) < 3:
            raise MeshValidationError("vertices must be an (n, 2) array with n >= 3")
        if not np.all(np.isfinite(vertices)):
            raise MeshValidationError("vertex coordinates must be finite")
        if triangles.ndim != 2 or triangles.shape[1] != 3 or len(triangles) == 0:
            raise MeshValidationError("triangles must be a non-empty (m, 3) array")
        n_v = len(vertices)
        if triangles.min() < 0 or triangles.max() >= n_v:
            bad = int(np.flatnonzero((triangles < 0) | (triangles >= n_v))[0] // 3)
            raise MeshValidationError(f"triangle {bad} references a vertex out of range")
        unused = np.setdiff1d(np.arange(n_v), triangles.ravel())
        if unused.size:
            raise MeshValidationError(f"vertex {int(unused[0])} is not used by any triangle")

        area2 = _doubled_signed_areas(vertices, triangles)
        extent = np.ptp(vertices, axis=0).max()
        degenerate = np.abs(area2) <= 1e-14 * extent**2
        if degenerate.any():
            raise MeshValidationError(
                f"triangle {int(np.flatnonzero(degenerate)[0])} has zero area"
            )
        clockwise = area2 < 0
        if clockwise.any():
            if not reorient:
                raise MeshValidationError(
                    f"triangle {int(np.flatnonzero(clockwise)[0])} is clockwise"
                )
            logger.warning(
                "Reoriented clockwise triangles",
                extra={
                    "count": int(clockwise.sum()),
                    "first": int(np.flatnonzero(clockwise)[0]),
                },
            )
            triangles[clockwise] = triangles[clockwise][:, [0, 2, 1]]

        n_t = len(triangles)
        pairs = np.sort(triangles[:, _LOCAL_EDGES].reshape(-1, 2), axis=1)
        edges, inverse, counts = np.unique(
            pairs, axis=0, return_inverse=True, return_counts=True
        )
        inverse = inverse.reshape(-1)
        if counts.max() > 2:
            bad = edges[int(np.argmax(counts))]
            raise MeshValidationError(
                f"edge ({bad[0]}, {bad[1]}) is shared by more than two triangles"
            )

        order = np.argsort(inverse, kind="stable")
        sorted_edges = inverse[order]
        slot = np.arange(len(order)) - np.searchsorted(sorted_edges, sorted_edges, side="left")
        edge_triangles = np.full((len(edges), 2), -1, dtype=np.int64)
        edge_triangles[sorted_edges, slot] = np.repeat(np.arange(n_t), 3)[order]

        boundary_edge = counts == 1
        boundary_vertex = np.zeros(n_v, dtype=bool)
        boundary_vertex[edges[boundary_edge].ravel()] = True

        interior = ~boundary_edge
        adjacency = coo_matrix(
            (
                np.ones(int(interior.sum())),
                (edge_triangles[interior, 0], edge_triangles[interior, 1]),
            ),
            shape=(n_t, n_t),
        )
        n_components, _ = connected_components(adjacency, directed=False)
        if n_components != 1:
            raise MeshValidationError(f"mesh has {n_components} disconnected pieces")

        return cls(
            vertices=vertices,
            triangles=triangles,
            edges=edges.astype(np.int64),
            edge_triangles=edge_triangles,
            triangle_edges=inverse.reshape(n_t, 3),
            boundary_vertex=boundary_vertex,
            boundary_edge=boundary_edge,
        )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * _doubled_signed_areas(self.vertices, self.triangles)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]]
        return np.hypot(d[:, 0], d[:, 1])

    @property
    def h(self) -> float:
        """Maximum edge length."""
        return float(self.edge_lengths.max())

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def hat_gradients(self) -> np.ndarray:
        """(n_t, 3, 2) constant gradients of the P1 hat functions per triangle."""
        p = self.vertices[self.triangles]
        nxt = p[:, [1, 2, 0]]
        prv = p[:, [2, 0, 1]]
        grad = np.stack([nxt[..., 1] - prv[..., 1], prv[..., 0] - nxt[..., 0]], axis=-1)
        return grad / (2.0 * self.areas)[:, None, None]

    @cached_property
    def lumped_mass(self) -> np.ndarray:
        """∫ φ_i dx per vertex; also the weights of the mass-weighted mean."""
        return np.bincount(
            self.triangles.ravel(),
            weights=np.repeat(self.areas / 3.0, 3),
            minlength=self.n_vertices,
        )

    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_edges + self.n_triangles


@dataclass(frozen=True, eq=False)
class HalfDiamondMesh:
    """Triangulation by half-diamond triangles (x_i, x_j, centroid).

    Vertices 0..n_primary-1 are the primary mesh vertices, the rest are the
    triangle centroids. `cell_edge[k]` is the primary edge cell k belongs to.
    """

    mesh: TriMesh
    cell_edge: np.ndarray
    n_primary: int


@dataclass(frozen=True, eq=False)
class DiamondMap:
    mesh: TriMesh
    lengths: np.ndarray
    directions: np.ndarray
    volumes: np.ndarray
    halves: HalfDiamondMesh


def build_structured_triangulation(
    nx: int, ny: int, rect: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
) -> TriMesh:
    """Uniform criss-cross triangulation of an axis-aligned rectangle.

    Cell (i, j) is split along the diagonal (i, j)-(i+1, j+1) when i + j is
    even and along (i+1, j)-(i, j+1) otherwise, so the mesh is mirror
    symmetric about x = const for even `nx`.
    """
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ParameterError("nx and ny must be integers >= 1")
    nx, ny = int(nx), int(ny)
    x0, y0, x1, y1 = map(float, rect)
    if not (np.isfinite([x0, y0, x1, y1]).all() and x1 > x0 and y1 > y0):
        raise MeshValidationError(f"degenerate rectangle {rect}")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    vertices = np.column_stack([gx.ravel(), gy.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    v00 = j * (nx + 1) + i
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    even = ((i + j) % 2 == 0)[:, None]
    first = np.where(even, np.column_stack([v00, v10, v11]), np.column_stack([v00, v10, v01]))
    second = np.where(even, np.column_stack([v00, v11, v01]), np.column_stack([v10, v11, v01]))
    triangles = np.stack([first, second], axis=1).reshape(-1, 3)

    mesh = TriMesh.from_arrays(vertices, triangles)
    logger.debug(
        "Built structured triangulation",
        extra={"nx": nx, "ny": ny, "triangles": mesh.n_triangles, "h": mesh.h},
    )
    return mesh


def compute_diamonds(mesh: TriMesh) -> DiamondMap:
    """Per-edge length, unit direction (x_i - x_j)/L_ij and diamond area."""
    p_i = mesh.vertices[mesh.edges[:, 0]]
    p_j = mesh.vertices[mesh.edges[:, 1]]
    lengths = mesh.edge_lengths
    directions = (p_i - p_j) / lengths[:, None]
    volumes = np.bincount(
        mesh.triangle_edges.ravel(),
        weights=np.repeat(mesh.areas / 3.0, 3),
        minlength=mesh.n_edges,
    )
    total = mesh.total_area
    if abs(volumes.sum() - total) > 1e-12 * total:
        raise MeshValidationError("diamond areas do not partition the mesh area")

    n_v, n_t = mesh.n_vertices, mesh.n_triangles
    tri = mesh.triangles
    centroid_index = n_v + np.arange(n_t)
    cells = np.stack(
        [
            np.column_stack([tri[:, k], tri[:, (k + 1) % 3], centroid_index])
            for k in range(3)
        ],
        axis=1,
    ).reshape(-1, 3)
    halves = HalfDiamondMesh(
        mesh=TriMesh.from_arrays(np.vstack([mesh.vertices, mesh.centroids]), cells),
        cell_edge=mesh.triangle_edges.reshape(-1).copy(),
        n_primary=n_v,
    )
    return DiamondMap(
        mesh=mesh, lengths=lengths, directions=directions, volumes=volumes, halves=halves
    )


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def load_mesh(path: str | Path) -> TriMesh:
    """Read the plain-text mesh format (`vertices N`, N lines, `triangles M`, M lines)."""
    path = Path(path)
    lines = [
        (number, _strip(raw))
        for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1)
    ]
    lines = [(number, text) for number, text in lines if text]
    cursor = iter(lines)

    def header(keyword: str) -> int:
        try:
            number, text = next(cursor)
        except StopIteration:
            raise MeshFormatError(f"missing '{keyword}' header") from None
        parts = text.split()
        if len(parts) != 2 or parts[0] != keyword:
            raise MeshFormatError(f"expected '{keyword} <count>'", number)
        try:
            count = int(parts[1])
        except ValueError:
            raise MeshFormatError(f"invalid {keyword} count {parts[1]!r}", number) from None
        if count < 1:
            raise MeshFormatError(f"{keyword} count must be positive", number)
        return count

    def rows(count: int, width: int, kind: type) -> list[tuple[int, list]]:
        out = []
        for _ in range(count):
            try:
                number, text = next(cursor)
            except StopIteration:
                raise MeshFormatError("unexpected end of file") from None
            parts = text.split()
            if len(parts) != width:
                raise MeshFormatError(f"expected {width} values, found {len(parts)}", number)
            try:
                out.append((number, [kind(part) for part in parts]))
            except ValueError:
                raise MeshFormatError(f"cannot parse {text!r}", number) from None
        return out

    vertices = [values for _, values in rows(header("vertices"), 2, float)]
    triangle_rows = rows(header("triangles"), 3, int)
    leftover = next(cursor, None)
    if leftover is not None:
        raise MeshFormatError("unexpected content after triangles", leftover[0])
    n_v = len(vertices)
    for number, values in triangle_rows:
        for index in values:
            if not 0 <= index < n_v:
                raise MeshFormatError(
                    f"vertex index {index} out of range ({n_v} vertices)", number
                )
    mesh = TriMesh.from_arrays(vertices, [values for _, values in triangle_rows], reorient=True)
    logger.info(
        "Loaded mesh",
        extra={"path": str(path), "vertices": mesh.n_vertices, "triangles": mesh.n_triangles},
    )
    return mesh


def save_mesh(mesh: TriMesh, path: str | Path) -> None:
    path = Path(path)
    out = ["# netflow triangulation", f"vertices {mesh.n_vertices}"]
    out += [f"{float(x)!r} {float(y)!r}" for x, y in mesh.vertices]
    out.append(f"triangles {mesh.n_triangles}")
    out += [f"{int(a)} {int(b)} {int(c)}" for a, b, c in mesh.triangles]
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
    logger.debug("Saved mesh", extra={"path": str(path)})
