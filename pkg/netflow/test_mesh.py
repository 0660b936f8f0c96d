import logging

import numpy as np
import pytest

from netflow.errors import MeshFormatError, MeshValidationError, ParameterError
from netflow.mesh import (
    TriMesh,
    build_structured_triangulation,
    compute_diamonds,
    load_mesh,
    save_mesh,
)


def unit_right_triangle():
    return TriMesh.from_arrays([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[0, 1, 2]])


@pytest.mark.parametrize("n, counts", [(1, (4, 2, 5)), (2, (9, 8, 16))])
def test_structured_counts(n, counts):
    mesh = build_structured_triangulation(n, n)
    assert (mesh.n_vertices, mesh.n_triangles, mesh.n_edges) == counts
    assert mesh.euler_characteristic() == 1
    assert mesh.total_area == pytest.approx(1.0)
    assert np.all(mesh.areas > 0)


def test_structured_rejects_bad_input():
    with pytest.raises(ParameterError):
        build_structured_triangulation(0, 1)
    with pytest.raises(MeshValidationError):
        build_structured_triangulation(2, 2, rect=(0.0, 0.0, 0.0, 1.0))


def test_boundary_flags_on_square():
    mesh = build_structured_triangulation(2, 2)
    # only the centre vertex is interior
    assert mesh.boundary_vertex.sum() == 8
    assert not mesh.boundary_vertex[4]
    assert mesh.boundary_edge.sum() == 8
    assert np.all(mesh.edge_triangles[mesh.boundary_edge, 1] == -1)
    assert np.all(mesh.edge_triangles[~mesh.boundary_edge] >= 0)


def test_triangle_edges_match_local_edges():
    mesh = build_structured_triangulation(3, 2)
    for t, tri in enumerate(mesh.triangles):
        for k in range(3):
            pair = sorted((tri[k], tri[(k + 1) % 3]))
            assert list(mesh.edges[mesh.triangle_edges[t, k]]) == pair


def test_hat_gradients_sum_to_zero_and_reproduce_linears():
    mesh = build_structured_triangulation(3, 3, rect=(0.0, 0.0, 2.0, 1.0))
    grads = mesh.hat_gradients
    np.testing.assert_allclose(grads.sum(axis=1), 0.0, atol=1e-12)
    x = mesh.vertices[:, 0][mesh.triangles]
    np.testing.assert_allclose(np.einsum("tk,tkd->td", x, grads), [[1.0, 0.0]] * mesh.n_triangles, atol=1e-12)
    assert mesh.lumped_mass.sum() == pytest.approx(2.0)


def test_diamonds_of_single_triangle():
    diamonds = compute_diamonds(unit_right_triangle())
    np.testing.assert_allclose(diamonds.volumes, [1.0 / 6.0] * 3)


def test_diamonds_of_unit_square():
    mesh = build_structured_triangulation(1, 1)
    diamonds = compute_diamonds(mesh)
    diagonal = np.flatnonzero(~mesh.boundary_edge)
    assert len(diagonal) == 1
    assert diamonds.volumes[diagonal[0]] == pytest.approx(1.0 / 3.0)
    np.testing.assert_allclose(diamonds.volumes[mesh.boundary_edge], 1.0 / 6.0)
    assert diamonds.volumes.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(np.linalg.norm(diamonds.directions, axis=1), 1.0)


def test_half_diamond_mesh():
    mesh = build_structured_triangulation(2, 2)
    halves = compute_diamonds(mesh).halves
    assert halves.n_primary == mesh.n_vertices
    assert halves.mesh.n_triangles == 3 * mesh.n_triangles
    assert halves.mesh.n_vertices == mesh.n_vertices + mesh.n_triangles
    assert halves.mesh.total_area == pytest.approx(mesh.total_area)
    per_edge = np.bincount(halves.cell_edge, weights=halves.mesh.areas, minlength=mesh.n_edges)
    np.testing.assert_allclose(per_edge, compute_diamonds(mesh).volumes)


def test_save_load_round_trip(tmp_path):
    mesh = build_structured_triangulation(2, 2, rect=(0.0, 0.0, 1.0, 0.3))
    path = tmp_path / "square.mesh"
    save_mesh(mesh, path)
    loaded = load_mesh(path)
    assert np.array_equal(loaded.vertices, mesh.vertices)
    assert np.array_equal(loaded.triangles, mesh.triangles)


def test_load_rejects_out_of_range_index(tmp_path):
    path = tmp_path / "bad.mesh"
    path.write_text("vertices 3\n0 0\n1 0\n0 1\ntriangles 1\n0 1 3\n")
    with pytest.raises(MeshFormatError, match="out of range") as info:
        load_mesh(path)
    assert info.value.line == 6


def test_load_reorients_clockwise_triangles(tmp_path, caplog):
    path = tmp_path / "cw.mesh"
    path.write_text("# clockwise\nvertices 3\n0 0\n1 0\n0 1\n\ntriangles 1\n0 2 1\n")
    with caplog.at_level(logging.WARNING, logger="netflow.mesh"):
        mesh = load_mesh(path)
    assert mesh.areas[0] == pytest.approx(0.5)
    assert "Reoriented" in caplog.text


def test_from_arrays_rejects_invalid_meshes():
    vertices = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
    with pytest.raises(MeshValidationError, match="clockwise"):
        TriMesh.from_arrays(vertices[:3], [[0, 2, 1]])
    with pytest.raises(MeshValidationError, match="not used"):
        TriMesh.from_arrays(vertices, [[0, 1, 2]])
    with pytest.raises(MeshValidationError, match="zero area"):
        TriMesh.from_arrays([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], [[0, 1, 2]])
    with pytest.raises(MeshValidationError, match="disconnected"):
        TriMesh.from_arrays(
            vertices + [[3.0, 3.0], [4.0, 3.0], [3.0, 4.0]], [[0, 1, 2], [1, 3, 2], [4, 5, 6]]
        )


@pytest.mark.parametrize("n", [2, 4, 8])
def test_mesh_size_halves_under_refinement(n):
    coarse, fine = build_structured_triangulation(n, n), build_structured_triangulation(2 * n, 2 * n)
    assert fine.h == pytest.approx(coarse.h / 2.0, rel=1e-12)
    assert coarse.h == pytest.approx(np.sqrt(2.0) / n, rel=1e-12)
