import math

import meshio
import numpy as np
import pytest

from netflow.errors import ParameterError, PreconditionError
from netflow.helper import SeededGenerator
from netflow.mesh import build_structured_triangulation, compute_diamonds
from netflow.tensorfield import (
    CellTensorField,
    MetabolicLaw,
    NodalTensorField,
    SymTensor2,
    eig,
    eigvals,
    frobenius,
    lift_Qh,
    metabolic_force,
    outer,
    tensor_arrays,
    to_matrices,
    write_vtk,
)


def test_identity_and_rank_one():
    identity = SymTensor2(1.0, 0.0, 1.0)
    assert frobenius(identity) == pytest.approx(math.sqrt(2.0))
    np.testing.assert_allclose(eigvals(identity), [1.0, 1.0])
    flat = SymTensor2(2.0, 0.0, 0.0)
    assert frobenius(flat) == pytest.approx(2.0)
    np.testing.assert_allclose(eigvals(flat), [2.0, 0.0])


def test_eig_reconstructs_random_tensors():
    gen = SeededGenerator(7)
    values = gen.uniform(-1.0, 1.0, 60).reshape(20, 3)
    lam, vectors = eig(values)
    assert np.all(lam[:, 0] >= lam[:, 1])
    rebuilt = np.einsum("nij,nj,nkj->nik", vectors, lam, vectors)
    np.testing.assert_allclose(rebuilt, to_matrices(values), atol=1e-12)


def test_matrix_round_trip():
    T = SymTensor2.from_matrix([[1.0, 2.0], [2.0, 3.0]])
    assert T == SymTensor2(1.0, 2.0, 3.0)
    np.testing.assert_array_equal(T.as_matrix(), [[1.0, 2.0], [2.0, 3.0]])


def test_outer_products():
    np.testing.assert_allclose(outer([1.0, 0.0]), [1.0, 0.0, 0.0])
    e = np.array([1.0, 1.0]) / math.sqrt(2.0)
    np.testing.assert_allclose(outer(e), [0.5, 0.5, 0.5])


def test_metabolic_law_derivatives():
    law = MetabolicLaw(2.0)
    assert law.M(3.0) == pytest.approx(4.5)
    assert law.dM(3.0) == pytest.approx(3.0)
    assert law.d2M(3.0) == pytest.approx(1.0)
    assert np.all(MetabolicLaw(1.0).d2M(np.array([0.5, 2.0])) == 0.0)
    with pytest.raises(ParameterError, match="gamma must be positive"):
        MetabolicLaw(0.0)


def test_metabolic_force_cases():
    T = np.array([[1.0, 0.3, 2.0], [0.5, -0.1, 0.2]])
    force, frozen = metabolic_force(T, MetabolicLaw(2.0))
    np.testing.assert_allclose(force, T)
    assert not frozen.any()

    unit, _ = metabolic_force(SymTensor2(2.0, 0.0, 0.0), MetabolicLaw(1.0))
    assert unit == SymTensor2(1.0, 0.0, 0.0)

    zero, _ = metabolic_force(SymTensor2(0.0, 0.0, 0.0), MetabolicLaw(1.5))
    assert zero == SymTensor2(0.0, 0.0, 0.0)

    _, frozen = metabolic_force(np.zeros((2, 3)), MetabolicLaw(0.5))
    assert frozen.all()


def test_lift_of_axis_and_diagonal_edges():
    mesh = build_structured_triangulation(1, 1)
    diamonds = compute_diamonds(mesh)
    C = np.full(mesh.n_edges, 1.0)
    horizontal = int(np.flatnonzero((mesh.edges == [0, 1]).all(axis=1))[0])
    diagonal = int(np.flatnonzero(~mesh.boundary_edge)[0])
    C[horizontal] = 2.0
    lifted = lift_Qh(mesh, diamonds, C)
    cells = diamonds.halves.cell_edge
    np.testing.assert_allclose(lifted.values[cells == horizontal], [[2.0, 0.0, 0.0]])
    np.testing.assert_allclose(lifted.values[cells == diagonal], [[0.5, 0.5, 0.5]] * 2)
    with pytest.raises(PreconditionError):
        lift_Qh(mesh, diamonds, -C)


def test_fields_check_shapes_and_dirichlet_trace():
    mesh = build_structured_triangulation(2, 2)
    with pytest.raises(PreconditionError):
        CellTensorField(mesh, np.zeros((3, 3)))
    values = np.zeros((mesh.n_vertices, 3))
    values[4] = [1.0, 0.0, 1.0]
    field = NodalTensorField(mesh, values, dirichlet=True)
    assert field.min_eigenvalue() == 0.0
    cells = field.to_cells()
    assert cells.values.max() == pytest.approx(1.0 / 3.0)
    values[0] = [1.0, 0.0, 1.0]
    with pytest.raises(PreconditionError):
        NodalTensorField(mesh, values, dirichlet=True)


def test_write_vtk_snapshot(tmp_path):
    mesh = build_structured_triangulation(2, 2)
    values = np.tile([1.0, 0.0, 2.0], (mesh.n_vertices, 1))
    path = write_vtk(tmp_path / "snap.vtk", mesh, point_data=tensor_arrays("C", values))
    grid = meshio.read(path)
    assert len(grid.points) == mesh.n_vertices
    np.testing.assert_allclose(grid.point_data["C_lambda1"], 2.0)
    np.testing.assert_allclose(grid.point_data["C_norm"], math.sqrt(5.0))


@pytest.mark.parametrize("gamma", [0.5, 1.0, 1.5, 2.0, 3.0])
def test_metabolic_force_is_homogeneous(gamma):
    law = MetabolicLaw(gamma)
    T = SeededGenerator(int(10 * gamma)).uniform(-1.0, 1.0, 60).reshape(20, 3)
    force, _ = metabolic_force(T, law)
    for alpha in (0.25, 3.0):
        scaled, _ = metabolic_force(alpha * T, law)
        np.testing.assert_allclose(scaled, alpha ** (gamma - 1.0) * force, rtol=1e-12)


def test_lift_of_random_conductivities_is_positive_semidefinite():
    mesh = build_structured_triangulation(4, 4)
    diamonds = compute_diamonds(mesh)
    C = SeededGenerator(99).uniform(0.0, 2.0, mesh.n_edges)
    C[::3] = 0.0
    lifted = lift_Qh(mesh, diamonds, C)
    assert eigvals(lifted.values).min() >= -1e-14
    np.testing.assert_allclose(frobenius(lifted.values), C[diamonds.halves.cell_edge], rtol=1e-12, atol=1e-15)
