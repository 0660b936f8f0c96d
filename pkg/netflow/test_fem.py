import math

import numpy as np
import pytest

from netflow.errors import IndefinitePermeabilityError, InsufficientDataError, PreconditionError
from netflow.fem import (
    assemble,
    convergence_study,
    primary_tensors,
    semi_discrete_energy,
    solve_poisson,
    verify_prop1,
    verify_prop2,
)
from netflow.helper import SeededGenerator
from netflow.mesh import TriMesh, build_structured_triangulation, compute_diamonds
from netflow.network import NetworkGraph, project_source, solve_kirchhoff
from netflow.tensorfield import MetabolicLaw, lift_Qh


def dipole(x, y):
    return np.exp(-((x - 0.3) ** 2 + (y - 0.4) ** 2) / 0.02) - np.exp(
        -((x - 0.7) ** 2 + (y - 0.6) ** 2) / 0.02
    )


def manufactured_source(x, y):
    return math.pi**2 * np.cos(math.pi * x)


def test_laplacian_on_right_triangle():
    mesh = TriMesh.from_arrays([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[0, 1, 2]])
    K = assemble(mesh, None, 1.0).matrix.toarray()
    assert K[0, 0] == pytest.approx(1.0)
    np.testing.assert_allclose(K.sum(axis=1), 0.0, atol=1e-15)
    np.testing.assert_allclose(K, K.T)


def test_indefinite_permeability_names_triangle():
    mesh = build_structured_triangulation(2, 2)
    perm = np.zeros((mesh.n_triangles, 3))
    perm[5] = [-2.0, 0.0, 0.0]
    with pytest.raises(IndefinitePermeabilityError) as info:
        assemble(mesh, perm, 1.0)
    assert info.value.triangle == 5


def test_zero_source_gives_zero_pressure():
    mesh = build_structured_triangulation(3, 3)
    pressure = solve_poisson(mesh, None, 1.0, None)
    assert np.all(pressure.values == 0.0)


def test_zero_background_needs_definite_permeability():
    mesh = build_structured_triangulation(3, 3)
    with pytest.raises(PreconditionError):
        solve_poisson(mesh, [1.0, 0.0, 0.0], 0.0, dipole)
    pressure = solve_poisson(mesh, [2.0, 0.5, 1.0], 0.0, dipole)
    assert abs(pressure.mean()) < 1e-14


def test_manufactured_solution_converges_at_second_order():
    errors = []
    for n in (8, 16, 32):
        mesh = build_structured_triangulation(n, n)
        pressure = solve_poisson(mesh, None, 1.0, manufactured_source)
        exact = np.cos(math.pi * mesh.vertices[:, 0])
        errors.append(math.sqrt(np.dot(mesh.lumped_mass, (pressure.values - exact) ** 2)))
    orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all(orders > 1.8)


def test_energy_vanishes_without_source_or_permeability():
    mesh = build_structured_triangulation(2, 2)
    report = semi_discrete_energy(mesh, None, 1.0, None, MetabolicLaw(2.0))
    assert report.total == 0.0


def test_pumping_term_matches_source_identity():
    mesh = build_structured_triangulation(6, 6)
    report = semi_discrete_energy(mesh, [0.5, 0.1, 0.3], 1.0, dipole, MetabolicLaw(1.5))
    assert report.pumping == pytest.approx(report.pumping_source, rel=1e-10)
    assert report.metabolic == pytest.approx((math.sqrt(0.25 + 0.02 + 0.09) ** 1.5) / 1.5)


def random_instances():
    gen = SeededGenerator(2024)
    for k in range(5):
        n = 2 if k % 2 == 0 else 4
        mesh = build_structured_triangulation(n, n)
        yield mesh, gen.uniform(0.1, 2.0, mesh.n_edges), (1.0, 1.5, 2.0)[k % 3]


@pytest.mark.parametrize("mesh, C, gamma", list(random_instances()))
def test_kirchhoff_identity_on_random_instances(mesh, C, gamma):
    report = verify_prop1(mesh, compute_diamonds(mesh), C, dipole)
    assert report.max_relative <= 1e-8


@pytest.mark.parametrize("mesh, C, gamma", list(random_instances()))
def test_energy_identity_on_random_instances(mesh, C, gamma):
    report = verify_prop2(mesh, compute_diamonds(mesh), C, dipole, MetabolicLaw(gamma))
    assert report.gap <= 1e-10
    assert report.discrete > 0


def test_identities_without_source_and_with_constant_conductivity():
    mesh = build_structured_triangulation(2, 2)
    diamonds = compute_diamonds(mesh)
    C = np.ones(mesh.n_edges)
    assert verify_prop1(mesh, diamonds, C, None).max_relative == 0.0
    report = verify_prop2(mesh, diamonds, C, lambda x, y: np.cos(math.pi * x), MetabolicLaw(2.0))
    assert math.isfinite(report.discrete)
    assert report.discrete == pytest.approx(report.semi_discrete, rel=1e-10)


def test_identities_require_positive_conductivity():
    mesh = build_structured_triangulation(2, 2)
    with pytest.raises(PreconditionError):
        verify_prop1(mesh, compute_diamonds(mesh), np.zeros(mesh.n_edges), dipole)


def test_kirchhoff_identity_uses_the_projected_source():
    mesh = build_structured_triangulation(4, 4)
    diamonds = compute_diamonds(mesh)
    graph = NetworkGraph.from_mesh(mesh, diamonds)
    C = SeededGenerator(7).uniform(0.1, 2.0, mesh.n_edges)
    S = project_source(mesh, dipole)

    report = verify_prop1(mesh, diamonds, C, dipole)
    np.testing.assert_array_equal(report.source, S)
    assert report.max_relative <= 1e-8

    perm = primary_tensors(mesh, lift_Qh(mesh, diamonds, C))
    K = assemble(mesh, perm, 0.0).matrix.toarray()
    np.testing.assert_allclose(K, graph.laplacian(C, rescaled=True).toarray(), atol=1e-13)

    fem = solve_poisson(mesh, perm, 0.0, dipole).values
    network = solve_kirchhoff(graph, C, S, rescaled=True)
    np.testing.assert_allclose(fem - fem.mean(), network - network.mean(), atol=1e-10 * np.abs(network).max())


def test_kirchhoff_identity_holds_on_every_refinement():
    gen = SeededGenerator(5)
    for n in (2, 4, 8):
        mesh = build_structured_triangulation(n, n)
        C = gen.uniform(0.1, 2.0, mesh.n_edges)
        assert verify_prop1(mesh, compute_diamonds(mesh), C, dipole).max_relative <= 1e-8


def test_galerkin_pumping_energy_underestimates_the_exact_one():
    exact = math.pi**2 / 2.0
    pumping = []
    for n in (4, 8, 16):
        mesh = build_structured_triangulation(n, n)
        pumping.append(semi_discrete_energy(mesh, None, 1.0, manufactured_source, MetabolicLaw(2.0)).pumping)
    assert all(value <= exact for value in pumping)


def test_convergence_order_against_finer_reference_mesh():
    table = convergence_study([4, 8, 16, 32], perm=None, r=1.0, S=manufactured_source, law=MetabolicLaw(2.0))
    assert table.order >= 1.8
    assert table.r_squared >= 0.99
    assert table.reference == pytest.approx(math.pi**2 / 2.0, rel=1e-3)


def test_convergence_order_of_manufactured_energy():
    table = convergence_study(
        [4, 8, 16, 32, 64],
        perm=None,
        r=1.0,
        S=manufactured_source,
        law=MetabolicLaw(2.0),
        reference_energy=math.pi**2 / 2.0,
    )
    assert table.order >= 1.8
    assert table.r_squared >= 0.99
    assert np.isnan(table.order_running[0])
    assert np.all(np.diff(table.gaps) < 0)


def test_convergence_without_source_has_no_gap():
    table = convergence_study([2, 4, 8], perm=[1.0, 0.0, 1.0], r=1.0, S=None, law=MetabolicLaw(2.0))
    assert np.all(table.gaps < 1e-12)
    assert math.isnan(table.order)


def test_convergence_needs_three_levels():
    with pytest.raises(InsufficientDataError):
        convergence_study([2, 4])
