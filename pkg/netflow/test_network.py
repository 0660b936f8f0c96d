import math

import numpy as np
import pytest

from netflow.errors import NonFiniteUpdateError, PreconditionError, SingularSystemError
from netflow.mesh import build_structured_triangulation, compute_diamonds
from netflow.network import (
    NetworkGraph,
    adaptation_step,
    discrete_energy,
    kirchhoff_residual,
    project_source,
    run_adaptation,
    solve_kirchhoff,
    stability_bound,
)
from netflow.tensorfield import MetabolicLaw


@pytest.fixture
def segment():
    return NetworkGraph.from_edges([[0.0, 0.0], [1.0, 0.0]], [[0, 1]])


@pytest.fixture
def triangle():
    positions = [[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3.0) / 2.0]]
    return NetworkGraph.from_edges(positions, [[0, 1], [1, 2], [0, 2]], lengths=[1.0, 1.0, 1.0])


def test_single_edge_ohm_law(segment):
    P = solve_kirchhoff(segment, [1.0], [1.0, -1.0])
    np.testing.assert_allclose(P, [0.5, -0.5], atol=1e-14)


def test_triangle_pressures(triangle):
    S = np.array([1.0, 0.0, -1.0])
    P = solve_kirchhoff(triangle, np.ones(3), S)
    np.testing.assert_allclose(P, [1.0 / 3.0, 0.0, -1.0 / 3.0], atol=1e-14)
    np.testing.assert_allclose(kirchhoff_residual(triangle, np.ones(3), S, P), 0.0, atol=1e-14)
    assert triangle.neighbors(0) == [1, 2]


def test_zero_source_gives_zero_pressure(triangle):
    assert np.all(solve_kirchhoff(triangle, np.ones(3), np.zeros(3)) == 0.0)


def test_unbalanced_source_is_rejected(segment):
    with pytest.raises(PreconditionError, match="balanced"):
        solve_kirchhoff(segment, [1.0], [1.0, 0.0])


def test_disconnected_sources_are_singular():
    graph = NetworkGraph.from_edges(
        [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]], [[0, 1], [1, 2], [2, 3]]
    )
    with pytest.raises(SingularSystemError) as info:
        solve_kirchhoff(graph, [1.0, 0.0, 1.0], [1.0, -1.0, 1.0, -1.0])
    assert info.value.component in ([0, 1], [2, 3])


def test_dead_component_gets_zero_pressure():
    graph = NetworkGraph.from_edges(
        [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]], [[0, 1], [1, 2], [2, 3]]
    )
    P = solve_kirchhoff(graph, [1.0, 0.0, 1.0], [1.0, -1.0, 0.0, 0.0])
    np.testing.assert_allclose(P, [0.5, -0.5, 0.0, 0.0], atol=1e-14)


def test_energy_of_single_edge(segment):
    law = MetabolicLaw(1.0)
    assert discrete_energy(segment, [1.0], [0.5, -0.5], law) == pytest.approx(2.0)
    assert discrete_energy(segment, [0.0], [1.0, 1.0], MetabolicLaw(2.0)) == 0.0


def test_rescaled_equals_plain_when_volume_matches_length(triangle):
    C = np.array([0.5, 1.0, 2.0])
    S = np.array([1.0, -0.25, -0.75])
    law = MetabolicLaw(1.5)
    P = solve_kirchhoff(triangle, C, S)
    np.testing.assert_allclose(solve_kirchhoff(triangle, C, S, rescaled=True), P)
    assert discrete_energy(triangle, C, P, law, rescaled=True) == pytest.approx(
        discrete_energy(triangle, C, P, law)
    )


def test_adaptation_fixed_point():
    graph = NetworkGraph.from_edges([[0.0, 0.0], [1.0, 0.0]], [[0, 1]])
    # ΔP = 2 so (ΔP/L)² = 4 = M'(4)
    C = adaptation_step(graph, [4.0], [8.0, -8.0], MetabolicLaw(2.0), 0.1)
    np.testing.assert_allclose(C, [4.0])


def test_adaptation_decay_and_clipping(segment):
    law = MetabolicLaw(2.0)
    np.testing.assert_allclose(adaptation_step(segment, [1.0], [0.0, 0.0], law, 0.1), [0.9])
    assert adaptation_step(segment, [0.05], [0.0, 0.0], law, 2.0)[0] == 0.0


def test_extinct_edges_for_sublinear_law(segment):
    law = MetabolicLaw(0.5)
    assert adaptation_step(segment, [0.0], [0.0, 0.0], law, 0.1)[0] == 0.0
    with pytest.raises(NonFiniteUpdateError) as info:
        adaptation_step(segment, [0.0], [0.0, 0.0], law, 0.1, freeze_extinct=False)
    assert info.value.edge == 0


def test_run_adaptation_without_source_decays():
    mesh = build_structured_triangulation(2, 2)
    graph = NetworkGraph.from_mesh(mesh)
    trajectory = run_adaptation(graph, np.ones(graph.n_edges), np.zeros(graph.n_vertices), MetabolicLaw(2.0), 0.05, 2.0)
    energies = np.array(trajectory.energies)
    assert np.all(np.diff(energies) < 0)
    assert energies[-1] < 0.5 * energies[0]
    assert trajectory.times[-1] == pytest.approx(2.0)
    assert trajectory.stability_bound == pytest.approx(1.0 / graph.lengths.max())


def test_run_adaptation_stationary_start():
    graph = NetworkGraph.from_edges([[0.0, 0.0], [1.0, 0.0]], [[0, 1]])
    trajectory = run_adaptation(graph, [4.0], [8.0, -8.0], MetabolicLaw(2.0), 0.1, 1.0)
    assert trajectory.stopped_early
    np.testing.assert_allclose(trajectory.conductivities[-1], [4.0])
    np.testing.assert_allclose(trajectory.energies, trajectory.energies[0])


def test_stability_bound_is_infinite_for_linear_law(segment):
    assert stability_bound(segment, [1.0], MetabolicLaw(1.0)) == math.inf


def test_projected_source_is_antisymmetric():
    mesh = build_structured_triangulation(4, 4)
    S = project_source(mesh, lambda x, y: x - 0.5)
    assert abs(S.sum()) < 1e-15
    mirrored = np.lexsort((mesh.vertices[:, 1], 1.0 - mesh.vertices[:, 0]))
    order = np.lexsort((mesh.vertices[:, 1], mesh.vertices[:, 0]))
    np.testing.assert_allclose(S[order], -S[mirrored], atol=1e-15)
    assert np.all(project_source(mesh, lambda x, y: 0.0 * x) == 0.0)


def test_rescaled_system_on_mesh_matches_diamond_weights():
    mesh = build_structured_triangulation(2, 2)
    diamonds = compute_diamonds(mesh)
    graph = NetworkGraph.from_mesh(mesh, diamonds)
    C = np.linspace(0.5, 1.5, graph.n_edges)
    weights = graph.edge_weights(C, rescaled=True)
    np.testing.assert_allclose(weights, C * diamonds.volumes / diamonds.lengths**2)
    S = project_source(mesh, lambda x, y: np.cos(np.pi * x))
    P = solve_kirchhoff(graph, C, S, rescaled=True)
    assert abs(P.mean()) < 1e-14
    np.testing.assert_allclose(kirchhoff_residual(graph, C, S, P, rescaled=True), 0.0, atol=1e-13)


def test_energy_is_invariant_under_pressure_gauge(triangle):
    C, P = [1.0, 2.0, 0.5], np.array([0.3, -0.1, -0.2])
    law = MetabolicLaw(1.5)
    for rescaled in (False, True):
        shifted = discrete_energy(triangle, C, P + 3.7, law, rescaled)
        assert shifted == pytest.approx(discrete_energy(triangle, C, P, law, rescaled), rel=1e-12)


def test_pressure_is_linear_in_the_source():
    mesh = build_structured_triangulation(4, 4)
    graph = NetworkGraph.from_mesh(mesh)
    C = np.linspace(0.2, 1.8, graph.n_edges)
    S = project_source(mesh, lambda x, y: np.cos(math.pi * x) * np.sin(math.pi * y))
    P = solve_kirchhoff(graph, C, S)
    np.testing.assert_allclose(solve_kirchhoff(graph, C, 2.5 * S), 2.5 * P, atol=1e-12 * np.abs(P).max())
    np.testing.assert_allclose(solve_kirchhoff(graph, C, -S), -P, atol=1e-12 * np.abs(P).max())


def test_adaptation_preserves_mirror_symmetry():
    n = 4
    mesh = build_structured_triangulation(n, n)
    graph = NetworkGraph.from_mesh(mesh, compute_diamonds(mesh))
    S = project_source(mesh, lambda x, y: np.cos(math.pi * x))

    row, column = np.divmod(np.arange(mesh.n_vertices), n + 1)
    mirror_vertex = row * (n + 1) + (n - column)
    index = {frozenset(map(int, e)): k for k, e in enumerate(graph.edges)}
    mirror_edge = np.array([index[frozenset(map(int, mirror_vertex[e]))] for e in graph.edges])

    trajectory = run_adaptation(graph, np.ones(graph.n_edges), S, MetabolicLaw(2.0), 0.05, 1.0, rescaled=True)
    C = trajectory.conductivities[-1]
    assert not np.allclose(C, 1.0)
    np.testing.assert_allclose(C[mirror_edge], C, rtol=1e-9, atol=1e-12)
