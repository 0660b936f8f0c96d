import numpy as np
import pytest

from netflow.errors import SolverError
from netflow.fem import assemble
from netflow.linalg import DIRECT_BELOW, gauge, solve_singular_spd
from netflow.mesh import build_structured_triangulation
from netflow.network import project_source


def laplacian_system(n):
    mesh = build_structured_triangulation(n, n)
    K = assemble(mesh, None, 1.0).matrix
    b = project_source(mesh, lambda x, y: np.cos(np.pi * x) * np.cos(2 * np.pi * y))
    return mesh, K, b


@pytest.mark.parametrize("direct", ["pin", "rank_one"])
def test_dense_paths_agree(direct):
    mesh, K, b = laplacian_system(6)
    assert mesh.n_vertices < DIRECT_BELOW
    x = solve_singular_spd(K, b, mesh.lumped_mass, direct=direct)
    assert abs(np.dot(mesh.lumped_mass, x)) < 1e-13
    assert np.linalg.norm(K @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_conjugate_gradients_match_dense_solution():
    mesh, K, b = laplacian_system(16)
    assert mesh.n_vertices >= DIRECT_BELOW
    x = solve_singular_spd(K, b, label="cg")
    dense = np.linalg.lstsq(K.toarray(), b, rcond=None)[0]
    np.testing.assert_allclose(x, gauge(dense), atol=1e-9)


def test_zero_rhs_short_circuits():
    _, K, b = laplacian_system(3)
    assert np.all(solve_singular_spd(K, np.zeros_like(b)) == 0.0)


def test_inconsistent_rhs_fails_residual_check():
    _, K, b = laplacian_system(3)
    b = b.copy()
    b[0] += 1.0
    with pytest.raises(SolverError) as info:
        solve_singular_spd(K, b, label="poisson")
    assert "residual" in info.value.report
