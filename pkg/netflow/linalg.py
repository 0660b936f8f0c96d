"""Solver for symmetric positive semidefinite systems whose kernel is the constants.

Both the Kirchhoff graph Laplacian and the P1 stiffness matrix are of this
kind. Small systems are solved densely; larger ones by Jacobi-preconditioned
conjugate gradients with the constant mode deflated from the residual at every
iteration. Either way the returned vector is gauged to zero weighted mean.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import SolverError

logger = logging.getLogger(__name__)

DIRECT_BELOW = 200


def gauge(x: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Shift x so that its (weighted) mean is zero."""
    if weights is None:
        return x - x.mean()
    return x - np.dot(weights, x) / weights.sum()


def _dense_solve(K: sp.spmatrix, b: np.ndarray, method: str) -> np.ndarray:
    A = K.toarray() if sp.issparse(K) else np.array(K, dtype=float)
    n = len(b)
    if method == "rank_one":
        # 1ᵀK = 0 and 1ᵀb = 0 force 1ᵀx = 0, so the shift leaves x unchanged
        return scipy.linalg.solve(A + np.ones((n, n)), b, assume_a="pos")
    x = np.zeros(n)
    x[1:] = scipy.linalg.solve(A[1:, 1:], b[1:], assume_a="pos")
    return x


def _projected_pcg(
    K: sp.spmatrix, b: np.ndarray, rtol: float, maxiter: int, label: str
) -> np.ndarray:
    diag = K.diagonal()
    inv_diag = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    x = np.zeros_like(b)
    r = b - b.mean()
    b_norm = np.linalg.norm(r)
    z = inv_diag * r
    z -= z.mean()
    d = z.copy()
    rz = np.dot(r, z)
    for iteration in range(1, maxiter + 1):
        Kd = K @ d
        dKd = np.dot(d, Kd)
        if dKd <= 0:
            raise SolverError(
                f"{label}: non-positive curvature in conjugate gradients",
                {"iterations": iteration, "curvature": float(dKd)},
            )
        alpha = rz / dKd
        x += alpha * d
        r -= alpha * Kd
        r -= r.mean()
        res = np.linalg.norm(r)
        if res <= rtol * b_norm:
            logger.debug(
                "Conjugate gradients converged",
                extra={"system": label, "iterations": iteration, "residual": res},
            )
            return x
        z = inv_diag * r
        z -= z.mean()
        rz_new = np.dot(r, z)
        d = z + (rz_new / rz) * d
        rz = rz_new
    raise SolverError(
        f"{label}: conjugate gradients did not converge",
        {"iterations": maxiter, "residual": float(res), "rhs_norm": float(b_norm)},
    )


def solve_singular_spd(
    K,
    b: np.ndarray,
    weights: np.ndarray | None = None,
    *,
    direct: str = "pin",
    rtol: float = 1e-12,
    check: float = 1e-10,
    maxiter: int | None = None,
    label: str = "system",
) -> np.ndarray:
    """Solve K x = b with K SPSD, ker K = constants and Σ b = 0.

    `direct` picks the dense method below `DIRECT_BELOW` unknowns: "pin" fixes
    the first unknown, "rank_one" solves (K + 11ᵀ) x = b. The result is gauged
    to weighted zero mean and its residual checked against `check`·‖b‖₂.
    """
    b = np.asarray(b, dtype=float)
    n = len(b)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros(n)
    if n < DIRECT_BELOW:
        x = _dense_solve(K, b, direct)
    else:
        K = sp.csr_matrix(K)
        x = _projected_pcg(K, b, rtol, maxiter or 20 * n, label)
    x = gauge(x, weights)
    residual = float(np.linalg.norm(K @ x - b))
    if not np.isfinite(residual) or residual > check * b_norm:
        raise SolverError(
            f"{label}: residual check failed",
            {"residual": residual, "rhs_norm": float(b_norm), "unknowns": n},
        )
    return x
