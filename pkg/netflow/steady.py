"""Steady states: 1D pointwise algebra, the γ > 1 p-Laplacian and the γ = 1 penalty path.

In one dimension with D = 0 the flux B(x) = -∫₀ˣ S fixes p' = B/(r + C), and a
steady conductance solves (r + C)²C^{γ-1} = c²B² pointwise. In two dimensions
the γ > 1 steady pressure minimizes

    𝓕[p] = ∫ (r/2)|∇p|² + ((γ-1)/(2γ)) c^{2/(γ-1)} |∇p|^{2γ/(γ-1)} - pS,

and for γ = 1 the constrained problem c|∇p| ≤ 1 is approached through

    𝓙_ε[p] = ∫ (r/2)|∇p|² + ((|∇p|² - 1/c²)₊)²/(4ε) - pS,

whose first variation gives the coefficient r + (|∇p|² - 1/c²)₊/ε. Both are
minimized by damped Newton with an Armijo line search.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import brentq

from .errors import ParameterError, PreconditionError, SolverError
from .fem import PressureField, as_load, assemble, pressure_gradients
from .linalg import gauge, solve_singular_spd
from .mesh import TriMesh
from .tensorfield import CellTensorField, MetabolicLaw, frobenius, metabolic_force, outer

logger = logging.getLogger(__name__)

TANGENT_RTOL = 1e-12
ROOT_RTOL = 4 * np.finfo(float).eps


@dataclass(frozen=True)
class Profile1D:
    """Values on a uniform grid of [0, 1]."""

    x: np.ndarray
    values: np.ndarray

    @classmethod
    def from_function(cls, f: Callable, n_points: int = 1024) -> Profile1D:
        x = np.linspace(0.0, 1.0, int(n_points) + 1)
        return cls(x, np.broadcast_to(np.asarray(f(x), dtype=float), x.shape).copy())


def flux_profile(S: Callable, n_points: int = 1024) -> Profile1D:
    """B(x) = -∫₀ˣ S by the trapezoid rule."""
    if n_points < 1:
        raise ParameterError("n_points must be at least 1")
    x = np.linspace(0.0, 1.0, int(n_points) + 1)
    values = np.broadcast_to(np.asarray(S(x), dtype=float), x.shape)
    B = -cumulative_trapezoid(values, x, initial=0.0)
    scale = max(float(np.max(np.abs(B))), np.finfo(float).tiny)
    if abs(B[-1]) > 1e-6 * scale:
        logger.warning("Source is not balanced on [0, 1]", extra={"B_end": float(B[-1])})
    return Profile1D(x, B)


def r_gamma(gamma: float, r: float) -> float:
    """Minimum of (r + C)²C^{γ-1} over C > 0 for γ in (0, 1)."""
    if not 0 < gamma < 1:
        raise ParameterError("the extinction threshold needs gamma in (0, 1)")
    return (2.0 / (1.0 + gamma)) ** 2 * ((1.0 - gamma) / (1.0 + gamma)) ** (gamma - 1.0) * r ** (gamma + 1.0)


@dataclass(frozen=True)
class RegimeReport:
    regime: np.ndarray
    threshold: float | None
    lower_root: np.ndarray
    upper_root: np.ndarray
    stability: np.ndarray
    total_permeability: np.ndarray
    pressure_gradient: np.ndarray


def _check_steady_parameters(gamma: float, r: float, c: float) -> None:
    if not gamma > 0:
        raise ParameterError("gamma must be positive")
    if not r > 0:
        raise ParameterError("r must be positive")
    if not c > 0:
        raise ParameterError("c must be positive")


def _lhs(C: float, gamma: float, r: float) -> float:
    return (r + C) ** 2 * C ** (gamma - 1.0)


def _root(target: float, gamma: float, r: float, lo: float, hi: float) -> float:
    f = lambda C: _lhs(C, gamma, r) - target  # noqa: E731
    if f(lo) == 0.0:
        return lo
    if f(hi) == 0.0:
        return hi
    return brentq(f, lo, hi, xtol=1e-15 * max(hi, 1e-300), rtol=ROOT_RTOL, maxiter=500)


def steady_1d(gamma: float, r: float, c: float, B: Profile1D) -> tuple[Profile1D, RegimeReport]:
    """Pointwise steady conductance and its regime.

    γ > 1: the unique root. γ = 1: (c|B| - r)⁺. γ in (0, 1): the stable upper
    root where two roots exist, the tangent root at the threshold and 0 below
    it; both roots are kept in the report.
    """
    _check_steady_parameters(gamma, r, c)
    target = c**2 * np.asarray(B.values, dtype=float) ** 2
    n = len(target)
    lower = np.full(n, np.nan)
    upper = np.full(n, np.nan)
    regime = np.empty(n, dtype=object)
    stability = np.empty(n, dtype=object)
    threshold = None

    if gamma > 1:
        for k, t in enumerate(target):
            upper[k] = 0.0 if t == 0 else _root(t, gamma, r, 0.0, t ** (1.0 / (gamma + 1.0)))
        C = upper.copy()
        regime[:] = "unique-root"
        stability[:] = "stable"
    elif gamma == 1:
        C = np.maximum(c * np.abs(B.values) - r, 0.0)
        active = C > 0
        regime[:] = np.where(active, "active", "inactive")
        stability[:] = "stable"
        upper = C.copy()
    else:
        threshold = r_gamma(gamma, r)
        c_star = (1.0 - gamma) * r / (1.0 + gamma)
        C = np.zeros(n)
        for k, t in enumerate(target):
            if abs(t - threshold) <= TANGENT_RTOL * threshold:
                lower[k] = upper[k] = C[k] = c_star
                regime[k] = "tangent"
                stability[k] = "stable from the right, unstable from the left"
            elif t > threshold:
                lo = min(c_star, (t / r**2) ** (1.0 / (gamma - 1.0)))
                hi = max(c_star, t ** (1.0 / (gamma + 1.0)))
                lower[k] = _root(t, gamma, r, lo, c_star)
                upper[k] = _root(t, gamma, r, c_star, hi)
                C[k] = upper[k]
                regime[k] = "two-roots"
                stability[k] = "lower unstable, upper stable"
            else:
                regime[k] = "extinction"
                stability[k] = "decays to zero"

    total = r + C
    report = RegimeReport(
        regime=regime,
        threshold=threshold,
        lower_root=lower,
        upper_root=upper,
        stability=stability,
        total_permeability=total,
        pressure_gradient=np.asarray(B.values) / total,
    )
    return Profile1D(B.x, C), report


@dataclass
class Flow1DResult:
    times: np.ndarray
    C: Profile1D
    extinction_time: np.ndarray
    max_rate: float

    @property
    def extinct(self) -> np.ndarray:
        return np.isfinite(self.extinction_time)


def flow_1d(
    gamma: float,
    r: float,
    c: float,
    B: Profile1D,
    C0,
    dt: float,
    t_end: float,
) -> Flow1DResult:
    """Explicit Euler for ∂C/∂t = c²B²/(r + C)² - C^{γ-1}, all points at once.

    C is clipped at 0; for γ < 1 a point that reaches 0 stays there and its
    extinction time is recorded. For γ = 1 the metabolic term at C = 0 takes
    the least element of [0, 1] that keeps C from leaving 0.
    """
    _check_steady_parameters(gamma, r, c)
    if not dt > 0:
        raise ParameterError("dt must be positive")
    C = np.array(np.broadcast_to(np.asarray(C0, dtype=float), B.values.shape))
    if np.any(C < 0):
        raise PreconditionError("initial conductance must be nonnegative")
    target = c**2 * np.asarray(B.values, dtype=float) ** 2
    extinct = (C == 0) & (gamma < 1)
    extinction_time = np.where(extinct, 0.0, np.inf)
    n_steps = int(math.ceil(t_end / dt - 1e-9))
    rate = np.zeros_like(C)
    for step in range(1, n_steps + 1):
        drive = target / (r + C) ** 2
        if gamma == 1:
            cost = np.where(C > 0, 1.0, np.minimum(drive, 1.0))
        else:
            cost = np.zeros_like(C)
            live = ~extinct
            cost[live] = C[live] ** (gamma - 1.0)
        rate = np.where(extinct, 0.0, drive - cost)
        C = np.maximum(C + dt * rate, 0.0)
        if gamma < 1:
            hit = (C == 0) & ~extinct
            extinction_time[hit] = step * dt
            extinct |= hit
    times = np.arange(n_steps + 1) * dt
    max_rate = float(np.max(np.abs(rate))) if n_steps else 0.0
    logger.debug(
        "1D flow finished",
        extra={"steps": n_steps, "extinct": int(np.isfinite(extinction_time).sum()), "max_rate": max_rate},
    )
    return Flow1DResult(times, Profile1D(B.x, C), extinction_time, max_rate)


def p_laplacian_flux_1d(B: float, r: float, c: float, gamma: float) -> float:
    """p' with (r + c^{2/(γ-1)}|p'|^{2/(γ-1)}) p' = B."""
    if not gamma > 1:
        raise ParameterError("the p-Laplacian needs gamma > 1")
    _check_steady_parameters(gamma, r, c)
    if B == 0:
        return 0.0
    scale = c ** (2.0 / (gamma - 1.0))
    f = lambda q: (r + scale * q ** (2.0 / (gamma - 1.0))) * q - abs(B)  # noqa: E731
    q = brentq(f, 0.0, abs(B) / r, xtol=1e-16, rtol=ROOT_RTOL, maxiter=500)
    return math.copysign(q, B)


@dataclass(frozen=True)
class _Integrand:
    """Ψ(s) with s = |∇p|², and the diffusivity k = 2Ψ' with its derivative."""

    psi: Callable
    k: Callable
    dk: Callable


def _p_laplacian_integrand(r: float, c: float, gamma: float) -> _Integrand:
    scale = c ** (2.0 / (gamma - 1.0))
    kappa = (gamma - 1.0) / (2.0 * gamma) * scale
    q = 1.0 / (gamma - 1.0)

    def dk(s):
        with np.errstate(divide="ignore"):
            return np.where(s > 0, scale * q * np.power(s, q - 1.0), 0.0 if q >= 1 else np.inf)

    return _Integrand(
        psi=lambda s: 0.5 * r * s + kappa * np.power(s, gamma / (gamma - 1.0)),
        k=lambda s: r + scale * np.power(s, q),
        dk=dk,
    )


def _penalty_integrand(r: float, c: float, eps: float) -> _Integrand:
    bound = 1.0 / c**2
    return _Integrand(
        psi=lambda s: 0.5 * r * s + np.maximum(s - bound, 0.0) ** 2 / (4.0 * eps),
        k=lambda s: r + np.maximum(s - bound, 0.0) / eps,
        dk=lambda s: np.where(s > bound, 1.0 / eps, 0.0),
    )


@dataclass(frozen=True)
class MinimizerStats:
    iterations: int
    gradient_norm: float
    functional: float


def _functional(mesh: TriMesh, integrand: _Integrand, load: np.ndarray, P: np.ndarray) -> float:
    g = pressure_gradients(mesh, P)
    return float(np.dot(mesh.areas, integrand.psi(np.sum(g * g, axis=1))) - np.dot(load, P))


def _gradient(mesh: TriMesh, integrand: _Integrand, load: np.ndarray, P: np.ndarray) -> np.ndarray:
    g = pressure_gradients(mesh, P)
    k = integrand.k(np.sum(g * g, axis=1))
    return assemble(mesh, None, k).matrix @ P - load


def _newton_direction(mesh, integrand, P, grad, label):
    g = pressure_gradients(mesh, P)
    s = np.sum(g * g, axis=1)
    dk = integrand.dk(s)
    curvature = np.where(s > 0, 2.0 * np.where(np.isfinite(dk), dk, 0.0), 0.0)[:, None] * outer(g)
    hessian = assemble(mesh, curvature, integrand.k(s)).matrix
    try:
        direction = solve_singular_spd(hessian, -grad, mesh.lumped_mass, label=label)
    except SolverError:
        logger.debug("Newton system failed; using steepest descent", extra={"solver": label})
        return None
    return direction


def _minimize(
    mesh: TriMesh,
    integrand: _Integrand,
    load: np.ndarray,
    initial,
    *,
    tol: float,
    max_iter: int,
    label: str,
) -> tuple[np.ndarray, MinimizerStats]:
    """Damped Newton with an Armijo backtracking search.

    Only steps that decrease the functional sufficiently are accepted. When the
    Newton step admits none, steepest descent is tried before giving up.
    Raises SolverError unless the gradient norm reaches `tol`.
    """
    P = gauge(np.zeros(mesh.n_vertices) if initial is None else np.array(initial, dtype=float), mesh.lumped_mass)
    J = _functional(mesh, integrand, load, P)
    grad = _gradient(mesh, integrand, load, P)
    gnorm = float(np.linalg.norm(grad))
    iteration = 0
    while gnorm > tol and iteration < max_iter:
        iteration += 1
        newton = _newton_direction(mesh, integrand, P, grad, label)
        candidates = [newton] if newton is not None else []
        candidates.append(-grad)
        for direction in candidates:
            step = _armijo_step(mesh, integrand, load, P, J, grad, direction)
            if step is not None:
                break
        else:
            logger.warning(
                "Line search found no descent step",
                extra={"solver": label, "iteration": iteration, "gradient_norm": gnorm},
            )
            break
        alpha, P, J = step
        grad = _gradient(mesh, integrand, load, P)
        gnorm = float(np.linalg.norm(grad))
        logger.debug(
            "Newton iteration",
            extra={"solver": label, "iteration": iteration, "gradient_norm": gnorm, "alpha": alpha},
        )

    if gnorm > tol:
        raise SolverError(
            f"{label}: minimization did not converge",
            {"gradient_norm": gnorm, "tolerance": tol, "iterations": iteration},
        )
    return P, MinimizerStats(iteration, gnorm, J)


def _armijo_step(mesh, integrand, load, P, J, grad, direction):
    slope = float(np.dot(grad, direction))
    if not slope < 0:
        return None
    alpha = 1.0
    for _ in range(60):
        trial = gauge(P + alpha * direction, mesh.lumped_mass)
        J_trial = _functional(mesh, integrand, load, trial)
        # sufficient decrease, up to rounding in the functional itself
        if J_trial <= J + 1e-4 * alpha * slope + 4.0 * np.finfo(float).eps * abs(J):
            return alpha, trial, J_trial
        alpha *= 0.5
    return None


def _pressure_field(mesh: TriMesh, P: np.ndarray, load: np.ndarray) -> PressureField:
    return PressureField(mesh, P, pressure_gradients(mesh, P), load)


def p_laplacian_solve(
    mesh: TriMesh,
    S,
    r: float,
    c: float,
    gamma: float,
    initial=None,
    *,
    max_iter: int = 200,
) -> PressureField:
    """Zero-mean minimizer of 𝓕, i.e. the weak solution of
    -∇·((r + c^{2/(γ-1)}|∇p|^{2/(γ-1)})∇p) = S."""
    if not gamma > 1:
        raise ParameterError("the p-Laplacian needs gamma > 1")
    _check_steady_parameters(gamma, r, c)
    load = as_load(mesh, S)
    tol = 1e-8 * (1.0 + float(np.linalg.norm(load)))
    P, stats = _minimize(
        mesh, _p_laplacian_integrand(r, c, gamma), load, initial,
        tol=tol, max_iter=max_iter, label="p-laplacian",
    )
    logger.info(
        "p-Laplacian solved",
        extra={"gamma": gamma, "iterations": stats.iterations, "gradient_norm": stats.gradient_norm},
    )
    return _pressure_field(mesh, P, load)


def p_laplacian_residual(pressure: PressureField, r: float, c: float, gamma: float) -> float:
    """‖∇𝓕‖₂ at the given pressure (the weak-form residual)."""
    integrand = _p_laplacian_integrand(r, c, gamma)
    return float(np.linalg.norm(_gradient(pressure.mesh, integrand, pressure.load, pressure.values)))


@dataclass(frozen=True)
class PenalizedSolution:
    pressure: PressureField
    eps: float
    c: float
    max_c_grad: float
    active: np.ndarray
    active_fraction: float
    multiplier: np.ndarray
    complementarity: float
    iterations: int


def penalized_solve(
    mesh: TriMesh,
    S,
    c: float,
    eps: float,
    r: float = 1.0,
    initial=None,
    *,
    active_tol: float = 1e-3,
    max_iter: int = 200,
) -> PenalizedSolution:
    """Minimize 𝓙_ε and report feasibility, the active set and the multiplier.

    The multiplier is a² = (|∇p|² - 1/c²)₊/ε per cell and the active set is
    {c|∇p| > 1 - active_tol}.
    """
    if not eps > 0:
        raise ParameterError("eps must be positive")
    _check_steady_parameters(1.0, r, c)
    load = as_load(mesh, S)
    tol = 1e-8 * (1.0 + float(np.linalg.norm(load)))
    P, stats = _minimize(
        mesh, _penalty_integrand(r, c, eps), load, initial,
        tol=tol, max_iter=max_iter, label="penalized",
    )
    pressure = _pressure_field(mesh, P, load)
    s = np.sum(pressure.gradients**2, axis=1)
    c_grad = c * np.sqrt(s)
    multiplier = np.maximum(s - 1.0 / c**2, 0.0) / eps
    active = c_grad > 1.0 - active_tol
    solution = PenalizedSolution(
        pressure=pressure,
        eps=eps,
        c=c,
        max_c_grad=float(c_grad.max()),
        active=active,
        active_fraction=float(mesh.areas[active].sum() / mesh.total_area),
        multiplier=multiplier,
        complementarity=float(np.max(multiplier * np.abs(c**2 * s - 1.0))),
        iterations=stats.iterations,
    )
    logger.info(
        "Penalized problem solved",
        extra={
            "eps": eps,
            "max_c_grad": solution.max_c_grad,
            "active_fraction": solution.active_fraction,
            "iterations": stats.iterations,
        },
    )
    return solution


@dataclass
class PenalizedSweep:
    eps: np.ndarray
    max_c_grad: np.ndarray
    active_fraction: np.ndarray
    complementarity: np.ndarray
    K: float
    monotone: bool
    solutions: list[PenalizedSolution] = field(default_factory=list, repr=False)

    @property
    def violation(self) -> np.ndarray:
        return self.max_c_grad - 1.0


def penalized_sweep(
    mesh: TriMesh, S, c: float, eps_values: Sequence[float], r: float = 1.0
) -> PenalizedSweep:
    """Solve for decreasing ε, each warm-started from the previous solution.

    K is the least-squares slope through the origin of the constraint
    violation max(c|∇p_ε|) - 1 against ε.
    """
    eps_sorted = sorted((float(e) for e in eps_values), reverse=True)
    if not eps_sorted:
        raise ParameterError("at least one eps value is required")
    solutions, initial = [], None
    for eps in eps_sorted:
        solution = penalized_solve(mesh, S, c, eps, r, initial)
        solutions.append(solution)
        initial = solution.pressure.values
    eps_arr = np.array(eps_sorted)
    max_c_grad = np.array([s.max_c_grad for s in solutions])
    violation = np.maximum(max_c_grad - 1.0, 0.0)
    K = float(np.dot(violation, eps_arr) / np.dot(eps_arr, eps_arr))
    monotone = bool(np.all(np.diff(max_c_grad) <= 1e-10))
    if not monotone:
        logger.warning("Constraint violation did not decrease with eps", extra={"max_c_grad": max_c_grad.tolist()})
    return PenalizedSweep(
        eps=eps_arr,
        max_c_grad=max_c_grad,
        active_fraction=np.array([s.active_fraction for s in solutions]),
        complementarity=np.array([s.complementarity for s in solutions]),
        K=K,
        monotone=monotone,
        solutions=solutions,
    )


def recover_tensor(
    pressure: PressureField, r: float, c: float, gamma: float, multiplier=None
) -> CellTensorField:
    """ℂ = g⁻¹(|∇p|²) ∇p⊗∇p per cell; zero on cells with ∇p = 0.

    γ > 1 uses g⁻¹(s) = c^{2/(γ-1)} s^{-(γ-2)/(γ-1)}. γ = 1 needs the penalty
    multiplier a² and uses ℂ = c²a² ∇p⊗∇p, which vanishes off the active set.
    """
    g = pressure.gradients
    s = np.sum(g * g, axis=1)
    if gamma > 1:
        scale = np.zeros_like(s)
        nonzero = s > 0
        scale[nonzero] = c ** (2.0 / (gamma - 1.0)) * s[nonzero] ** (-(gamma - 2.0) / (gamma - 1.0))
    elif gamma == 1:
        if multiplier is None:
            raise ParameterError("gamma = 1 recovery needs the penalty multiplier")
        scale = c**2 * np.asarray(multiplier, dtype=float)
    else:
        raise ParameterError("tensor recovery needs gamma >= 1")
    return CellTensorField(pressure.mesh, scale[:, None] * outer(g))


def stationary_residual(pressure: PressureField, C: CellTensorField, c: float, law: MetabolicLaw) -> np.ndarray:
    """|c²∇p⊗∇p - M'(|ℂ|)/|ℂ| ℂ| per cell."""
    force, _ = metabolic_force(C.values, law)
    return frobenius(c**2 * outer(pressure.gradients) - force)
