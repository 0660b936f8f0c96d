"""Time integration of the tensor gradient flow

    ∂ℂ/∂t - D²Δℂ - c²∇p⊗∇p + M'(|ℂ|)/|ℂ| ℂ = 0,   -∇·((r𝕀 + ℂ)∇p) = S.

ℂ is stored at the vertices as (a, b, c). A step treats the reaction terms
explicitly and the diffusion implicitly with lumped mass, which makes it the
lumped-mass L² gradient flow of

    E_h[ℂ] = D²/2 Σ_k w_k ℂ_kᵀK₀ℂ_k + c² bᵀP(ℂ) + Σ_v m_v M(|ℂ_v|),   w = (1, 2, 1).

Steps that would increase E_h are rejected and retried with half the step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import FlowError, ParameterError, PreconditionError
from .fem import PressureField, assemble, solve_poisson
from .mesh import TriMesh
from .network import project_source
from .tensorfield import (
    FROBENIUS_WEIGHTS,
    MetabolicLaw,
    NodalTensorField,
    eig,
    eigvals,
    frobenius,
    metabolic_force,
    outer,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelParams:
    r: float
    c2: float
    D: float
    law: MetabolicLaw
    dt: float
    t_end: float
    psd_tol: float = 1e-10
    snapshot_every: int = 10
    max_halvings: int = 20

    def __post_init__(self):
        if not self.r > 0:
            raise ParameterError("r must be positive")
        if not self.c2 > 0:
            raise ParameterError("c2 must be positive")
        if not self.D >= 0:
            raise ParameterError("D must be nonnegative")
        if not self.dt > 0:
            raise ParameterError("dt must be positive")
        if not self.t_end >= 0:
            raise ParameterError("t_end must be nonnegative")
        if not self.psd_tol >= 0:
            raise ParameterError("psd_tol must be nonnegative")


@dataclass(eq=False)
class FlowOperators:
    """Mesh-dependent matrices shared by every step of one flow."""

    mesh: TriMesh
    mass: np.ndarray
    stiffness: sp.csr_matrix
    transfer: sp.csr_matrix
    free: np.ndarray
    load: np.ndarray
    _factors: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, mesh: TriMesh, S, D: float) -> FlowOperators:
        mass = mesh.lumped_mass
        tri = mesh.triangles
        transfer = sp.coo_matrix(
            (
                np.repeat(mesh.areas / 3.0, 3) / mass[tri.ravel()],
                (tri.ravel(), np.repeat(np.arange(mesh.n_triangles), 3)),
            ),
            shape=(mesh.n_vertices, mesh.n_triangles),
        ).tocsr()
        free = ~mesh.boundary_vertex if D > 0 else np.ones(mesh.n_vertices, dtype=bool)
        return cls(
            mesh=mesh,
            mass=mass,
            stiffness=assemble(mesh, None, 1.0).matrix,
            transfer=transfer,
            free=free,
            load=S if isinstance(S, np.ndarray) else project_source(mesh, S),
        )

    def diffusion_factor(self, dt: float, D: float):
        key = float(dt)
        if key not in self._factors:
            index = np.flatnonzero(self.free)
            A = sp.diags(self.mass) + (dt * D**2) * self.stiffness
            self._factors[key] = splu(sp.csc_matrix(A[index][:, index]))
        return self._factors[key]


@dataclass(frozen=True, eq=False)
class FlowState:
    t: float
    C: NodalTensorField
    pressure: PressureField
    params: ModelParams
    energy: float
    operators: FlowOperators = field(repr=False)


@dataclass(frozen=True)
class FlowEnergy:
    dirichlet: float
    pumping: float
    metabolic: float

    @property
    def total(self) -> float:
        return self.dirichlet + self.pumping + self.metabolic


def _pressure(ops: FlowOperators, C: np.ndarray, params: ModelParams) -> PressureField:
    cells = C[ops.mesh.triangles].mean(axis=1)
    return solve_poisson(ops.mesh, cells, params.r, ops.load)


def flow_energy(
    ops: FlowOperators, C: np.ndarray, pressure: PressureField, params: ModelParams
) -> FlowEnergy:
    """Dirichlet term from P1 gradients, pumping via ∫ S p, metabolic by nodal quadrature."""
    KC = ops.stiffness @ C
    dirichlet = 0.5 * params.D**2 * float(np.sum(FROBENIUS_WEIGHTS * np.sum(C * KC, axis=0)))
    pumping = params.c2 * float(np.dot(pressure.load, pressure.values))
    metabolic = float(np.dot(ops.mass, params.law.M(frobenius(C))))
    return FlowEnergy(dirichlet, pumping, metabolic)


def activation(ops: FlowOperators, pressure: PressureField) -> np.ndarray:
    """Cell ∇p⊗∇p transferred to vertices with weights area(T)/(3 m_v)."""
    return ops.transfer @ outer(pressure.gradients)


def initial_state(
    mesh: TriMesh, C0, params: ModelParams, S, operators: FlowOperators | None = None
) -> FlowState:
    values = C0.values if isinstance(C0, NodalTensorField) else np.asarray(C0, dtype=float)
    values = np.array(values, dtype=float)
    if values.shape != (mesh.n_vertices, 3):
        raise PreconditionError("initial tensor must have one entry per vertex")
    lam_min = float(eigvals(values)[:, 1].min())
    if lam_min < -params.psd_tol:
        raise PreconditionError(
            f"initial tensor is not positive semidefinite (smallest eigenvalue {lam_min:.3g})"
        )
    if params.D > 0 and np.any(values[mesh.boundary_vertex] != 0.0):
        raise PreconditionError("initial tensor must vanish on the boundary when D > 0")
    ops = operators or FlowOperators.build(mesh, S, params.D)
    C = NodalTensorField(mesh, values, dirichlet=params.D > 0)
    pressure = _pressure(ops, values, params)
    energy = flow_energy(ops, values, pressure, params).total
    return FlowState(t=0.0, C=C, pressure=pressure, params=params, energy=energy, operators=ops)


@dataclass
class StepReport:
    clamped: int = 0
    breaches: int = 0
    frozen: int = 0


def _enforce_psd(C: np.ndarray, psd_tol: float, report: StepReport) -> np.ndarray:
    lam, vectors = eig(C)
    small = (lam[:, 1] < 0.0) & (lam[:, 1] >= -psd_tol)
    if small.any():
        v = vectors[small, :, 1]
        C = C.copy()
        C[small] -= lam[small, 1, None] * outer(v)
        report.clamped += int(small.sum())
    breach = lam[:, 1] < -10.0 * psd_tol
    if breach.any():
        report.breaches += int(breach.sum())
        logger.warning(
            "Tensor lost positive semidefiniteness",
            extra={"vertices": int(breach.sum()), "min_eig": float(lam[:, 1].min())},
        )
    return C


def flow_step(state: FlowState, dt: float | None = None, report: StepReport | None = None) -> FlowState:
    """One semi-implicit step: explicit reaction, implicit diffusion."""
    params, ops = state.params, state.operators
    dt = params.dt if dt is None else dt
    report = report if report is not None else StepReport()
    C = state.C.values
    force, frozen = metabolic_force(C, params.law)
    report.frozen += int(frozen.sum())
    R = C + dt * (params.c2 * activation(ops, state.pressure) - force)
    if params.D > 0:
        X = np.zeros_like(R)
        rhs = ops.mass[ops.free, None] * R[ops.free]
        X[ops.free] = ops.diffusion_factor(dt, params.D).solve(rhs)
    else:
        X = R
    X[frozen] = 0.0
    X = _enforce_psd(X, params.psd_tol, report)
    pressure = _pressure(ops, X, params)
    energy = flow_energy(ops, X, pressure, params).total
    return FlowState(
        t=state.t + dt,
        C=NodalTensorField(ops.mesh, X, dirichlet=params.D > 0),
        pressure=pressure,
        params=params,
        energy=energy,
        operators=ops,
    )


def dissipation(ops: FlowOperators, before: np.ndarray, after: np.ndarray, dt: float) -> float:
    """‖ΔC/dt‖²_{L²}·dt with the lumped mass."""
    delta = after - before
    return float(np.dot(ops.mass, delta**2 @ FROBENIUS_WEIGHTS) / dt)


@dataclass
class FlowTrajectory:
    times: list[float]
    energies: list[float]
    dissipation_cum: list[float]
    min_eig: list[float]
    dts: list[float]
    snapshots: list[tuple[float, np.ndarray]]
    breaches: int = 0
    clamped: int = 0
    halvings: int = 0
    steady: bool = False
    energy_inequality: bool = True
    final: FlowState | None = field(default=None, repr=False)

    @property
    def dissipation_gap(self) -> float:
        """|E(0) - E(T) - Σ‖ΔC/dt‖²dt|."""
        return abs(self.energies[0] - self.energies[-1] - self.dissipation_cum[-1])


def _min_cell_eig(C: NodalTensorField) -> float:
    return C.to_cells().min_eigenvalue()


def run_flow(mesh: TriMesh, C0, params: ModelParams, S, *, steady_tol: float | None = None) -> FlowTrajectory:
    """Integrate to `params.t_end` with energy-based step rejection.

    A step that raises the energy by more than round-off is retried with half
    the step, at most `params.max_halvings` times; the next step starts again
    from `params.dt`. With `steady_tol` the run stops once ‖ΔC/dt‖∞ drops below it.
    """
    state = initial_state(mesh, C0, params, S)
    trajectory = FlowTrajectory(
        times=[0.0],
        energies=[state.energy],
        dissipation_cum=[0.0],
        min_eig=[_min_cell_eig(state.C)],
        dts=[0.0],
        snapshots=[(0.0, state.C.values.copy())],
    )
    step = 0
    while state.t < params.t_end * (1.0 - 1e-12):
        dt = min(params.dt, params.t_end - state.t)
        for halving in range(params.max_halvings + 1):
            report = StepReport()
            candidate = flow_step(state, dt, report)
            slack = 1e-12 * (1.0 + abs(state.energy))
            if candidate.energy <= state.energy + slack:
                break
            logger.debug(
                "Rejected step",
                extra={"t": state.t, "dt": dt, "increase": candidate.energy - state.energy},
            )
            dt *= 0.5
            trajectory.halvings += 1
        else:
            raise FlowError(
                "energy kept increasing after the maximal number of step halvings",
                {"t": state.t, "dt": dt, "halvings": params.max_halvings},
            )
        step += 1
        rate = float(np.max(np.abs(candidate.C.values - state.C.values))) / dt
        trajectory.dissipation_cum.append(
            trajectory.dissipation_cum[-1] + dissipation(state.operators, state.C.values, candidate.C.values, dt)
        )
        state = candidate
        trajectory.times.append(state.t)
        trajectory.energies.append(state.energy)
        trajectory.min_eig.append(_min_cell_eig(state.C))
        trajectory.dts.append(dt)
        trajectory.breaches += report.breaches
        trajectory.clamped += report.clamped
        if params.snapshot_every > 0 and step % params.snapshot_every == 0:
            trajectory.snapshots.append((state.t, state.C.values.copy()))
        logger.debug(
            "Flow step",
            extra={"step": step, "t": state.t, "energy": state.energy, "dt": dt, "rate": rate},
        )
        if steady_tol is not None and rate < steady_tol:
            trajectory.steady = True
            logger.info("Flow reached a steady state", extra={"t": state.t, "rate": rate})
            break

    if trajectory.snapshots[-1][0] != state.t:
        trajectory.snapshots.append((state.t, state.C.values.copy()))
    E0, ET, diss = trajectory.energies[0], trajectory.energies[-1], trajectory.dissipation_cum[-1]
    tolerance = 10.0 * params.dt * max(abs(E0), diss)
    trajectory.energy_inequality = ET + diss <= E0 + tolerance
    if not trajectory.energy_inequality:
        logger.warning(
            "Energy inequality slack exceeded",
            extra={"E0": E0, "ET": ET, "dissipation": diss, "tolerance": tolerance},
        )
    trajectory.final = state
    logger.info(
        "Flow finished",
        extra={
            "t": state.t,
            "energy": ET,
            "dissipation": diss,
            "halvings": trajectory.halvings,
            "breaches": trajectory.breaches,
        },
    )
    return trajectory


@dataclass(frozen=True)
class ConvexityReport:
    status: str
    violated_at: float | None
    remark: str

    @property
    def convex(self) -> bool:
        return self.status != "violated"


def power_law_remark(gamma: float, D: float) -> str:
    if D > 0:
        return "strictly convex" if gamma >= 1 else "violated"
    if gamma > 1:
        return "strictly convex"
    if gamma == 1:
        return "convex"
    return "violated"


def check_convexity_conditions(
    law: MetabolicLaw, D: float, c_omega: float = 1.0 / (2.0 * math.pi**2), s_grid=None
) -> ConvexityReport:
    """Grid check of the convexity conditions on the metabolic law.

    Where M''(s) ≥ M'(s)/s the condition is M'(s)/s ≥ -D²C_Ω, elsewhere
    M''(s) ≥ -D²C_Ω; strict inequalities everywhere give strict convexity.
    """
    s = np.logspace(-6, 6, 1201) if s_grid is None else np.asarray(s_grid, dtype=float)
    if s.size == 0 or np.any(s <= 0):
        raise ParameterError("s-grid must be positive")
    if D < 0 or c_omega < 0:
        raise ParameterError("D and c_omega must be nonnegative")
    bound = -(D**2) * c_omega
    second = np.broadcast_to(law.d2M(s), s.shape)
    ratio = np.broadcast_to(law.m(s), s.shape)
    lhs = np.where(second >= ratio, ratio, second)
    violated = lhs < bound
    remark = power_law_remark(law.gamma, D)
    if violated.any():
        at = float(s[np.flatnonzero(violated)[0]])
        logger.info("Convexity condition violated", extra={"s": at, "gamma": law.gamma, "D": D})
        return ConvexityReport("violated", at, remark)
    status = "strictly convex" if np.all(lhs > bound) else "convex"
    return ConvexityReport(status, None, remark)
