"""Command pipelines. Each writes its artifacts under `out` and returns a summary."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import NETFLOW_THREADS, RunConfig
from .errors import AcceptanceError
from .fem import convergence_study, verify_prop1, verify_prop2
from .helper import SeededGenerator, write_csv
from .mesh import TriMesh, build_structured_triangulation, compute_diamonds, load_mesh
from .network import NetworkGraph, project_source, run_adaptation
from .pdeflow import ModelParams, check_convexity_conditions, run_flow
from .steady import (
    flow_1d,
    flux_profile,
    p_laplacian_residual,
    p_laplacian_solve,
    penalized_sweep,
    recover_tensor,
    stationary_residual,
    steady_1d,
)
from .tensorfield import MetabolicLaw, tensor_arrays, write_vtk

logger = logging.getLogger(__name__)

PROP1_TOL = 1e-8
PROP2_TOL = 1e-10
VERIFY_GAMMAS = (1.0, 1.5, 2.0)


def _dipole(x, y=None):
    y = 0.5 if y is None else y
    width = 0.1**2
    return np.exp(-((x - 0.25) ** 2 + (y - 0.5) ** 2) / width) - np.exp(
        -((x - 0.75) ** 2 + (y - 0.5) ** 2) / width
    )


def _cosine(x, y=None):
    return np.cos(np.pi * x)


def _sine_flux(x, y=None):
    # B(x) = sin(πx)
    return -np.pi * np.cos(np.pi * x)


SOURCE_FUNCTIONS = {"dipole": _dipole, "cosine": _cosine, "sine-flux": _sine_flux}


def smooth_permeability(x, y):
    """A fixed positive definite tensor field used by the convergence study."""
    a = 0.5 + 0.25 * np.sin(np.pi * x) * np.sin(np.pi * y)
    b = 0.1 * x * y
    c = 0.5 + 0.25 * np.cos(np.pi * x) * np.cos(np.pi * y)
    return np.stack([a, b, c], axis=-1)


def build_mesh(cfg: RunConfig) -> TriMesh:
    if cfg.mesh:
        return load_mesh(cfg.mesh)
    return build_structured_triangulation(cfg.nx, cfg.ny)


def bump_tensor(mesh: TriMesh) -> np.ndarray:
    """φ𝕀 with φ = 16ξ(1-ξ)η(1-η) in bounding-box coordinates, zero on the boundary."""
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    xi, eta = ((mesh.vertices - lo) / (hi - lo)).T
    phi = 16.0 * xi * (1.0 - xi) * eta * (1.0 - eta)
    phi[mesh.boundary_vertex] = 0.0
    return np.column_stack([phi, np.zeros_like(phi), phi])


def run_discrete(cfg: RunConfig, out: Path, artifacts: list) -> dict:
    mesh = build_mesh(cfg)
    graph = NetworkGraph.from_mesh(mesh)
    S = project_source(mesh, SOURCE_FUNCTIONS[cfg.source])
    law = MetabolicLaw(cfg.gamma)
    trajectory = run_adaptation(graph, np.ones(graph.n_edges), S, law, cfg.dt, cfg.t_end)
    artifacts.append(
        write_csv(
            out / "trajectory.csv",
            {
                "t": trajectory.times,
                "energy": trajectory.energies,
                "max_dC": trajectory.max_dC,
                "min_C": trajectory.min_C,
            },
        )
    )
    C = trajectory.conductivities[-1]
    artifacts.append(
        write_csv(
            out / "conductivity.csv",
            {"edge_i": graph.edges[:, 0], "edge_j": graph.edges[:, 1], "C": C},
        )
    )
    return {
        "edges": graph.n_edges,
        "final_energy": trajectory.energies[-1],
        "stability_bound": trajectory.stability_bound,
        "stopped_early": trajectory.stopped_early,
    }


def _verify_instance(args):
    mesh, C, gamma, S = args
    diamonds = compute_diamonds(mesh)
    prop1 = verify_prop1(mesh, diamonds, C, S)
    prop2 = verify_prop2(mesh, diamonds, C, S, MetabolicLaw(gamma))
    return prop1, prop2


def run_verify(cfg: RunConfig, out: Path, artifacts: list) -> dict:
    """Check both discrete identities on seeded random conductivities.

    Instances alternate between the configured mesh and its uniform refinement
    and cycle through γ in (1, 1.5, 2).
    """
    coarse = build_mesh(cfg)
    fine = build_structured_triangulation(2 * cfg.nx, 2 * cfg.ny) if not cfg.mesh else coarse
    generator = SeededGenerator(cfg.seed)
    source = SOURCE_FUNCTIONS[cfg.source]
    jobs, rows = [], []
    for k in range(cfg.instances):
        mesh = coarse if k % 2 == 0 else fine
        gamma = VERIFY_GAMMAS[k % len(VERIFY_GAMMAS)]
        C = generator.uniform(0.1, 2.0, mesh.n_edges)
        jobs.append((mesh, C, gamma, source))
        rows.append((k, mesh.n_vertices, mesh.n_triangles, gamma))

    workers = max(1, min(NETFLOW_THREADS, len(jobs)))
    logger.info("Verifying identities", extra={"instances": len(jobs), "workers": workers})
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_verify_instance, jobs))

    prop1 = np.array([p1.max_relative for p1, _ in results])
    prop2 = np.array([p2.gap for _, p2 in results])
    columns = {
        "instance": [row[0] for row in rows],
        "vertices": [row[1] for row in rows],
        "triangles": [row[2] for row in rows],
        "gamma": [row[3] for row in rows],
    }
    artifacts.append(
        write_csv(out / "prop1_residual.csv", {**columns, "max_relative": prop1, "passed": prop1 <= PROP1_TOL})
    )
    artifacts.append(
        write_csv(
            out / "prop2_gap.csv",
            {
                **columns,
                "discrete": [p2.discrete for _, p2 in results],
                "semi_discrete": [p2.semi_discrete for _, p2 in results],
                "gap": prop2,
                "passed": prop2 <= PROP2_TOL,
            },
        )
    )

    laws = [(1.0, 0.0), (2.0, 0.0), (0.5, 0.0), (cfg.gamma, cfg.D)]
    reports = [check_convexity_conditions(MetabolicLaw(g), d, cfg.c_omega) for g, d in laws]
    artifacts.append(
        write_csv(
            out / "convexity.csv",
            {
                "gamma": [g for g, _ in laws],
                "D": [d for _, d in laws],
                "status": [rep.status for rep in reports],
                "remark": [rep.remark for rep in reports],
            },
        )
    )

    summary = {"max_prop1_residual": float(prop1.max()), "max_prop2_gap": float(prop2.max())}
    failed = int(np.sum(prop1 > PROP1_TOL) + np.sum(prop2 > PROP2_TOL))
    if failed:
        raise AcceptanceError(f"{failed} identity checks exceeded their tolerance: {summary}")
    return summary


def run_flow_command(cfg: RunConfig, out: Path, artifacts: list) -> dict:
    mesh = build_mesh(cfg)
    params = ModelParams(
        r=cfg.r,
        c2=cfg.c2,
        D=cfg.D,
        law=MetabolicLaw(cfg.gamma),
        dt=cfg.dt,
        t_end=cfg.t_end,
        psd_tol=cfg.psd_tol,
        snapshot_every=cfg.snapshot_every,
    )
    trajectory = run_flow(mesh, bump_tensor(mesh), params, SOURCE_FUNCTIONS[cfg.source])
    artifacts.append(
        write_csv(
            out / "flow_log.csv",
            {
                "t": trajectory.times,
                "E_D": trajectory.energies,
                "dissipation_cum": trajectory.dissipation_cum,
                "min_eig": trajectory.min_eig,
                "dt": trajectory.dts,
            },
        )
    )
    for k, (t, values) in enumerate(trajectory.snapshots):
        point_data = tensor_arrays("C", values)
        cell_data = {}
        if k == len(trajectory.snapshots) - 1:
            point_data["p"] = trajectory.final.pressure.values
            cell_data["grad_p"] = trajectory.final.pressure.gradients
        artifacts.append(write_vtk(out / f"flow_{k:04d}.vtk", mesh, point_data=point_data, cell_data=cell_data))
    return {
        "final_time": trajectory.times[-1],
        "energy_initial": trajectory.energies[0],
        "energy_final": trajectory.energies[-1],
        "dissipation_gap": trajectory.dissipation_gap,
        "energy_inequality": trajectory.energy_inequality,
        "min_eig": float(min(trajectory.min_eig)),
        "psd_breaches": trajectory.breaches,
        "halvings": trajectory.halvings,
    }


def run_steady1d(cfg: RunConfig, out: Path, artifacts: list) -> dict:
    B = flux_profile(SOURCE_FUNCTIONS[cfg.source], cfg.n_points)
    C, report = steady_1d(cfg.gamma, cfg.r, cfg.c, B)
    # pointwise gradient flow from C = 1 up to t_end
    flow = flow_1d(cfg.gamma, cfg.r, cfg.c, B, 1.0, cfg.dt, cfg.t_end)
    artifacts.append(
        write_csv(
            out / "steady1d.csv",
            {"x": B.x, "B": B.values, "C": C.values, "regime": report.regime, "C_flow": flow.C.values},
        )
    )
    regimes, counts = np.unique(report.regime.astype(str), return_counts=True)
    return {
        "threshold": report.threshold,
        "max_C": float(C.values.max()),
        "flow_t_end": float(flow.times[-1]),
        "flow_max_rate": flow.max_rate,
        "flow_gap": float(np.max(np.abs(flow.C.values - C.values))),
        "flow_extinct": int(flow.extinct.sum()),
        "regimes": dict(zip(regimes.tolist(), counts.tolist())),
    }


def run_steady_plap(cfg: RunConfig, out: Path, artifacts: list) -> dict:
    mesh = build_mesh(cfg)
    pressure = p_laplacian_solve(mesh, SOURCE_FUNCTIONS[cfg.source], cfg.r, cfg.c, cfg.gamma)
    C = recover_tensor(pressure, cfg.r, cfg.c, cfg.gamma)
    residual = stationary_residual(pressure, C, cfg.c, MetabolicLaw(cfg.gamma))
    weak = p_laplacian_residual(pressure, cfg.r, cfg.c, cfg.gamma)
    artifacts.append(
        write_vtk(
            out / "steady_plap.vtk",
            mesh,
            point_data={"p": pressure.values},
            cell_data={**tensor_arrays("C", C.values), "grad_p": pressure.gradients},
        )
    )
    artifacts.append(
        write_csv(
            out / "plap_summary.csv",
            {
                "gamma": [cfg.gamma],
                "weak_residual": [weak],
                "max_stationary_residual": [float(residual.max())],
                "max_C_norm": [float(C.frobenius().max())],
            },
        )
    )
    return {"weak_residual": weak, "max_stationary_residual": float(residual.max())}


def run_steady_penalized(cfg: RunConfig, out: Path, artifacts: list) -> dict:
    mesh = build_mesh(cfg)
    sweep = penalized_sweep(mesh, SOURCE_FUNCTIONS[cfg.source], cfg.c, cfg.eps, cfg.r)
    artifacts.append(
        write_csv(
            out / "penalized_sweep.csv",
            {"eps": sweep.eps, "max_c_grad_p": sweep.max_c_grad, "active_fraction": sweep.active_fraction},
        )
    )
    last = sweep.solutions[-1]
    C = recover_tensor(last.pressure, cfg.r, cfg.c, 1.0, last.multiplier)
    artifacts.append(
        write_vtk(
            out / "steady_penalized.vtk",
            mesh,
            point_data={"p": last.pressure.values},
            cell_data={**tensor_arrays("C", C.values), "active": last.active.astype(np.int32)},
        )
    )
    return {"K": sweep.K, "monotone": sweep.monotone}


def run_converge(cfg: RunConfig, out: Path, artifacts: list) -> dict:
    resolutions = [(cfg.nx * 2**k, cfg.ny * 2**k) for k in range(cfg.levels)]
    table = convergence_study(
        resolutions,
        perm=smooth_permeability,
        r=cfg.r,
        S=SOURCE_FUNCTIONS[cfg.source],
        law=MetabolicLaw(cfg.gamma),
    )
    artifacts.append(
        write_csv(out / "convergence.csv", {"h": table.h, "gap": table.gaps, "order_running": table.order_running})
    )
    return {
        "order": None if math.isnan(table.order) else table.order,
        "r_squared": None if math.isnan(table.r_squared) else table.r_squared,
        "reference_energy": table.reference,
    }


WORKFLOWS = {
    "discrete": run_discrete,
    "verify": run_verify,
    "flow": run_flow_command,
    "steady1d": run_steady1d,
    "steady-plap": run_steady_plap,
    "steady-penalized": run_steady_penalized,
    "converge": run_converge,
}
