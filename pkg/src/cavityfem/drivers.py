"""Experiment orchestration shared by the command-line entry points and
the acceptance tests: meshing studies, single solves with load
continuation, self-convergence studies, branch sweeps and inf-sup scans."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .analysis import (BifurcationRow, ConvergenceRow, bifurcation_report,
                       cavity_volumes, constraint_functional_max,
                       det_error_norms, energy_rate, field_diff_norms,
                       fit_order, infsup_constant, rate_table)
from .assembly import assemble_energy
from .config import ExperimentConfig
from .errors import ConfigError, SolverError
from .fem import AffineBoundary, FemSpace, identity_state
from .generate import build_mesh, ring_schedule
from .mesh import Mesh, validate_mesh
from .solver import SweepPoint, continuation_sweep, newton_solve

__all__ = ["mesh_study", "solve_study", "converge_study", "sweep_study",
           "infsup_study", "build_space"]


def _mesh_for(cfg: ExperimentConfig, h: float) -> Mesh:
    params = replace(cfg.mesh, h=h)
    return build_mesh(cfg.defects, params, s=cfg.material.s,
                      domain_radius=cfg.domain_radius)


def build_space(cfg: ExperimentConfig, h: float | None = None):
    mesh = _mesh_for(cfg, cfg.mesh.h if h is None else h)
    return mesh, FemSpace(mesh, cfg.bc)


# ---------------------------------------------------------------------------

def mesh_study(cfg: ExperimentConfig):
    """Meshes and layer statistics across the configured h values."""
    hs = cfg.run.h_values or [cfg.mesh.h]
    out = []
    for h in hs:
        mesh = _mesh_for(cfg, h)
        params = replace(cfg.mesh, h=h)
        report = validate_mesh(mesh, params, s=cfg.material.s)
        stats = []
        for k, layers in enumerate(mesh.layers):
            taus = [l.thickness for l in layers]
            ns = [l.count for l in layers]
            stats.append({
                "defect": k, "h": h, "min_tau": min(taus), "max_tau": max(taus),
                "layers": len(layers), "min_n": min(ns), "max_n": max(ns),
                "conforming": sum(1 for l in layers if l.kind == "conforming"),
            })
        out.append({"h": h, "mesh": mesh, "report": report, "layer_stats": stats})
    return out


def _continuation_values(cfg: ExperimentConfig, target: float):
    n = max(1, cfg.run.continuation_steps)
    if cfg.bc_is_uniform:
        start = 1.0
    else:
        start = 0.0
    if abs(target - start) < 1e-15:
        return [target]
    return list(np.linspace(start, target, n + 1))


def solve_study(cfg: ExperimentConfig, h: float | None = None):
    """Mesh + solve at the target boundary data via load continuation.

    Returns (mesh, space, final SweepPoint, all sweep points)."""
    mesh, space = build_space(cfg, h)
    family, target = cfg.boundary_family()
    values = _continuation_values(cfg, target)
    pts = continuation_sweep(space, cfg.material, family, values, cfg.newton,
                             mode=cfg.run.mode,
                             perturb_index=cfg.run.perturb_index,
                             perturb_magnitude=cfg.run.perturb_magnitude)
    final = pts[-1]
    if not final.converged:
        raise SolverError(
            f"continuation failed at value {final.value}: {final.message}")
    space.set_boundary(family(final.value))
    return mesh, space, final, pts


def solve_summary(cfg: ExperimentConfig, space, point: SweepPoint) -> dict:
    state = point.state
    l1, l2 = det_error_norms(space, state)
    vols = cavity_volumes(space, state)
    return {
        "energy": assemble_energy(space, state, cfg.material),
        "det_err_l1": l1,
        "det_err_l2": l2,
        "cavity_volumes": vols,
        "constraint_max": constraint_functional_max(space, state),
        "iterations": point.trace.iterations if point.trace else None,
        "final_residual": point.trace.residuals[-1] if point.trace else None,
        "min_det": min(point.trace.min_dets) if point.trace else None,
    }


def converge_study(cfg: ExperimentConfig, with_infsup: bool = False):
    """Solves across the h grid, norms against the finest solve, fitted
    orders.  Needs at least three h values (finest is the reference)."""
    hs = sorted(cfg.run.h_values, reverse=True)
    if len(hs) < 3:
        raise ConfigError("a convergence study needs at least 3 h values "
                          "(the finest is the reference)")
    solves = []
    for h in hs:
        mesh, space, final, _ = solve_study(cfg, h)
        solves.append((h, mesh, space, final))
    _, _, space_ref, final_ref = solves[-1]
    rows = []
    for h, mesh, space, final in solves:
        l1, l2 = det_error_norms(space, final.state)
        if space is space_ref:
            w1s, pl2 = 0.0, 0.0
        else:
            w1s, pl2 = field_diff_norms(space, final.state,
                                        space_ref, final_ref.state,
                                        s=cfg.material.s)
        beta = infsup_constant(space, final.state) if with_infsup else float("nan")
        rows.append(ConvergenceRow(
            h=h, energy=assemble_energy(space, final.state, cfg.material),
            det_err_l2=l2, det_err_l1=l1, w1s_diff=w1s, p_diff=pl2,
            infsup=beta))
    hs_all = [r.h for r in rows]
    det2_slope, det2_used = fit_order(hs_all, [r.det_err_l2 for r in rows])
    det1_slope, det1_used = fit_order(hs_all, [r.det_err_l1 for r in rows])
    e_slope, e_used = energy_rate(rows)
    rates = {
        "det_err_l2": {"order": det2_slope, "points": det2_used},
        "det_err_l1": {"order": det1_slope, "points": det1_used},
        "energy_diff": {"order": e_slope, "points": e_used},
    }
    # self-convergence columns exclude the zero reference row
    for key in ("w1s_diff", "p_diff"):
        slope, used = fit_order(hs_all[:-1], [getattr(r, key) for r in rows[:-1]])
        rates[key] = {"order": slope, "points": used}
    return rows, rates, solves


def sweep_study(cfg: ExperimentConfig):
    """Branch sweeps over the configured load values.

    The 'left'/'right' branches perturb the corresponding defect (sorted
    by center abscissa); cavity volume v1 belongs to the leftmost defect
    and v2 to the rightmost.  Perturbed branches sweep from the strongest
    load downward: the branch is anchored by a cold biased solve where it
    is most attracting, then tracked through its merge with the symmetric
    branch.  If the anchor lands on the mirror branch the sweep is retried
    with a stronger bias.
    """
    if not cfg.run.lambda_values:
        raise ConfigError("sweep requires run.lambda_values")
    if not cfg.defects:
        raise ConfigError("sweep requires at least one defect")
    order = np.argsort([d.center[0] for d in cfg.defects])
    left_idx, right_idx = int(order[0]), int(order[-1])
    family, _ = cfg.boundary_family()
    ascending = sorted(cfg.run.lambda_values)

    rows = []
    failures = []
    branch_points = {}
    for branch in cfg.run.branches:
        mesh, space = build_space(cfg)
        if branch == "symmetric":
            pts = continuation_sweep(space, cfg.material, family,
                                     ascending, cfg.newton, mode="symmetric")
        else:
            pidx = right_idx if branch == "right" else left_idx
            other = left_idx if branch == "right" else right_idx
            mag0 = cfg.run.perturb_magnitude
            # cold anchors can land on the mirror branch; escalate the bias
            # and finally bias the opposite defect (which empirically
            # anti-correlates) until the requested cavity dominates
            ladder = [(pidx, mag0), (pidx, 2 * mag0), (other, mag0),
                      (other, 2 * mag0)]
            pts = []
            for bias_idx, mag in ladder:
                pts = continuation_sweep(space, cfg.material, family,
                                         ascending[::-1], cfg.newton,
                                         mode="perturb", perturb_index=bias_idx,
                                         perturb_magnitude=mag)
                anchor = next((p for p in pts if p.converged), None)
                if anchor is None:
                    continue
                space.set_boundary(family(anchor.value))
                vols = cavity_volumes(space, anchor.state)
                if vols[pidx] >= vols[other] * 0.999:
                    break
            pts = pts[::-1]
        branch_points[branch] = (space, pts)
        for pt in pts:
            if not pt.converged:
                failures.append({"branch": branch, "lambda": pt.value,
                                 "message": pt.message})
                continue
            space.set_boundary(family(pt.value))
            vols = cavity_volumes(space, pt.state)
            v1 = vols[left_idx] if vols else float("nan")
            v2 = vols[right_idx] if vols else float("nan")
            rows.append(BifurcationRow(
                lam=pt.value, branch=branch,
                energy=assemble_energy(space, pt.state, cfg.material),
                v1=v1, v2=v2))
    report = bifurcation_report(rows)
    report["failures"] = failures
    return rows, report, branch_points


def infsup_study(cfg: ExperimentConfig):
    """Inf-sup constants at identity (and optionally at the converged
    states) across the h grid."""
    hs = cfg.run.h_values or [cfg.mesh.h]
    out = []
    for h in hs:
        mesh, space = build_space(cfg, h)
        row = {"h": h}
        try:
            row["beta_identity"] = infsup_constant(space, None)
        except Exception as exc:  # recorded, scan continues
            row["beta_identity"] = float("nan")
            row["error"] = str(exc)
        if cfg.run.infsup_at_solution:
            try:
                _, space_s, final, _ = solve_study(cfg, h)
                row["beta_solution"] = infsup_constant(space_s, final.state)
            except Exception as exc:
                row["beta_solution"] = float("nan")
                row["error"] = str(exc)
        out.append(row)
    return out
