"""Command-line entry point.

Subcommands: mesh | solve | converge | sweep | infsup.  Every subcommand
is a pure function of the configuration file plus declared inputs; exit
codes distinguish configuration (1), meshing (2), solver (3) and
analysis (4) failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import drivers
from .analysis import BifurcationRow, ConvergenceRow
from .config import ExperimentConfig, load_config
from .errors import (CavityFemError, ConfigError, FieldLookupError,
                     GeometryError, MaterialDomainError, MeshStrategyError,
                     OrientationError, SolverError)
from .fileio import fmt, write_csv, write_mesh, write_state, write_vtk

EXIT_CONFIG = 1
EXIT_MESH = 2
EXIT_SOLVER = 3
EXIT_ANALYSIS = 4


def _outdir(cfg: ExperimentConfig, args) -> Path:
    out = args.out or os.environ.get("CAVITYFEM_OUT") or cfg.output_dir
    path = Path(out) / cfg.name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _deformed_nodes(mesh, state):
    n = len(mesh.nodes)
    return state.u[:2 * n].reshape(n, 2)


def _json_dump(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, default=float)
        f.write("\n")


def cmd_mesh(cfg: ExperimentConfig, args) -> int:
    out = _outdir(cfg, args)
    results = drivers.mesh_study(cfg)
    rows = []
    all_valid = True
    for res in results:
        h = res["h"]
        write_mesh(res["mesh"], out / f"mesh_h{h:g}.txt")
        with open(out / f"validation_h{h:g}.txt", "w") as f:
            f.write(res["report"].summary() + "\n")
        all_valid &= res["report"].valid
        for st in res["layer_stats"]:
            rows.append((st["defect"], float(st["h"]), float(st["min_tau"]),
                         float(st["max_tau"]), st["layers"], st["min_n"],
                         st["max_n"], st["conforming"]))
    write_csv(out / "layers.csv",
              ["defect", "h", "min_tau", "max_tau", "layers", "min_n",
               "max_n", "conforming"], rows)
    print(f"wrote {len(results)} meshes to {out}")
    if not all_valid:
        print("validation failures detected; see validation reports",
              file=sys.stderr)
        return EXIT_MESH
    return 0


def cmd_solve(cfg: ExperimentConfig, args) -> int:
    out = _outdir(cfg, args)
    mesh, space, final, _ = drivers.solve_study(cfg)
    write_state(final.state, out / "state.txt")
    write_csv(out / "trace.csv", list(final.trace.csv_header), final.trace.rows())
    deformed = _deformed_nodes(mesh, final.state)
    write_mesh(mesh, out / "deformed_mesh.txt", nodes_override=deformed)
    write_vtk(mesh, out / "deformed.vtk",
              point_vectors={"displacement": deformed - mesh.nodes},
              nodes_override=deformed)
    summary = drivers.solve_summary(cfg, space, final)
    _json_dump(out / "solve_summary.json", summary)
    print(f"solved {cfg.name}: energy {summary['energy']:.9g}, "
          f"volumes {['%.6g' % v for v in summary['cavity_volumes']]}")
    return 0


def cmd_converge(cfg: ExperimentConfig, args) -> int:
    out = _outdir(cfg, args)
    rows, rates, solves = drivers.converge_study(
        cfg, with_infsup=cfg.run.infsup_at_solution)
    write_csv(out / "convergence.csv", list(ConvergenceRow.csv_header),
              [r.row() for r in rows])
    _json_dump(out / "rates.json", rates)
    for h, mesh, space, final in solves:
        write_state(final.state, out / f"state_h{h:g}.txt")
    print("fitted orders: " + ", ".join(
        f"{k}={v['order']:.3g}" for k, v in rates.items()))
    return 0


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    out = _outdir(cfg, args)
    rows, report, branch_points = drivers.sweep_study(cfg)
    write_csv(out / "bifurcation.csv", list(BifurcationRow.csv_header),
              [r.row() for r in rows])
    _json_dump(out / "lambda_c.json", report)
    family, _ = cfg.boundary_family()
    for branch, (space, pts) in branch_points.items():
        done = [p for p in pts if p.converged]
        if done:
            pt = done[-1]
            deformed = _deformed_nodes(space.mesh, pt.state)
            write_vtk(space.mesh, out / f"deformed_{branch}_lam{pt.value:g}.vtk",
                      point_vectors={"displacement": deformed - space.mesh.nodes},
                      nodes_override=deformed)
    lam_c = report.get("lambda_c")
    print(f"sweep complete; critical-load estimate: {lam_c}")
    if report["failures"]:
        print(f"{len(report['failures'])} sweep points failed "
              "(recorded in lambda_c.json)", file=sys.stderr)
    return 0


def cmd_infsup(cfg: ExperimentConfig, args) -> int:
    out = _outdir(cfg, args)
    rows = drivers.infsup_study(cfg)
    header = ["h", "beta_identity"] + (
        ["beta_solution"] if cfg.run.infsup_at_solution else [])
    table = []
    for r in rows:
        row = [float(r["h"]), float(r["beta_identity"])]
        if cfg.run.infsup_at_solution:
            row.append(float(r.get("beta_solution", float("nan"))))
        table.append(tuple(row))
    write_csv(out / "infsup.csv", header, table)
    errs = [r for r in rows if "error" in r]
    print(f"inf-sup scan over {len(rows)} meshes written to {out}")
    if errs:
        print(f"{len(errs)} rows recorded eigensolve errors", file=sys.stderr)
        return EXIT_ANALYSIS
    return 0


_COMMANDS = {
    "mesh": cmd_mesh,
    "solve": cmd_solve,
    "converge": cmd_converge,
    "sweep": cmd_sweep,
    "infsup": cmd_infsup,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cavityfem",
        description="Mixed finite elements for multi-cavity growth in "
                    "incompressible nonlinear elasticity")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in [
            ("mesh", "generate and validate meshes, write layer tables"),
            ("solve", "solve one experiment at the configured load"),
            ("converge", "self-convergence study across the h grid"),
            ("sweep", "branch sweep over the load values"),
            ("infsup", "numerical inf-sup constants across the h grid")]:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="experiment config file")
        sp.add_argument("--out", default=None,
                        help="output directory (default from config; "
                             "env CAVITYFEM_OUT overrides the config)")
        sp.add_argument("--threads", type=int, default=None,
                        help="BLAS thread count (exported to the usual env vars)")
        sp.add_argument("--seed", type=int, default=None,
                        help="seed for randomized test utilities; the solver "
                             "itself is deterministic and ignores it")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads or os.environ.get("CAVITYFEM_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)
    if args.seed is not None:
        os.environ["CAVITYFEM_SEED"] = str(args.seed)
    try:
        cfg = load_config(args.config)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GeometryError, MeshStrategyError) as exc:
        print(f"mesh error: {exc}", file=sys.stderr)
        return EXIT_MESH
    except (SolverError, OrientationError, MaterialDomainError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (FieldLookupError, CavityFemError) as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    raise SystemExit(main())
