"""Experiment configuration: a YAML file with nested sections mapping onto
the domain, material, boundary, mesh-strategy, solver and run blocks."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .fem import AffineBoundary
from .material import MaterialParams
from .mesh import DefectSpec, MeshParams
from .solver import NewtonConfig

__all__ = ["ExperimentConfig", "load_config", "save_config"]


@dataclass
class RunBlock:
    h_values: list = field(default_factory=list)
    lambda_values: list = field(default_factory=list)
    branches: list = field(default_factory=lambda: ["symmetric"])
    continuation_steps: int = 8
    perturb_magnitude: float = 1.0
    mode: str = "symmetric"
    perturb_index: int = 0
    infsup_at_solution: bool = False


@dataclass
class ExperimentConfig:
    name: str
    domain_radius: float
    defects: list
    material: MaterialParams
    bc: AffineBoundary
    bc_is_uniform: bool
    mesh: MeshParams
    newton: NewtonConfig
    run: RunBlock
    output_dir: str = "out"

    def boundary_family(self):
        """Continuation family: for uniform loads the scale itself, else an
        interpolation parameter in [0, 1] toward the target matrix."""
        if self.bc_is_uniform:
            lam_t = float(self.bc.matrix[0, 0])
            return lambda lam: AffineBoundary.uniform(lam), lam_t
        M = np.asarray(self.bc.matrix, dtype=float)
        eye = np.eye(2)
        return lambda t: AffineBoundary(eye + t * (M - eye)), 1.0


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"missing key {key!r} in {where}")
    return d[key]


def _as_float_list(v, where):
    try:
        return [float(x) for x in v]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where} must be a list of numbers") from exc


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a mapping")
    name = str(data.get("name", "experiment"))
    dom = data.get("domain", {})
    radius = float(dom.get("radius", 1.0))
    if radius <= 0:
        raise ConfigError("domain radius must be positive")

    defects = []
    for i, d in enumerate(data.get("defects", [])):
        where = f"defects[{i}]"
        center = _require(d, "center", where)
        if len(center) != 2:
            raise ConfigError(f"{where}: center must have two coordinates")
        try:
            defects.append(DefectSpec((float(center[0]), float(center[1])),
                                      float(_require(d, "rho", where)),
                                      float(_require(d, "delta", where))))
        except Exception as exc:
            raise ConfigError(f"{where}: {exc}") from exc

    m = data.get("material", {})
    vol = m.get("volumetric", "reciprocal")
    if vol != "reciprocal":
        raise ConfigError("config files support the 'reciprocal' volumetric preset; "
                          "custom volumetric terms are a library-level feature")
    try:
        material = MaterialParams(mu=float(m.get("mu", 2.0 / 3.0)),
                                  s=float(m.get("s", 1.5)))
    except Exception as exc:
        raise ConfigError(f"material: {exc}") from exc

    b = _require(data, "bc", "config")
    if "lambda" in b and "matrix" in b:
        raise ConfigError("bc: give either 'lambda' or 'matrix', not both")
    if "lambda" in b:
        bc = AffineBoundary.uniform(float(b["lambda"]))
        uniform = True
    elif "matrix" in b:
        M = np.asarray(b["matrix"], dtype=float)
        if M.shape != (2, 2):
            raise ConfigError("bc.matrix must be 2x2")
        bc = AffineBoundary(M)
        uniform = bool(np.allclose(M, M[0, 0] * np.eye(2)))
    else:
        raise ConfigError("bc needs 'lambda' or 'matrix'")

    msh = _require(data, "mesh", "config")
    try:
        mesh = MeshParams(
            h=float(_require(msh, "h", "mesh")),
            equi_const=float(msh.get("equi_const", 2.0)),
            thickness_const=float(msh.get("thickness_const", 2.0)),
            angular_const=float(msh.get("angular_const", 2.0)),
            grading=float(msh.get("grading", 0.5)),
            angular_span=float(msh.get("angular_span", 1.8)),
            rate_cap=(None if msh.get("rate_cap") is None
                      else float(msh["rate_cap"])),
        )
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"mesh: {exc}") from exc

    nw = data.get("newton", {})
    try:
        newton = NewtonConfig(
            tol_abs=float(nw.get("tol_abs", 1e-10)),
            tol_rel=float(nw.get("tol_rel", 0.0)),
            max_iter=int(nw.get("max_iter", 40)),
            alpha_min=float(nw.get("alpha_min", 1e-6)),
            backtrack=float(nw.get("backtrack", 0.5)),
            singular_floor=float(nw.get("singular_floor", 1e-3)),
            det_floor=float(nw.get("det_floor", 1e-3)),
            det_ceiling=float(nw.get("det_ceiling", 1e3)),
        )
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"newton: {exc}") from exc

    r = data.get("run", {})
    run = RunBlock(
        h_values=_as_float_list(r.get("h_values", []), "run.h_values"),
        lambda_values=_as_float_list(r.get("lambda_values", []), "run.lambda_values"),
        branches=list(r.get("branches", ["symmetric"])),
        continuation_steps=int(r.get("continuation_steps", 8)),
        perturb_magnitude=float(r.get("perturb_magnitude", 1.0)),
        mode=str(r.get("mode", "symmetric")),
        perturb_index=int(r.get("perturb_index", 0)),
        infsup_at_solution=bool(r.get("infsup_at_solution", False)),
    )
    if run.lambda_values and not uniform:
        raise ConfigError("run.lambda_values requires a uniform ('lambda') bc")
    for br in run.branches:
        if br not in ("symmetric", "left", "right"):
            raise ConfigError(f"unknown branch {br!r}")
    if run.mode not in ("symmetric", "perturb"):
        raise ConfigError(f"unknown run mode {run.mode!r}")

    out = data.get("output", {})
    return ExperimentConfig(
        name=name, domain_radius=radius, defects=defects, material=material,
        bc=bc, bc_is_uniform=uniform, mesh=mesh, newton=newton, run=run,
        output_dir=str(out.get("directory", "out")))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    bc: dict
    if cfg.bc_is_uniform:
        bc = {"lambda": float(cfg.bc.matrix[0, 0])}
    else:
        bc = {"matrix": [[float(v) for v in row] for row in cfg.bc.matrix]}
    d = {
        "name": cfg.name,
        "domain": {"radius": cfg.domain_radius},
        "defects": [{"center": [float(x) for x in dd.center],
                     "rho": dd.rho, "delta": dd.delta} for dd in cfg.defects],
        "material": {"mu": cfg.material.mu, "s": cfg.material.s,
                     "volumetric": cfg.material.volumetric.name},
        "bc": bc,
        "mesh": {"h": cfg.mesh.h, "equi_const": cfg.mesh.equi_const,
                 "thickness_const": cfg.mesh.thickness_const,
                 "angular_const": cfg.mesh.angular_const,
                 "grading": cfg.mesh.grading,
                 "angular_span": cfg.mesh.angular_span,
                 "rate_cap": cfg.mesh.rate_cap},
        "newton": {"tol_abs": cfg.newton.tol_abs, "tol_rel": cfg.newton.tol_rel,
                   "max_iter": cfg.newton.max_iter,
                   "alpha_min": cfg.newton.alpha_min,
                   "backtrack": cfg.newton.backtrack,
                   "singular_floor": cfg.newton.singular_floor,
                   "det_floor": cfg.newton.det_floor,
                   "det_ceiling": cfg.newton.det_ceiling},
        "run": {"h_values": cfg.run.h_values,
                "lambda_values": cfg.run.lambda_values,
                "branches": cfg.run.branches,
                "continuation_steps": cfg.run.continuation_steps,
                "perturb_magnitude": cfg.run.perturb_magnitude,
                "mode": cfg.run.mode,
                "perturb_index": cfg.run.perturb_index,
                "infsup_at_solution": cfg.run.infsup_at_solution},
        "output": {"directory": cfg.output_dir},
    }
    return d


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    return parse_config(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=False)
