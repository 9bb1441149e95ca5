"""Command-line behavior: subcommands, artifacts and exit codes."""

import json
import subprocess
import sys

import pytest
import yaml

from cavityfem.cli import main

SMOKE = {
    "name": "cli-test",
    "domain": {"radius": 1.0},
    "defects": [{"center": [0.0, 0.0], "rho": 0.01, "delta": 1.0}],
    "material": {"mu": 2.0 / 3.0, "s": 1.5},
    "bc": {"lambda": 1.2},
    "mesh": {"h": 0.06},
    "newton": {"tol_abs": 1.0e-10},
    "run": {"continuation_steps": 3, "h_values": [0.06]},
}


@pytest.fixture
def smoke_config(tmp_path):
    cfg = dict(SMOKE, output={"directory": str(tmp_path / "out")})
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(cfg))
    return p, tmp_path / "out" / "cli-test"


class TestSubcommands:
    def test_mesh(self, smoke_config):
        path, out = smoke_config
        assert main(["mesh", "--config", str(path)]) == 0
        assert (out / "layers.csv").exists()
        assert (out / "mesh_h0.06.txt").exists()
        report = (out / "validation_h0.06.txt").read_text()
        assert "valid: True" in report

    def test_solve_artifacts(self, smoke_config):
        path, out = smoke_config
        assert main(["solve", "--config", str(path)]) == 0
        for name in ("state.txt", "trace.csv", "deformed_mesh.txt",
                     "deformed.vtk", "solve_summary.json"):
            assert (out / name).exists(), name
        summary = json.loads((out / "solve_summary.json").read_text())
        assert summary["final_residual"] <= 1e-10
        assert summary["min_det"] > 0
        assert summary["constraint_max"] <= 1e-9

    def test_infsup(self, smoke_config):
        path, out = smoke_config
        assert main(["infsup", "--config", str(path)]) == 0
        lines = (out / "infsup.csv").read_text().splitlines()
        assert lines[0] == "h,beta_identity"
        assert float(lines[1].split(",")[1]) > 0

    def test_out_override(self, smoke_config, tmp_path):
        path, _ = smoke_config
        alt = tmp_path / "elsewhere"
        assert main(["mesh", "--config", str(path), "--out", str(alt)]) == 0
        assert (alt / "cli-test" / "layers.csv").exists()


class TestExitCodes:
    def test_config_error(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("name: x\nbc: {}\nmesh: {h: 0.05}\n")
        assert main(["solve", "--config", str(p)]) == 1

    def test_invalid_strategy_constant(self, tmp_path):
        cfg = dict(SMOKE, mesh={"h": 0.06, "thickness_const": 0.0})
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump(cfg))
        assert main(["mesh", "--config", str(p)]) == 1

    def test_mesh_error(self, tmp_path):
        cfg = dict(SMOKE,
                   defects=[{"center": [0.9, 0.0], "rho": 0.01, "delta": 0.3}],
                   output={"directory": str(tmp_path / "o")})
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump(cfg))
        assert main(["mesh", "--config", str(p)]) == 2

    def test_solver_error(self, tmp_path):
        # an absurd load with a single permitted iteration cannot converge
        cfg = dict(SMOKE, bc={"lambda": 3.0},
                   newton={"tol_abs": 1e-10, "max_iter": 1},
                   run={"continuation_steps": 1},
                   output={"directory": str(tmp_path / "o")})
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump(cfg))
        assert main(["solve", "--config", str(p)]) == 3

    def test_converge_needs_three_h(self, tmp_path):
        cfg = dict(SMOKE, run={"h_values": [0.06, 0.05]},
                   output={"directory": str(tmp_path / "o")})
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump(cfg))
        assert main(["converge", "--config", str(p)]) == 1

    def test_sweep_needs_lambda_values(self, tmp_path):
        cfg = dict(SMOKE, output={"directory": str(tmp_path / "o")})
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump(cfg))
        assert main(["sweep", "--config", str(p)]) == 1


class TestEntryPoint:
    def test_module_invocation(self, smoke_config):
        path, _ = smoke_config
        r = subprocess.run(
            [sys.executable, "-m", "cavityfem.cli", "mesh", "--config", str(path)],
            capture_output=True, text=True)
        assert r.returncode == 0
