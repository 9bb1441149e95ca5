"""Configuration parsing, validation and round-trip identity."""

import numpy as np
import pytest
import yaml

from cavityfem.config import (config_to_dict, load_config, parse_config,
                              save_config)
from cavityfem.errors import ConfigError

GOOD = {
    "name": "t",
    "domain": {"radius": 1.0},
    "defects": [{"center": [0.0, 0.0], "rho": 0.01, "delta": 1.0}],
    "material": {"mu": 2.0 / 3.0, "s": 1.5},
    "bc": {"lambda": 1.3},
    "mesh": {"h": 0.05},
    "run": {"lambda_values": [1.0, 1.1], "branches": ["symmetric"]},
}


def test_parse_golden_configs():
    for name in ("single_defect_convergence", "single_defect_small",
                 "two_defect_bifurcation", "two_defect_smoke",
                 "single_defect_infsup"):
        cfg = load_config(f"configs/{name}.yaml")
        assert cfg.mesh.h > 0
        assert cfg.material.s == 1.5


def test_round_trip_identity(tmp_path):
    cfg = parse_config(GOOD)
    p = tmp_path / "c.yaml"
    save_config(cfg, p)
    cfg2 = load_config(p)
    assert config_to_dict(cfg) == config_to_dict(cfg2)


def test_matrix_bc():
    data = dict(GOOD, bc={"matrix": [[2.5, 0.0], [0.0, 2.0]]}, run={})
    cfg = parse_config(data)
    assert not cfg.bc_is_uniform
    np.testing.assert_allclose(cfg.bc.matrix, [[2.5, 0.0], [0.0, 2.0]])


def test_lambda_values_require_uniform_bc():
    data = dict(GOOD, bc={"matrix": [[2.5, 0.0], [0.0, 2.0]]})
    with pytest.raises(ConfigError):
        parse_config(data)


def test_both_bc_forms_rejected():
    data = dict(GOOD, bc={"lambda": 1.2, "matrix": [[1, 0], [0, 1]]})
    with pytest.raises(ConfigError):
        parse_config(data)


def test_missing_bc_rejected():
    data = {k: v for k, v in GOOD.items() if k != "bc"}
    with pytest.raises(ConfigError):
        parse_config(data)


def test_bad_branch_rejected():
    data = dict(GOOD, run={"lambda_values": [1.0], "branches": ["upward"]})
    with pytest.raises(ConfigError):
        parse_config(data)


def test_bad_defect_rejected():
    data = dict(GOOD, defects=[{"center": [0.0, 0.0], "rho": 0.5, "delta": 0.1}])
    with pytest.raises(ConfigError):
        parse_config(data)


def test_invalid_mesh_constant_rejected():
    data = dict(GOOD, mesh={"h": 0.05, "thickness_const": 0.0})
    with pytest.raises(ConfigError):
        parse_config(data)


def test_boundary_family_uniform():
    cfg = parse_config(GOOD)
    fam, target = cfg.boundary_family()
    assert target == 1.3
    np.testing.assert_allclose(fam(1.1).matrix, 1.1 * np.eye(2))


def test_boundary_family_matrix():
    data = dict(GOOD, bc={"matrix": [[2.0, 0.0], [0.0, 1.5]]}, run={})
    cfg = parse_config(data)
    fam, target = cfg.boundary_family()
    assert target == 1.0
    np.testing.assert_allclose(fam(0.0).matrix, np.eye(2))
    np.testing.assert_allclose(fam(1.0).matrix, [[2.0, 0.0], [0.0, 1.5]])


def test_malformed_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("foo: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.yaml")
