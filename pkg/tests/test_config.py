import json

import pytest

from config import settings
from config.experiment import load_experiment_config
from mpm.mpm_utils import ConfigValidationError, deep_merge


def write_config(tmp_path, document):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(document))
    return str(path)


def test_defaults_load():
    config = load_experiment_config()
    assert (config.mesh.nx, config.mesh.ny) == (16, 16)
    assert config.anomaly.law.name == "sigmoid"
    assert config.eta_star() == (0.0, 0.0)
    assert len(config.sweep.sequence()) == 7


def test_user_file_and_overrides(tmp_path):
    path = write_config(tmp_path, {"mesh": {"nx": 8}, "noise": {"eta1": 0.05, "eta2": 0.01}})
    config = load_experiment_config(path, overrides={"noise.seed": 9, "output_dir": None})
    assert (config.mesh.nx, config.mesh.ny) == (8, 16)
    assert config.noise.seed == 9
    assert config.output_dir == "results"
    assert config.eta_star() == (0.05, 0.01)


def test_user_law_replaces_default_law(tmp_path):
    path = write_config(tmp_path, {"anomaly": {"law": {"name": "affine", "params": {"a": 2.0, "b": 1.0}}}})
    law = load_experiment_config(path).anomaly.law
    assert law.params == {"a": 2.0, "b": 1.0}
    assert law.gamma_lo is None


def test_every_violation_is_reported(tmp_path):
    path = write_config(tmp_path, {"mesh": {"nx": 0}, "noise": {"eta1": 1.5}, "threads": -1})
    with pytest.raises(ConfigValidationError) as excinfo:
        load_experiment_config(path)
    fields = " ".join(excinfo.value.violations)
    assert "mesh.nx" in fields and "noise.eta1" in fields and "threads" in fields


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigValidationError):
        load_experiment_config(str(bad))
    with pytest.raises(ConfigValidationError):
        load_experiment_config(write_config(tmp_path, [1, 2]))


def test_deep_merge_keeps_base():
    base = {"a": {"b": 1, "c": 2}}
    merged = deep_merge(base, {"a": {"c": 3}})
    assert merged == {"a": {"b": 1, "c": 3}}
    assert base == {"a": {"b": 1, "c": 2}}


def test_resolve_threads():
    assert settings.resolve_threads(3) == 3
    assert settings.resolve_threads(0) >= 1
    assert "tol" in settings.solver_settings()
