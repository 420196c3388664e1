import csv
import json
import os

import pytest

from mfgflow.cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, main
from mfgflow.config import DEFAULTS, load_config, solver_settings
from mfgflow.errors import ConfigError


def _read_csv(path):
    with open(path) as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def test_defaults_validate():
    cfg = load_config()
    assert cfg["model"]["kind"] == "nonlq"
    assert solver_settings(cfg).newton_tol == DEFAULTS["control"]["newton_tol"]


def test_digest_ignores_output_directory():
    a = load_config(overrides={"outputs.directory": "a"})
    b = load_config(overrides={"outputs.directory": "b"})
    c = load_config(overrides={"measure.seed": 8})
    assert a.digest == b.digest != c.digest


@pytest.mark.parametrize("key,value,fragment", [
    ("solver.dt", 0.0, "solver.dt"),
    ("solver.dt", 0.3, "divide"),
    ("model.kind", "quadratic", "model.kind"),
    ("outputs.emit", "plots", "outputs.emit"),
    ("measure.n", 2.5, "measure.n"),
    ("solver.damping", 2.0, "solver.damping"),
])
def test_invalid_values_name_the_key(key, value, fragment):
    with pytest.raises(ConfigError, match=fragment):
        load_config(overrides={key: value})


def test_unknown_keys_are_rejected(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("solver:\n  steps: 3\n")
    with pytest.raises(ConfigError, match="solver.steps"):
        load_config(str(path))


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["run", "--solver.dt", "0", "--outputs.directory", str(tmp_path)]) == EXIT_CONFIG
    assert "solver.dt" in capsys.readouterr().err


def test_parameter_out_of_range_exit_code(tmp_path, capsys):
    assert main(["run", "--model.eps2", "0.99", "--outputs.directory", str(tmp_path)]) == EXIT_CONFIG
    assert "model.eps2" in capsys.readouterr().err


def test_run_writes_outputs(tmp_path):
    out = tmp_path / "lq"
    args = ["run", "--model.kind", "lq", "--measure.kind", "dirac", "--measure.x0", "1.0",
            "--horizon.T", "0.5", "--outputs.directory", str(out), "--outputs.emit", "trajectories,diagnostics,plotdata"]
    assert main(args) == EXIT_OK
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["status"] == "ok"
    assert diag["header"]["config_hash"] == load_config(overrides={
        "model.kind": "lq", "measure.kind": "dirac", "measure.x0": 1.0, "horizon.T": 0.5,
        "outputs.emit": "trajectories,diagnostics,plotdata"}).digest
    assert diag["solve"]["nash_gap"] < 1e-7
    assert diag["dxV_vs_Z"]["max"] < 1e-4
    rows = _read_csv(out / "trajectories.csv")
    assert set(rows[0]) == {"s", "id", "kind", "X_1", "Z_1", "alpha_1"}
    assert {r["kind"] for r in rows} == {"point", "probe"}
    assert (out / "trajectories.csv").read_text().startswith("# mfgflow")
    assert _read_csv(out / "plotdata.csv")[-1]["t"] == "0.5"


def test_audit_command(tmp_path):
    assert main(["audit", "--model.kind", "lq", "--checks.audit_samples", "64",
                 "--outputs.directory", str(tmp_path)]) == EXIT_OK
    assert json.loads((tmp_path / "audit.json").read_text())["checks"]
    assert main(["audit", "--model.eps1", "0.01", "--model.eps3", "0.125", "--checks.audit_samples", "64",
                 "--outputs.directory", str(tmp_path)]) == EXIT_FAILURE


def test_gamma_command(tmp_path):
    assert main(["gamma", "--model.kind", "lq", "--measure.n", "4", "--horizon.T", "0.5",
                 "--grid", "-1", "1", "5", "--outputs.directory", str(tmp_path)]) == EXIT_OK
    rows = _read_csv(tmp_path / "gamma.csv")
    assert len(rows) == 5
    # the LQ field is the identity
    assert all(abs(float(r["gamma"]) - float(r["x"])) < 1e-9 for r in rows)


def test_oracle_command(tmp_path):
    assert main(["oracle", "--x0", "1", "--horizons", "0.5", "--solver.dt", "0.1",
                 "--outputs.directory", str(tmp_path)]) == EXIT_OK
    rows = _read_csv(tmp_path / "lq_oracle.csv")
    assert len(rows) == 6 and float(rows[0]["V"]) == 0.5


def test_solver_failure_exit_code(tmp_path):
    out = tmp_path / "fail"
    code = main(["run", "--measure.n", "4", "--horizon.T", "0.25", "--solver.picard_max", "1",
                 "--solver.epsilon_min", "0.1", "--outputs.directory", str(out)])
    assert code == EXIT_FAILURE
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["status"] == "failed" and diag["error"]["type"] == "IntervalUnderflow"
    assert not os.path.exists(out / "trajectories.csv")
