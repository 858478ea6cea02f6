import json
import subprocess
import sys

import pytest
import yaml

from stochmp.cli import config_hash, load_config, main, run
from stochmp.stochastics import ConfigurationError


def write_config(tmp_path, cfg, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def base(command, problem="lq_scalar", **mc):
    return {"problem": {"name": problem}, "mc": {"paths": 2000, "steps": 64, "block": 512, **mc},
            "command": command}


def read_json(path):
    return json.loads(path.read_text())


def test_load_config_fills_defaults():
    cfg = load_config({"problem": {"name": "lq_scalar"}, "command": "riesz"})
    assert cfg["mc"]["paths"] == 10000 and cfg["mc"]["n_jobs"] == 1
    assert cfg["command"] == {"name": "riesz", "tau": 0.25, "control": None}
    assert config_hash(cfg) == config_hash(load_config(cfg))


@pytest.mark.parametrize("bad", [
    {"problem": {"name": "lq_scalar"}, "command": "riesz", "extra": 1},
    {"problem": {"name": "lq_scalar"}, "command": {"name": "riesz", "taus": 0.5}},
    {"problem": {"name": "lq_scalar"}, "mc": {"paths": 0}, "command": "riesz"},
    {"problem": {"name": "lq_scalar"}, "mc": {"seed": -1}, "command": "riesz"},
    {"problem": {"name": "lq_scalar"}, "command": "launch"},
    {"command": "riesz"},
    {"problem": {"name": "lq_scalar"}, "command": {"name": "study", "kind": "spike_rate", "eps_list": [0.125]}},
    {"problem": {"name": "lq_scalar"}, "command": {"name": "study", "kind": "other"}},
    {"problem": {"name": "lq_scalar"}, "command": {"name": "adjoint", "method": "guess"}},
])
def test_load_config_rejects(bad):
    with pytest.raises(ConfigurationError):
        load_config(bad)


def test_validate_writes_artifacts(tmp_path):
    cfg = write_config(tmp_path, base({"name": "validate"}, problem="heat_transport"))
    out = tmp_path / "out"
    assert main(["--config", str(cfg), "--out", str(out)]) == 0
    manifest = read_json(out / "manifest.json")
    assert manifest["verdict"] == "PASS" and manifest["exit_status"] == 0
    assert manifest["config_hash"] == config_hash(manifest["config"])
    assert (out / "validation.csv").read_text().startswith("check,passed,margin,exact_margin")
    assert read_json(out / "verdict.json")["pass"] is True


def test_riesz_command_matches_oracle(tmp_path):
    cfg = write_config(tmp_path, base({"name": "riesz", "tau": 0.5}, paths=20000, steps=256))
    out = tmp_path / "out"
    assert main(["--config", str(cfg), "--out", str(out)]) == 0
    details = read_json(out / "manifest.json")["details"]
    assert abs(details["estimate"] - details["oracle"]) <= max(3 * details["stderr"], 0.01 * details["oracle"])
    assert len((out / "riesz.csv").read_text().splitlines()) == 2


def test_check_mp_pass_and_fail(tmp_path):
    cmd = {"name": "check-mp", "tau_grid": [0.25, 0.5], "u_grid": [-0.3, 0.0, 0.3]}
    cfg = write_config(tmp_path, base(cmd, paths=5000, steps=128))
    assert main(["--config", str(cfg), "--out", str(tmp_path / "good")]) == 0
    bad = write_config(tmp_path, base({**cmd, "control": {"scale": 2.0}}, paths=5000, steps=128), "bad.yaml")
    assert main(["--config", str(bad), "--out", str(tmp_path / "bad")]) == 1
    verdict = read_json(tmp_path / "bad" / "verdict.json")
    assert verdict["pass"] is False and verdict["worstRow"]["total"] < 0
    header = (tmp_path / "bad" / "mp_residuals.csv").read_text().splitlines()[0]
    assert header == "tau,u0,first,second,total,stderr"


def test_study_and_simulate_and_adjoint(tmp_path):
    study = {"name": "study", "kind": "spike_limit", "tau": 0.25}
    cfg = write_config(tmp_path, base(study, paths=5000, steps=128))
    assert main(["--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    lines = (tmp_path / "s" / "study_spike_limit.csv").read_text().splitlines()
    assert lines[0] == "parameter,value,stderr,verdict" and lines[1].endswith("PASS")
    assert (tmp_path / "s" / "study_spike_limit_table.csv").exists()
    sim = write_config(tmp_path, base({"name": "simulate", "control": "origin"}), "sim.yaml")
    assert main(["--config", str(sim), "--out", str(tmp_path / "m")]) == 0
    assert len((tmp_path / "m" / "moments.csv").read_text().splitlines()) == 66
    adj = write_config(tmp_path, base({"name": "adjoint", "method": "riccati"}), "adj.yaml")
    assert main(["--config", str(adj), "--out", str(tmp_path / "a")]) == 0


@pytest.mark.parametrize("cfg, code", [
    ({"problem": {"name": "nope"}, "command": "validate"}, "E_UNKNOWN_PROBLEM"),
    ({"problem": {"name": "lq_scalar"}, "command": "validate", "oops": 1}, "E_CONFIG"),
    ({"problem": {"name": "lq_scalar", "params": {"a": 5.0, "b": 4.0, "big_k": 1.0}},
      "command": "validate"}, "E_CONFIG"),
])
def test_configuration_errors_exit_two(tmp_path, cfg, code):
    path = write_config(tmp_path, cfg)
    out = tmp_path / "out"
    assert main(["--config", str(path), "--out", str(out)]) == 2
    manifest = read_json(out / "manifest.json")
    assert manifest["exit_status"] == 2 and manifest["error"]["code"] == code


def test_missing_config_file_exits_two(tmp_path):
    assert main(["--config", str(tmp_path / "absent.yaml"), "--out", str(tmp_path / "o")]) == 2


def test_overrides_apply(tmp_path):
    cfg = write_config(tmp_path, base({"name": "validate"}))
    out = tmp_path / "o"
    assert main(["--config", str(cfg), "--out", str(out), "--seed", "5", "--paths", "300",
                 "--steps", "32", "--antithetic", "--n-jobs", "2"]) == 0
    mc = read_json(out / "manifest.json")["config"]["mc"]
    assert (mc["seed"], mc["paths"], mc["steps"], mc["antithetic"], mc["n_jobs"]) == (5, 300, 32, True, 2)


def test_worker_count_does_not_change_artifacts(tmp_path):
    cmd = {"name": "check-mp", "tau_grid": [0.5], "u_grid": [-0.3, 0.3]}
    cfg = write_config(tmp_path, base(cmd, paths=3000, steps=64))
    outs = []
    for jobs in (1, 3):
        out = tmp_path / f"j{jobs}"
        main(["--config", str(cfg), "--out", str(out), "--n-jobs", str(jobs)])
        outs.append(out)
    for name in ("mp_residuals.csv",):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_run_reports_numeric_failure(tmp_path, monkeypatch):
    import stochmp.cli as cli

    def boom(*args):
        raise FloatingPointError("overflow")

    monkeypatch.setitem(cli.COMMANDS, "validate", boom)
    cfg = load_config({"problem": {"name": "lq_scalar"}, "command": "validate", "output": str(tmp_path)})
    assert run(cfg) == 1
    assert read_json(tmp_path / "manifest.json")["error"]["code"] == "E_NUMERIC"


def test_console_entry_point(tmp_path):
    cfg = write_config(tmp_path, base({"name": "validate"}))
    proc = subprocess.run([sys.executable, "-m", "stochmp.cli", "--config", str(cfg), "--out",
                           str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0 and "PASS" in proc.stderr
