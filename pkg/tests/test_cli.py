import subprocess
import sys

import pytest

from idea.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

TINY = """stream.num_domains = 2
stream.steps_per_episode = 2
stream.num_candidates = 6
stream.instruction_scale = 0.0
opt.steps = 10
opt.learning_rate = 0.2
model.anchor_samples = 8
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def test_run_report_and_inspect(cfg_path, tmp_path, capsys):
    lib = tmp_path / "lib.idea-assets"
    assert main(["run", "--config", str(cfg_path), "--out-dir", str(tmp_path / "runs" / "a"),
                 "--assets-out", str(lib), "--seed", "4"]) == EXIT_OK
    assert "coverage_by_cycle" in capsys.readouterr().out
    assert main(["run", "--config", str(cfg_path), "--out-dir", str(tmp_path / "runs" / "b"),
                 "--assets-in", str(lib)]) == EXIT_OK
    assert main(["report", "--in", str(tmp_path / "runs"), "--out", str(tmp_path / "rep")]) == EXIT_OK
    assert "coverage_rate" in capsys.readouterr().out
    assert (tmp_path / "rep" / "series_idea.tsv").exists()
    assert main(["assets", "inspect", str(lib)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "idea-assets/1" in out and "dims: L=4 C=8" in out and "histogram" in out


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("stream.nope = 3\n")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    assert "stream.nope" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    assert main(["run"]) == EXIT_CONFIG


def test_runtime_error_exit_code(cfg_path, tmp_path):
    broken = tmp_path / "broken.idea-assets"
    broken.write_text("{")
    assert main(["assets", "inspect", str(broken)]) == EXIT_RUNTIME
    assert main(["run", "--config", str(cfg_path), "--assets-in", str(broken),
                 "--out-dir", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert main(["report", "--in", str(tmp_path / "empty"), "--out", str(tmp_path / "r")]) == EXIT_RUNTIME


def test_module_entry_point_and_log_env(cfg_path, tmp_path):
    env = {"IDEA_LOG": "debug", "PATH": ""}
    proc = subprocess.run([sys.executable, "-m", "idea.cli", "run", "--config", str(cfg_path),
                           "--out-dir", str(tmp_path / "o")], capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert "DEBUG" in proc.stderr or "INFO" in proc.stderr
