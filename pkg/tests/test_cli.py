import filecmp
import json
import os
import subprocess
import sys

import pytest

from jpd.cli import main

SMALL = {
    "name": "cli", "mode": "exp1-parametric", "seed": 5,
    "subjects": [{"name": f"s{i}", "boundary_stim": 5.5, "warp_strength": 0.3,
                  "prototypes": [[270, 2290], [390, 1990]]} for i in range(3)],
    "reps": 2, "categorization_reps": 3,
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def test_run_prints_summary(config, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["run", "--config", config, "--out", out]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["upper_bound"] >= summary["lower_bound"]
    assert os.path.isfile(os.path.join(out, "summary.csv"))


def test_stages_reuse_run_config(config, tmp_path, capsys):
    full, staged = str(tmp_path / "full"), str(tmp_path / "staged")
    main(["run", "--config", config, "--out", full])
    assert main(["synth", "--config", config, "--out", staged]) == 0
    for stage in ("simulate", "analyze", "tabulate", "fit", "report"):
        assert main([stage, "--out", staged]) == 0
    for name in ("responses.csv", "differences.csv", "jpd.csv", "summary.csv"):
        assert filecmp.cmp(os.path.join(full, name), os.path.join(staged, name), shallow=False)


def test_seed_override(config, tmp_path):
    main(["simulate", "--config", config, "--seed", "6", "--out", str(tmp_path)])
    assert json.load(open(tmp_path / "config.json"))["seed"] == 6


def test_errors_exit_2(config, tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path / "empty")]) == 2
    assert "missing" in capsys.readouterr().err
    assert main(["run", "--config", "no_such_config", "--out", str(tmp_path)]) == 2
    assert main(["tabulate", "--config", config, "--out", str(tmp_path / "t")]) == 2
    assert "tabulate" in capsys.readouterr().err


def test_staircase_command(config, tmp_path, capsys):
    assert main(["staircase", "--config", config, "--out", str(tmp_path)]) == 0
    assert os.path.isfile(tmp_path / "staircase.csv")


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "jpd", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "staircase" in r.stdout
