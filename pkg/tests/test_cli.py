import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from spatialctl.denoiser.dataset import load_png, save_png
from spatialctl.runner import cli

FAST = ["--set", "restart.N=0", "--set", "appearance.layers=", "--set", "arp.client=echo"]


@pytest.fixture(scope="module")
def weights(tmp_path_factory, active):
    return str(active.weights().save(tmp_path_factory.mktemp("w") / "active.bin"))


@pytest.fixture
def cond(tmp_path):
    img = np.zeros((32, 32, 3))
    img[8:24, 8:10] = 1.0
    path = tmp_path / "cond.png"
    save_png(path, img)
    return path


def test_prep(tmp_path, cond, capsys):
    out = tmp_path / "prepped.png"
    assert cli.main(["prep", str(cond), str(out)]) == 0
    assert load_png(out).shape == (32, 32, 3)
    meta = json.loads(capsys.readouterr().out)
    assert meta["operation"] == "none"


def test_gen(tmp_path, cond, weights, capsys):
    run = tmp_path / "run"
    code = cli.main(["gen", "--cond", str(cond), "--prompt", "a red circle", "--out", str(run),
                     "--weights", weights, "--seed", "3", *FAST])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["calls"] == 50 + 21 + 1 and summary["cache"]["misses"] == 1
    record = json.loads((run / "record.json").read_text())
    assert record["config"]["run"]["seed"] == 3
    assert (run / "output.png").exists()


def test_gen_unconditional_with_config_file(tmp_path, weights, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text("[restart]\nN = 0\nN_prime = 1\n[appearance]\nlayers =\n")
    assert cli.main(["gen", "--prompt", "a blue square", "--out", str(tmp_path / "r"), "--weights", weights,
                     "--config", str(ini)]) == 0
    assert json.loads(capsys.readouterr().out)["calls"] == 50


def test_analyze(tmp_path, weights, capsys):
    out = tmp_path / "a"
    code = cli.main(["analyze", "--pairs", "2", "--points", "3", "--kinds", "edge", "mask", "--out", str(out),
                     "--weights", weights])
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((out / "gaps.csv").read_text())))
    assert len(rows) == 6 and {r["condition_kind"] for r in rows} == {"edge", "mask"}
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["spearman"]) == {"kl", "selfsim_l2", "dft_l2"}
    assert set(json.loads(capsys.readouterr().out)) == {"kl", "selfsim_l2", "dft_l2"}


def test_ablate_c(tmp_path, weights, capsys):
    out = tmp_path / "ab"
    code = cli.main(["ablate", "injection_C", "--grid", "0", "600", "--pairs", "1", "--out", str(out),
                     "--weights", weights, *FAST])
    assert code == 0
    report = json.loads((out / "injection_C.json").read_text())
    assert report["settings"] == ["0", "600"]
    assert set(report["metrics"]) == {"struct_distance", "leakage"}
    assert capsys.readouterr().out.startswith("setting,")


@pytest.mark.parametrize("argv", [
    ["gen", "--prompt", "x", "--cond", "/nonexistent.png"],
    ["gen", "--prompt", "x", "--set", "injection.tau=7"],
    ["gen", "--prompt", "x", "--set", "bogus"],
    ["gen", "--prompt", "x", "--preset", "nope"],
    ["gen", "--prompt", "x", "--weights", "/nonexistent.bin"],
    ["gen", "--prompt", "x", "--config", "/nonexistent.ini"],
    ["prep", "/nonexistent.png", "/tmp/out.png"],
    ["ablate", "sideways"],
    ["gen", "--prompt", "x", "--set", "restart.sigma_tmin=3", "--set", "restart.sigma_tmax=2"],
])
def test_user_errors_exit_one(argv, capsys):
    assert cli.main(argv) == 1
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["fly"], ["gen"], ["train", "--epochs", "many"]])
def test_argument_errors_exit_one(argv):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 1


def test_internal_error_exits_two(monkeypatch, cond, tmp_path):
    def boom(args):
        raise RuntimeError("kaput")

    monkeypatch.setattr(cli, "cmd_prep", boom)
    assert cli.main(["prep", str(cond), str(tmp_path / "o.png")]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "spatialctl", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "analyze" in proc.stdout
