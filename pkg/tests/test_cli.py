import json
import subprocess
import sys

import numpy as np
import pytest

from epifusion.cli import main
from epifusion.epipolar import FeatureGrid, epipolar_field, read_field
from epifusion.model import TrainConfig
from epifusion.synthetic import read_dataset, standard_dataset, standard_rig


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--frames", "10", "--test-frames", "6", "--seed", "4", "--out", str(d / "data")]) == 0
    cfg = TrainConfig(d=8, heads=2, layers=1, d_ff=16, d_head=8, epochs=1, milestones=(), batch_size=4)
    cfg.save(d / "tiny.cfg")
    return d


def test_gen_matches_library(workdir):
    train = read_dataset(workdir / "data" / "train")
    lib_train, lib_test = standard_dataset(10, 6, seed=4)
    np.testing.assert_array_equal(train.images, lib_train.images)
    np.testing.assert_array_equal(read_dataset(workdir / "data" / "test").joints3d, lib_test.joints3d)


def test_gen_is_deterministic(tmp_path, workdir):
    assert main(["gen", "--frames", "10", "--test-frames", "6", "--seed", "4", "--out", str(tmp_path / "again")]) == 0
    for split in ("train", "test"):
        a = (workdir / "data" / split / "poses.bin").read_bytes()
        b = (tmp_path / "again" / split / "poses.bin").read_bytes()
        assert a == b


def test_field_command(tmp_path):
    out = tmp_path / "f.epifield"
    assert main(["field", "--query", "40,50", "--gamma", "10", "--out", str(out), "--pgm", str(tmp_path / "f.pgm")]) == 0
    grid, gamma, query = read_field(out)
    cams = standard_rig(0).cameras
    expected = epipolar_field(cams[0], cams[1], [40.0, 50.0], FeatureGrid(16, 16), 10.0).scores
    np.testing.assert_array_equal(grid, expected.astype(np.float32))
    assert (tmp_path / "f.pgm").read_bytes().startswith(b"P5\n16 16\n255\n")


def test_train_eval_attn(tmp_path, workdir, capsys):
    ckpt = tmp_path / "m.tfz"
    data = str(workdir / "data" / "train")
    assert main(["train", "--config", str(workdir / "tiny.cfg"), "--data", data, "--out", str(ckpt)]) == 0
    assert ckpt.exists() and ckpt.with_suffix(".csv").exists()
    report = tmp_path / "r.json"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(workdir / "data" / "test"), "--report", str(report)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["mpjpe_mm"] == json.loads(report.read_text())["mpjpe_mean"]
    assert (tmp_path / "r_summary.csv").exists() and (tmp_path / "r_sequences.csv").exists()
    out = tmp_path / "attn"
    assert main(["attn", "--ckpt", str(ckpt), "--data", data, "--frame", "0", "--view", "0", "--query", "64,64", "--out", str(out)]) == 0
    assert (out / "field.epifield").exists() and (out / "attn_l0_h1.epifield").exists()
    assert main(["attn", "--ckpt", str(ckpt), "--data", data, "--frame", "50", "--view", "0", "--query", "64,64"]) == 2


def test_ablate_command(tmp_path, workdir):
    out = tmp_path / "abl.csv"
    args = ["ablate", "--suite", "heads", "--config", str(workdir / "tiny.cfg"), "--data", str(workdir / "data"), "--out", str(out)]
    assert main(args) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("schema,suite,value")
    assert len(lines) == 5


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["bogus"],
        ["gen"],
        ["field", "--query", "nope", "--out", "x"],
        ["gen", "--cams", "1", "--out", "x"],
        ["field", "--query", "1,2", "--gamma", "-1", "--out", "x"],
        ["ablate", "--suite", "width", "--out", "x"],
    ],
)
def test_usage_errors(argv, tmp_path):
    assert main(argv) == 2


def test_data_errors(tmp_path, workdir):
    (tmp_path / "junk.tfz").write_bytes(b"nope")
    assert main(["eval", "--ckpt", str(tmp_path / "junk.tfz"), "--data", str(workdir / "data" / "test"), "--report", "r.json"]) == 3
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "m.tfz")]) == 3
    (tmp_path / "bad.cfg").write_text("d = banana\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--data", str(workdir / "data" / "train"), "--out", "m"]) == 3


def test_numerical_failure_exit_code(tmp_path, workdir):
    cfg = TrainConfig(d=8, heads=2, layers=1, d_ff=16, d_head=8, epochs=1, milestones=(), batch_size=4, lr=1e30)
    cfg.save(tmp_path / "huge.cfg")
    code = main(["train", "--config", str(tmp_path / "huge.cfg"), "--data", str(workdir / "data" / "train"), "--out", str(tmp_path / "m.tfz")])
    assert code == 4


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "epifusion", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "ablate" in res.stdout
