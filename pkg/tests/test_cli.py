import csv
from pathlib import Path

import numpy as np
import pytest

from ssmrecon.cli import main
from ssmrecon.metrics import read_pgm
from ssmrecon.tensorfile import load_tensor

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

TINY = """\
depth = 1
dim = 4
state_dim = 2
iters = 3
batch = 2
size = 16
n_train = 4
n_val = 1
n_test = 2
R = 4
calib = 4
cg_iters = 20
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY)
    assert main(["gen-data", "--config", str(d / "tiny.cfg"), "--out", str(d / "data")]) == 0
    assert main(["train", "--config", str(d / "tiny.cfg"), "--data", str(d / "data"),
                 "--out", str(d / "m.mrck"), "--log", str(d / "m.csv")]) == 0
    return d


def test_mask_gen(tmp_path, capsys):
    out = tmp_path / "m.mrtn"
    assert main(["mask-gen", "--size", "64", "--R", "4", "--seed", "7", "--out", str(out)]) == 0
    m = load_tensor(out)
    assert m.shape == (64, 64) and m.sum() == 1024 and set(np.unique(m)) == {0.0, 1.0}
    assert "1024 samples" in capsys.readouterr().out


def test_param_count(capsys):
    assert main(["param-count", "--config", str(CONFIGS / "paper.cfg"), "--verify"]) == 0
    out = capsys.readouterr().out
    assert "reference   2.05e+06" in out and "matches" in out
    n = int(out.split()[1])
    assert 0.7 <= n / 2.05e6 <= 1.3


def test_usage_errors_exit_2(capsys):
    for argv in (["frobnicate"], ["mask-gen", "--bogus"], []):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_runtime_errors_are_one_line(tmp_path, capsys):
    assert main(["param-count", "--config", str(tmp_path / "missing.cfg")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: cannot read config") and err.count("\n") == 1
    assert main(["evaluate", "--baseline", "zero_filled", "--data", str(tmp_path),
                 "--out", str(tmp_path / "x.csv")]) == 1
    assert "manifest not found" in capsys.readouterr().err


def test_train_outputs(workdir):
    lines = (workdir / "m.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss" and len(lines) == 4
    assert (workdir / "m.mrck").read_bytes()[:4] == b"MRCK"


@pytest.mark.parametrize("method", [["--ckpt", "m.mrck"], ["--baseline", "zero_filled"],
                                    ["--baseline", "cg"]])
def test_evaluate_csv(workdir, method, capsys):
    args = [str(workdir / a) if a.endswith(".mrck") else a for a in method]
    if method[0] == "--baseline":
        args += ["--config", str(workdir / "tiny.cfg")]
    out = workdir / f"eval-{method[1]}.csv"
    assert main(["evaluate", *args, "--data", str(workdir / "data"), "--split", "test",
                 "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["slice", "R", "psnr_db", "ssim"]
    assert [(r["slice"], r["R"]) for r in rows] == [("5", "4"), ("6", "4")]
    assert "median PSNR" in capsys.readouterr().out


def test_reconstruct_and_erf(workdir, capsys):
    out = workdir / "recon"
    assert main(["reconstruct", "--ckpt", str(workdir / "m.mrck"), "--data", str(workdir / "data"),
                 "--out", str(out)]) == 0
    assert load_tensor(out / "0005-R4.recon.mrtn").shape == (16, 16, 2)
    assert read_pgm(out / "0006-R4.error.pgm").shape == (16, 16)
    assert main(["erf", "--ckpt", str(workdir / "m.mrck"), "--data", str(workdir / "data"),
                 "--count", "2", "--out", str(workdir / "erf.mrtn"),
                 "--pgm", str(workdir / "erf.pgm")]) == 0
    erf = load_tensor(workdir / "erf.mrtn")
    assert erf.shape == (16, 16) and erf.max() == 1.0
    assert "ERF mass outside radius 4" in capsys.readouterr().out


def test_resume_of_finished_run_is_a_no_op(workdir, tmp_path):
    # the schedule length lives in the checkpoint; resuming continues to its end
    assert main(["train", "--data", str(workdir / "data"), "--resume", str(workdir / "m.mrck"),
                 "--out", str(tmp_path / "c.mrck")]) == 0
    assert (tmp_path / "c.mrck").read_bytes() == (workdir / "m.mrck").read_bytes()


def test_gen_data_and_train_byte_identical(workdir, tmp_path):
    cfg = str(workdir / "tiny.cfg")
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    for f in sorted((workdir / "data").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "d" / f.relative_to(workdir / "data")).read_bytes()
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "d"), "--out",
                 str(tmp_path / "m.mrck"), "--log", str(tmp_path / "m.csv")]) == 0
    assert (tmp_path / "m.mrck").read_bytes() == (workdir / "m.mrck").read_bytes()
    assert (tmp_path / "m.csv").read_bytes() == (workdir / "m.csv").read_bytes()
