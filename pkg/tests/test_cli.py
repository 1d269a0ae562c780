import subprocess
import sys

import numpy as np
import pytest

from gcnreg.benchgen import parse_manifest
from gcnreg.cli import EXIT_ERROR, EXIT_OK, dispatch
from gcnreg.evaluation import read_csv
from gcnreg.features import DescriptorConfig
from gcnreg.geometry import load_xyz
from gcnreg.matching import LbpConfig
from gcnreg.training import TrainConfig, load_checkpoint, read_loss_log

TINY = TrainConfig(
    n_points=64,
    samples_per_epoch=2,
    descriptor=DescriptorConfig(k_graph=6, layer_widths=(8, 8, 8), out_dim=8, align_point_widths=(8, 8), align_hidden=8),
    lbp=LbpConfig(k_candidates=4, k_source=4),
)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY.to_text())
    return d


@pytest.fixture(scope="module")
def trained(workdir):
    ck = workdir / "m.ckpt"
    code = dispatch(["--config", str(workdir / "tiny.cfg"), "train", "--count", "3", "--out", str(ck)])
    assert code == EXIT_OK
    return ck


def test_no_arguments_is_usage_error(capsys):
    assert dispatch([]) == EXIT_ERROR
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert dispatch(["frobnicate"]) == EXIT_ERROR
    assert "invalid choice" in capsys.readouterr().err


def test_bad_option_value():
    assert dispatch(["sweep", "--ckpt", "x", "--out", "y", "--levels", "a,b"]) == EXIT_ERROR
    assert dispatch(["--threads", "0", "selftest"]) == EXIT_ERROR


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "gcnreg"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "gen" in proc.stderr and "selftest" in proc.stderr


def test_gen_writes_manifest_and_pairs(workdir, capsys):
    out = workdir / "bench"
    args = ["--config", str(workdir / "tiny.cfg"), "--seed", "9", "gen", "--count", "2", "--pairs", "2",
            "--out", str(out), "--deformation", "0.3", "--outliers", "0.1"]
    assert dispatch(args) == EXIT_OK
    text = capsys.readouterr().out
    assert "# seed = 9" in text
    entries = parse_manifest((out / "manifest.csv").read_text())
    assert len(entries) == 4
    assert all(spec.deform_level == 0.3 and spec.outlier_ratio == 0.1 for _, spec in entries)
    src = load_xyz(out / "pair_0003.source.xyz")
    tgt = load_xyz(out / "pair_0003.target.xyz")
    gt = np.loadtxt(out / "pair_0003.gt", dtype=int)
    assert len(src.points) == 64 and len(tgt.points) == 64 + 7 and len(gt) == 64
    first = (out / "manifest.csv").read_bytes()
    assert dispatch(args) == EXIT_OK
    assert (out / "manifest.csv").read_bytes() == first


def test_gen_rejects_bad_level(workdir, capsys):
    assert dispatch(["gen", "--out", str(workdir / "bad"), "--rotation", "2.0"]) == EXIT_ERROR
    assert "rotation" in capsys.readouterr().err


def test_train_writes_checkpoint_and_log(trained):
    ck = load_checkpoint(trained)
    assert ck.step == 2
    assert TrainConfig.from_text(ck.config) == TINY
    assert len(read_loss_log(f"{trained}.loss.csv")) == 2


def test_resume_continues_step_count(workdir, trained):
    out = workdir / "m2.ckpt"
    assert dispatch(["--config", str(workdir / "tiny.cfg"), "train", "--count", "3",
                     "--resume", str(trained), "--out", str(out)]) == EXIT_OK
    assert load_checkpoint(out).step == 4
    log = (workdir / "m2.ckpt.loss.csv").read_text().splitlines()
    assert log[-1].startswith("3,")


def test_register_reports_distances(workdir, trained, capsys):
    bench = workdir / "reg"
    assert dispatch(["--config", str(workdir / "tiny.cfg"), "gen", "--count", "1", "--out", str(bench),
                     "--deformation", "0.3"]) == EXIT_OK
    capsys.readouterr()
    stem = bench / "pair_0000"
    args = ["register", "--source", f"{stem}.source.xyz", "--target", f"{stem}.target.xyz",
            "--ckpt", str(trained), "--gt", f"{stem}.gt", "--out", str(bench / "w.xyz")]
    assert dispatch(args) == EXIT_OK
    lines = dict(ln.split(" ", 1) for ln in capsys.readouterr().out.splitlines() if not ln.startswith("#"))
    assert float(lines["mean_distance"]) < float(lines["mean_distance_before"])
    assert len(load_xyz(bench / "w.xyz").points) == 64


def test_register_bad_checkpoint(workdir, capsys):
    (workdir / "junk.ckpt").write_bytes(b"not a checkpoint")
    (workdir / "p.xyz").write_text("0 0 0\n1 0 0\n")
    code = dispatch(["register", "--source", str(workdir / "p.xyz"), "--target", str(workdir / "p.xyz"),
                     "--ckpt", str(workdir / "junk.ckpt")])
    assert code == EXIT_ERROR
    assert "offset" in capsys.readouterr().err


def test_missing_file(workdir):
    assert dispatch(["register", "--source", "nope.xyz", "--target", "nope.xyz", "--ckpt", "nope"]) == EXIT_ERROR


def test_sweep_with_baseline(workdir, trained):
    prefix = workdir / "sw"
    args = ["--config", str(workdir / "tiny.cfg"), "sweep", "--count", "2", "--ckpt", str(trained),
            "--baseline-ckpt", str(trained), "--levels", "0.1,0.3", "--trials", "2", "--no-timing",
            "--out", str(prefix)]
    assert dispatch(args) == EXIT_OK
    rows = read_csv(f"{prefix}_aligned.csv")
    assert [r.level for r in rows] == [0.1, 0.3]
    assert (workdir / "sw.svg").exists()
    first = (workdir / "sw_aligned.csv").read_bytes()
    assert dispatch(args) == EXIT_OK
    assert (workdir / "sw_aligned.csv").read_bytes() == first


def test_selftest_passes():
    assert dispatch(["selftest"]) == EXIT_OK


def test_gradcheck_passes(capsys):
    assert dispatch(["gradcheck", "--max-coords", "3"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
