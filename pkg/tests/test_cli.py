import json

import numpy as np
import pytest

from sscn import cli, config
from sscn.data import load_voxel_sample


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = config.RunConfig()
    cfg.set("data.n_samples", "120").set("train.epochs", "10").set("paths.out_dir", str(tmp / "run"))
    path = tmp / "run.ini"
    config.save(cfg, path)
    return path


@pytest.fixture(scope="module")
def trained(cfg_path):
    assert cli.main(["train", str(cfg_path)]) == 0
    return cfg_path.parent / "run" / "final.ckpt"


def eval_report(cfg_path, ckpt, capsys, *extra):
    assert cli.main(["eval", str(cfg_path), str(ckpt), *extra]) == 0
    return json.loads(capsys.readouterr().out)


def test_train_writes_log_and_checkpoint(trained):
    run = trained.parent
    log = (run / "train.log").read_text().splitlines()
    assert log[0].startswith("epoch,lr") and len(log) == 11
    assert config.load(run / "config.ini") == config.load(run.parent / "run.ini")


def test_multiview_soft_check(cfg_path, trained, capsys):
    one = eval_report(cfg_path, trained, capsys, "--views", "1")
    three = eval_report(cfg_path, trained, capsys, "--views", "3")
    assert three["views"] == 3
    assert three["weighted_iou"] >= one["weighted_iou"] - 0.02
    saved = json.loads((trained.parent / "eval.json").read_text())
    assert saved == three


def test_eval_without_mask(cfg_path, trained, capsys):
    rep = eval_report(cfg_path, trained, capsys, "--no-mask")
    assert rep["mask"] is False and 0 <= rep["pixel_accuracy"] <= 1


def test_bench_single_site(tmp_path, capsys, monkeypatch):
    cfg = config.RunConfig()
    cfg.set("network.arch", "C3").set("network.layers", "3").set("data.n_samples", "8")
    path = tmp_path / "b.ini"
    config.save(cfg, path)
    assert cli.main(["bench", str(path), "--csv", str(tmp_path / "b.csv")]) == 0
    out = capsys.readouterr().out
    assert "total (multiply-adds, head excluded)" in out and "rule books built: 1" in out
    assert (tmp_path / "b.csv").read_text().startswith("layer,kind")


def test_voxelize(tmp_path, capsys):
    pts = np.random.default_rng(0).standard_normal((300, 3))
    np.savetxt(tmp_path / "c.pts", pts)
    np.savetxt(tmp_path / "c.seg", np.zeros(300, int), fmt="%d")
    assert cli.main(["voxelize", str(tmp_path / "c.pts"), str(tmp_path / "c.npz"), "--S", "16",
                     "--labels", str(tmp_path / "c.seg")]) == 0
    vs = load_voxel_sample(tmp_path / "c.npz")
    assert vs.tensor.spatial_size == (64, 64, 64) and np.all(vs.voxel_labels == 0)
    assert "active voxels" in capsys.readouterr().out


def test_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nepochs = 2\nlearning = 3\n")
    assert cli.main(["train", str(bad)]) == 2
    assert "bad.ini:3" in capsys.readouterr().err
    assert cli.main(["train", str(tmp_path / "missing.ini")]) == 2
    assert cli.main(["voxelize", str(tmp_path / "none.pts"), str(tmp_path / "o.npz")]) == 2


def test_thread_env(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    assert cli.main(["train", str(tmp_path / "x.ini")]) == 2
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    with cli._thread_limit():
        pass


def test_verify_passes_and_detects_fault(capsys):
    assert cli.main(["verify", "--quick"]) == 0
    assert "10/10 properties passed" in capsys.readouterr().out
    assert cli.main(["verify", "--quick", "--corrupt"]) == 1
    out = capsys.readouterr().out
    assert "FAIL  golden-network" in out
