import csv
import json

import numpy as np
import pytest

from raydepth.cli import main, pointcloud_from_depth
from raydepth.fileio import read_pfm, read_ply, write_pfm, write_ppm
from raydepth.geometry import Extrinsics, PinholeIntrinsics, write_intrinsics
from raydepth.synthdata import Dataset

TINY = {
    "seed": 0,
    "network": {"n_latents": 4, "latent_dim": 8, "heads": 2, "self_layers": 1, "encoder_channels": [2, 2, 2]},
    "fourier": {"bands": 2, "max_res": 8},
    "schedule": {"epochs": 2, "batch_size": 2, "query_stride": 4},
    "data": {
        "samples_per_family": 5,
        "val_fraction": 0.4,
        "families": [
            {"label": "train-A", "focal_range": [40, 60], "resolutions": [[16, 24]]},
            {"label": "test-B", "focal_range": [80, 100], "resolutions": [[16, 24]]},
        ],
    },
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert main(["synth", "--config", str(root / "tiny.json"), str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "tiny.json"), str(root / "data"), str(root / "run")]) == 0
    return root


def _run(*args):
    return main([str(a) for a in args])


def test_synth_counts_and_determinism(workspace, tmp_path, capsys):
    ds = Dataset(workspace / "data")
    assert len(ds.entries) == 10 and ds.labels == ["test-B", "train-A"]
    assert (workspace / "data/config.json").exists()
    assert _run("synth", "--config", workspace / "tiny.json", tmp_path / "again") == 0
    assert "wrote 10 samples" in capsys.readouterr().out
    for f in (workspace / "data").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "again" / f.relative_to(workspace / "data")).read_bytes()


def test_synth_validation_error_names_key(tmp_path, capsys):
    bad = json.loads(json.dumps(TINY))
    bad["data"]["families"][0]["focal_range"] = [0, 10]
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert _run("synth", "--config", tmp_path / "bad.json", tmp_path / "d") == 1
    assert "families[0]" in capsys.readouterr().err
    (tmp_path / "unk.json").write_text(json.dumps({"schedule": {"epoch": 1}}))
    assert _run("synth", "--config", tmp_path / "unk.json", tmp_path / "d") == 1
    assert "schedule.epoch" in capsys.readouterr().err


def test_train_outputs(workspace):
    run = workspace / "run"
    rows = (run / "losses.csv").read_text().splitlines()
    assert rows[0] == "epoch,L_D,L_N,L_K,total,lr" and len(rows) == 3
    assert (run / "checkpoint.ckpt").exists() and (run / "epoch_001.ckpt").exists()
    assert json.loads((run / "config.json").read_text())["schedule"]["epochs"] == 2


def test_train_zero_epochs_and_resume(workspace, tmp_path):
    cfg = json.loads(json.dumps(TINY))
    cfg["schedule"]["epochs"] = 0
    (tmp_path / "zero.json").write_text(json.dumps(cfg))
    assert _run("train", "--config", tmp_path / "zero.json", workspace / "data", tmp_path / "z") == 0
    assert [p.name for p in (tmp_path / "z").glob("*.ckpt")] == ["checkpoint.ckpt"]
    # resuming a 1-epoch run to the 2-epoch total matches the straight run
    cfg["schedule"]["epochs"] = 1
    (tmp_path / "one.json").write_text(json.dumps(cfg))
    assert _run("train", "--config", tmp_path / "one.json", workspace / "data", tmp_path / "r") == 0
    ckpt = tmp_path / "r/checkpoint.ckpt"
    assert _run("train", "--config", workspace / "tiny.json", "--resume", ckpt, workspace / "data", tmp_path / "r") == 0
    assert (tmp_path / "r/losses.csv").read_bytes() == (workspace / "run/losses.csv").read_bytes()
    assert ckpt.read_bytes() == (workspace / "run/checkpoint.ckpt").read_bytes()


def test_train_missing_dataset_exit_code(tmp_path):
    assert _run("train", tmp_path / "nowhere", tmp_path / "out") == 1


def test_eval_reports(workspace, tmp_path):
    ckpt = workspace / "run/checkpoint.ckpt"
    cfg = workspace / "tiny.json"
    assert _run("eval", "--config", cfg, "--samples", 1, ckpt, workspace / "data", tmp_path / "e1") == 0
    assert _run("eval", "--config", cfg, "--samples", 1, "--median-scale", ckpt, workspace / "data", tmp_path / "e2") == 0
    plain = json.loads((tmp_path / "e1/report.json").read_text())
    scaled = json.loads((tmp_path / "e2/report.json").read_text())
    assert set(plain) == {"train-A/metric", "test-B/metric", "all/metric"}
    assert set(scaled) == set(plain) | {"train-A/scaled", "test-B/scaled", "all/scaled"}
    for k in plain:
        assert plain[k] == scaled[k]
    assert scaled["all/scaled"]["median_scaled"] and scaled["all/scaled"]["scale"] != 1.0
    for pfm in (tmp_path / "e1/sigma").glob("*.pfm"):
        assert np.all(read_pfm(pfm) == 0)
    rows = list(csv.reader(open(tmp_path / "e1/report.csv")))
    assert rows[0][0] == "name" and len(rows) == 4


def test_eval_rejects_mismatched_config(workspace, tmp_path, capsys):
    cfg = json.loads(json.dumps(TINY))
    cfg["network"]["n_latents"] = 6
    (tmp_path / "other.json").write_text(json.dumps(cfg))
    code = _run("eval", "--config", tmp_path / "other.json", workspace / "run/checkpoint.ckpt", workspace / "data", tmp_path / "e")
    assert code == 1 and "different network" in capsys.readouterr().err


def test_curves(workspace, tmp_path):
    ckpt = workspace / "run/checkpoint.ckpt"
    cfg = workspace / "tiny.json"
    assert _run("curves", "--config", cfg, "--samples", 4, "--fractions", "0.5,1.0,0.25", ckpt, workspace / "data", tmp_path / "c.csv") == 0
    rows = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert [float(r["fraction"]) for r in rows] == [1.0, 0.5, 0.25]
    assert _run("eval", "--config", cfg, "--samples", 4, ckpt, workspace / "data", tmp_path / "e") == 0
    report = json.loads((tmp_path / "e/report.json").read_text())["all/metric"]
    assert float(rows[0]["abs_rel"]) == pytest.approx(report["abs_rel"], rel=1e-5)
    assert _run("curves", "--config", cfg, "--samples", 1, "--fractions", "1.0,0.5", ckpt, workspace / "data", tmp_path / "c1.csv") == 0
    counts = [int(r["count"]) for r in csv.DictReader(open(tmp_path / "c1.csv"))]
    assert counts[1] < counts[0]


def test_infer(workspace, tmp_path):
    s = Dataset(workspace / "data").entries[0][0]
    stem = workspace / "data/samples" / s
    args = ["infer", "--samples", 3, "--seed", 5, workspace / "run/checkpoint.ckpt", stem.with_suffix(".ppm"), stem.with_suffix(".txt")]
    assert _run(*args, tmp_path / "a") == 0
    assert _run(*args, tmp_path / "b") == 0
    depth = read_pfm(tmp_path / "a/depth.pfm")
    assert depth.shape == (16, 24)
    assert np.all(depth > 0.1) and np.all(depth < 80.0)
    for name in ("depth.pfm", "sigma.pfm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert _run("infer", workspace / "run/checkpoint.ckpt", stem.with_suffix(".ppm"), tmp_path / "missing.txt", tmp_path / "c") == 1


def _camera(tmp_path, name, ext=None):
    K = PinholeIntrinsics(20.0, 20.0, 3.5, 2.5, 8, 6)
    depth = np.full((6, 8), 3.0, np.float32)
    depth[0, 0] = np.nan
    sigma = np.arange(48, dtype=np.float32).reshape(6, 8)
    write_pfm(tmp_path / f"{name}.pfm", depth)
    write_pfm(tmp_path / f"{name}_s.pfm", sigma)
    write_ppm(tmp_path / f"{name}.ppm", np.full((6, 8, 3), 0.5))
    write_intrinsics(tmp_path / f"{name}.txt", K, ext)
    return [tmp_path / f"{name}{s}" for s in (".pfm", ".txt", ".ppm", "_s.pfm")]


def test_pointcloud_counts(tmp_path):
    d, k, i, s = _camera(tmp_path, "a")
    assert _run("pointcloud", "--depth", d, "--intrinsics", k, "--image", i, "--out", tmp_path / "a.ply") == 0
    assert len(read_ply(tmp_path / "a.ply")[0]) == 47
    assert _run("pointcloud", "--depth", d, "--intrinsics", k, "--image", i, "--sigma", s,
                "--filter-fraction", 0.5, "--out", tmp_path / "h.ply") == 0
    assert len(read_ply(tmp_path / "h.ply")[0]) == 23
    cams = [_camera(tmp_path, f"c{j}", Extrinsics(np.eye(3), [float(j), 0.0, 0.0])) for j in range(6)]
    flags = []
    for n, col in (("--depth", 0), ("--intrinsics", 1), ("--image", 2)):
        flags += [n] + [c[col] for c in cams]
    assert _run("pointcloud", *flags, "--out", tmp_path / "m.ply") == 0
    pts, _ = read_ply(tmp_path / "m.ply")
    assert len(pts) == 6 * 47
    assert pts[:, 0].max() - pts[:, 0].min() > 5
    assert _run("pointcloud", "--depth", d, d, "--intrinsics", k, "--image", i, "--out", tmp_path / "x.ply") == 1


def test_pointcloud_filter_keeps_lowest_sigma():
    K = PinholeIntrinsics(10.0, 10.0, 1.5, 1.5, 4, 4)
    depth = np.full((4, 4), 2.0)
    sigma = np.arange(16.0).reshape(4, 4)[::-1]
    pts, cols = pointcloud_from_depth(depth, K, np.zeros((4, 4, 3)), sigma, 0.25)
    assert len(pts) == 4 and np.allclose(pts[:, 1], (3 - 1.5) / 10 * 2)
