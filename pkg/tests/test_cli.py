import filecmp
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from warpgrid.cli import COLORMAP, LOCK_NAME, ConfigError, RunConfig, heatmap, main
from warpgrid.imagery import identity_grid, load_grid, load_image, save_grid, save_image
from warpgrid.synth import generate_texture


def _files(d):
    return sorted(p.name for p in d.iterdir())


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert _run("synth", "--out", d, "--count", 2, "--size", 32, "--seed", 7) == 0
    return d


@pytest.fixture
def identical_pair(tmp_path):
    img = generate_texture(16, 16, "blobs", 3)
    save_image(img, tmp_path / "a.png")
    return tmp_path / "a.png"


# synth -------------------------------------------------------------------------


def test_synth_count_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert _run("synth", "--count", 10, "--size", 64, "--seed", 7, "--out", d) == 0
    names = _files(a)
    assert len(names) == 10 * 9 + 1 and "manifest.json" in names and LOCK_NAME not in names
    _, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors


def test_synth_negative_count_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        _run("synth", "--count", -1, "--out", tmp_path)
    assert exc.value.code == 2


# solve -------------------------------------------------------------------------


def test_solve_identity_pair(identical_pair, tmp_path):
    out = tmp_path / "out"
    assert _run("solve", "--src", identical_pair, "--tgt", identical_pair, "--out", out, "--levels", 2,
                "--iterations", 40) == 0
    assert _files(out) == ["pair_conf_s.png", "pair_conf_t.png", "pair_gst.wgrd", "pair_gts.wgrd", "pair_trace.json"]
    ident = identity_grid(16, 16).coords
    for name in ("pair_gst.wgrd", "pair_gts.wgrd"):
        assert np.abs(load_grid(out / name).coords - ident).max() <= 0.01
    trace = json.loads((out / "pair_trace.json").read_text())
    assert len(trace) == 2 * 40 + 40 and all(np.isfinite(r["total"]) for r in trace)
    conf = load_image(out / "pair_conf_s.png")
    assert conf.channels == 1


def test_solve_zero_iterations(dataset, tmp_path):
    out = tmp_path / "o"
    assert _run("solve", "--data", dataset, "--id", "00000", "--iterations", 0, "--out", out) == 0
    np.testing.assert_array_equal(load_grid(out / "00000_gst.wgrd").coords, identity_grid(32, 32).coords)
    assert json.loads((out / "00000_trace.json").read_text()) == []


def test_exit_codes(dataset, tmp_path, capsys):
    assert _run("solve", "--src", tmp_path / "missing.png", "--tgt", tmp_path / "missing.png",
                "--out", tmp_path / "o1") == 3
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"sede": 1}))
    assert _run("--config", cfg, "solve", "--data", dataset, "--out", tmp_path / "o2") == 2
    cfg.write_text(json.dumps({"weights": {"matching": 1.7e308, "reconstruction": 1.7e308}}))
    assert _run("--config", cfg, "solve", "--data", dataset, "--id", "00000", "--iterations", 2,
                "--out", tmp_path / "o3") == 4
    assert "numerical failure" in capsys.readouterr().err
    assert _run("eval", "--data", tmp_path / "nowhere", "--pred", dataset, "--out", tmp_path / "o4") == 3


def test_lock_conflict(dataset, tmp_path):
    out = tmp_path / "locked"
    out.mkdir()
    (out / LOCK_NAME).write_text("1\n")
    assert _run("solve", "--data", dataset, "--iterations", 0, "--out", out) == 3
    assert _files(out) == [LOCK_NAME]


def test_parallel_workers_match_serial(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("WARPGRID_THREADS", "2")
    assert _run("solve", "--data", dataset, "--iterations", 3, "--levels", 1, "--out", tmp_path / "par") == 0
    monkeypatch.setenv("WARPGRID_THREADS", "1")
    assert _run("solve", "--data", dataset, "--iterations", 3, "--levels", 1, "--out", tmp_path / "ser") == 0
    names = _files(tmp_path / "ser")
    assert names == _files(tmp_path / "par")
    _, mismatch, _ = filecmp.cmpfiles(tmp_path / "ser", tmp_path / "par", names, shallow=False)
    assert not mismatch


# eval --------------------------------------------------------------------------


def test_eval_ground_truth_against_itself(dataset, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"alphas": [0.2, 0.1, 0.05, 0.01]}))
    assert _run("--config", cfg, "eval", "--data", dataset, "--pred", dataset, "--out", tmp_path / "e") == 0
    rep = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert set(rep["pck"]) == {"0.2", "0.1", "0.05", "0.01"}
    assert all(v == 1.0 for v in rep["pck"].values())
    assert rep["synthetic_dense"] <= 1e-6 and rep["epe"] == 0
    rows = (tmp_path / "e" / "eval.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[0].startswith("id,pck@0.2")


def test_eval_default_alphas(dataset, tmp_path):
    assert _run("eval", "--data", dataset, "--pred", dataset, "--out", tmp_path / "e") == 0
    rep = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert list(rep["pck"]) == ["0.01", "0.05", "0.1"]  # sorted keys


def test_eval_reports_errors_for_identity(dataset, tmp_path):
    pred = tmp_path / "p"
    pred.mkdir()
    for rec in json.loads((dataset / "manifest.json").read_text())["pairs"]:
        for suffix in ("gst", "gts"):
            save_grid(identity_grid(32, 32), pred / f"{rec['id']}_{suffix}.wgrd")
    assert _run("eval", "--data", dataset, "--pred", pred, "--out", tmp_path / "e") == 0
    rep = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert rep["epe"] > 0.5 and rep["synthetic_dense"] > 0


# viz ---------------------------------------------------------------------------


def test_viz_identity(identical_pair, tmp_path):
    pred = tmp_path / "pred"
    pred.mkdir()
    for s in ("gst", "gts"):
        save_grid(identity_grid(16, 16), pred / f"pair_{s}.wgrd")
    out = tmp_path / "viz"
    assert _run("viz", "--src", identical_pair, "--tgt", identical_pair, "--pred", pred, "--out", out) == 0
    assert _files(out) == ["pair_checker.png", "pair_confidence.png", "pair_cycle_error.png", "pair_warped.png"]
    warped = np.asarray(load_image(out / "pair_warped.png"), np.float64)
    target = np.asarray(load_image(identical_pair), np.float64)
    assert np.abs(warped - target).max() <= 1 / 255
    heat = np.asarray(load_image(out / "pair_cycle_error.png"), np.float64)
    np.testing.assert_allclose(heat, (COLORMAP[0] / 255.0)[:, None, None] * np.ones((3, 16, 16)), atol=1e-7)


def test_heatmap_colormap():
    assert COLORMAP.shape == (256, 3) and COLORMAP.dtype == np.uint8
    zero = heatmap(np.zeros((4, 4)))
    assert np.unique(zero.reshape(3, -1), axis=1).shape[1] == 1
    np.testing.assert_array_equal(heatmap(np.array([[10.0]]))[:, 0, 0], COLORMAP[255] / 255.0)
    # luminance rises along the table
    lum = COLORMAP.astype(float) @ [0.299, 0.587, 0.114]
    assert np.all(np.diff(lum) >= 0)


# config ------------------------------------------------------------------------


def test_run_config_defaults_and_validation(tmp_path):
    cfg = RunConfig()
    assert cfg.alphas == [0.1, 0.05, 0.01] and cfg.solver == "direct"
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"colour": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"weights": {"nope": 1}})
    with pytest.raises(ConfigError):
        RunConfig(solver="magic")
    assert RunConfig(iterations=5).solve_config().schedule == (("iii", 5), ("iv", 5))


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"size": 16, "count": 1, "seed": 3}))
    assert _run("--config", cfg, "synth", "--out", tmp_path / "a", "--count", 2) == 0
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(m["pairs"]) == 2 and m["config"]["size"] == 16 and m["config"]["seed"] == 3


def test_train_writes_stage_checkpoints(dataset, tmp_path):
    data = tmp_path / "d16"
    assert _run("synth", "--out", data, "--count", 2, "--size", 16) == 0
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"budgets": {"i": 1, "ii": 1, "iii": 1, "iv": 1}, "base_channels": 4}))
    out = tmp_path / "t"
    assert _run("--config", cfg, "train", "--data", data, "--keypoint-data", data, "--heldout", data,
                "--out", out) == 0
    assert _files(out) == ["metrics.jsonl", "stage_i.wckp", "stage_ii.wckp", "stage_iii.wckp", "stage_iv.wckp"]
    solved = tmp_path / "s"
    assert _run("solve", "--solver", "predictor", "--checkpoint", out / "stage_iv.wckp", "--data", data,
                "--out", solved) == 0
    assert (solved / "00001_gts.wgrd").exists()


def test_console_entry_point(tmp_path):
    exe = shutil.which("warpgrid")
    cmd = [exe] if exe else [sys.executable, "-m", "warpgrid.cli"]
    r = subprocess.run(cmd + ["synth", "--out", str(tmp_path), "--count", "0"], capture_output=True, text=True)
    assert r.returncode == 0 and "wrote 0 pairs" in r.stdout
    r = subprocess.run(cmd + ["bogus"], capture_output=True, text=True)
    assert r.returncode == 2
