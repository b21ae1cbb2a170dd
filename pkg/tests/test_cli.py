import json
import math
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from iqdet import cli
from iqdet.formats import write_annotations, write_tensors
from iqdet.geometry import Box
from iqdet.losses import LossReport
from iqdet.toy import train as toytrain

GOLDEN = Path(__file__).parent / "data" / "golden"


def _read_netpbm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    magic, dims, maxval, data = parts
    w, h = (int(v) for v in dims.split())
    assert int(maxval) == 255
    channels = {b"P5": 1, b"P6": 3}[magic]
    assert len(data) == w * h * channels
    return magic, np.frombuffer(data, dtype=np.uint8).reshape(h, w, channels)


def _quality_oracle(gmm_obj, dx, dy):
    total = 0.0
    for (mx, my), (sx, sy), p in zip(gmm_obj["mu"], gmm_obj["sigma"], gmm_obj["pi"]):
        total += p * math.exp(-0.5 * ((dx - mx) / sx) ** 2 - 0.5 * ((dy - my) / sy) ** 2)
    return min(total, 1.0)


def test_golden_assignment_is_byte_identical(tmp_path):
    out = tmp_path / "assignment.json"
    code = cli.main(["assign", str(GOLDEN / "features.iqt"), str(GOLDEN / "annotations.json"),
                     "--config", str(GOLDEN / "assign.cfg"), "--seed", "42", "--out", str(out)])
    assert code == 0
    assert out.read_bytes() == (GOLDEN / "assignment.json").read_bytes()


def test_golden_viz_is_byte_identical(tmp_path):
    code = cli.main(["viz", str(GOLDEN / "gmm.json"), "--resolution", "32", "--count", "12", "--seed", "5",
                     "--out", str(tmp_path / "viz")])
    assert code == 0
    for ext in (".pgm", ".ppm"):
        assert (tmp_path / f"viz{ext}").read_bytes() == (GOLDEN / f"viz{ext}").read_bytes()


def test_viz_matches_per_pixel_oracle(tmp_path):
    gmm_obj = json.loads((GOLDEN / "gmm.json").read_text())
    cli.main(["viz", str(GOLDEN / "gmm.json"), "--resolution", "24", "--count", "0", "--out", str(tmp_path / "v")])
    magic, img = _read_netpbm(tmp_path / "v.pgm")
    assert magic == b"P5" and img.shape == (24, 24, 1)
    for i in range(24):
        for j in range(24):
            q = _quality_oracle(gmm_obj, (j + 0.5) / 12 - 1, (i + 0.5) / 12 - 1)
            assert img[i, j, 0] == math.floor(255 * q + 0.5)


def test_viz_overlay_marks_samples_red(tmp_path):
    cli.main(["viz", str(GOLDEN / "gmm.json"), "--resolution", "32", "--count", "12", "--seed", "5",
              "--out", str(tmp_path / "v")])
    _, gray = _read_netpbm(tmp_path / "v.pgm")
    magic, rgb = _read_netpbm(tmp_path / "v.ppm")
    assert magic == b"P6"
    red = (rgb[..., 0] == 255) & (rgb[..., 1] == 0) & (rgb[..., 2] == 0)
    assert 1 <= red.sum() <= 12
    np.testing.assert_array_equal(rgb[~red], np.repeat(gray[~red], 3, axis=1))


def test_viz_fixed_gmm_peaks_at_center(tmp_path):
    p = tmp_path / "g.json"
    p.write_text('{"mu": [[0, 0]], "sigma": [[1, 1]], "pi": [1]}')
    cli.main(["viz", str(p), "--resolution", "16", "--count", "0", "--out", str(tmp_path / "v")])
    _, img = _read_netpbm(tmp_path / "v.pgm")
    centre = img[7:9, 7:9, 0]
    assert np.all(centre == img.max()) and np.sum(img == img.max()) == 4


def test_viz_rejects_small_resolution(tmp_path):
    assert cli.main(["viz", str(GOLDEN / "gmm.json"), "--resolution", "15", "--out", str(tmp_path / "v")]) == 2


def test_sample_default_count_determinism_and_range(capsys):
    cli.main(["sample", str(GOLDEN / "gmm.json"), "--seed", "9"])
    first = capsys.readouterr().out
    cli.main(["sample", str(GOLDEN / "gmm.json"), "--seed", "9"])
    assert capsys.readouterr().out == first
    obj = json.loads(first)
    assert obj["count"] == 12 and len(obj["offsets"]) == 12
    assert np.all(np.abs(np.array(obj["offsets"])) < 1)


def test_sample_invalid_gmm_exit_code(tmp_path):
    p = tmp_path / "g.json"
    p.write_text('{"mu": [[0, 0]], "sigma": [[-1, 1]], "pi": [1]}')
    assert cli.main(["sample", str(p)]) == 2
    p.write_text("{")
    assert cli.main(["sample", str(p)]) == 2


def test_assign_empty_instances(tmp_path):
    write_annotations(tmp_path / "a.json", (64, 64), [], [])
    out = tmp_path / "o.json"
    assert cli.main(["assign", str(GOLDEN / "features.iqt"), str(tmp_path / "a.json"),
                     "--config", str(GOLDEN / "assign.cfg"), "--out", str(out)]) == 0
    obj = json.loads(out.read_text())
    assert obj["positives"] == [] and obj["instances"] == []
    assert obj["negatives"]["P3"]["rle_rows"] == [[[0, 8]]] * 8
    assert obj["negatives"]["P4"]["rle_rows"] == [[[0, 4]]] * 4


def test_assign_center_mode_and_seed_dependence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("mode=center\n")
    runs = []
    for seed in ("1", "1", "2"):
        out = tmp_path / f"o{len(runs)}.json"
        cli.main(["assign", str(GOLDEN / "features.iqt"), str(GOLDEN / "annotations.json"), "--config", str(cfg),
                  "--seed", seed, "--out", str(out)])
        runs.append(out.read_bytes())
    assert runs[0] == runs[1] != runs[2]
    gm = json.loads(runs[0])["instances"][0]["gmms"][0]
    assert gm["sigma"] == [[0.5, 0.5], [0.5, 0.5]] and gm["pi"] == [0.5, 0.5]


@pytest.mark.parametrize("case,code", [
    ("missing_features", 2), ("missing_level", 2), ("box_outside", 3), ("bad_config", 2),
])
def test_assign_exit_codes(tmp_path, case, code):
    feats, ann, cfg = GOLDEN / "features.iqt", GOLDEN / "annotations.json", GOLDEN / "assign.cfg"
    if case == "missing_features":
        feats = tmp_path / "nope.iqt"
    elif case == "missing_level":
        feats = tmp_path / "f.iqt"
        write_tensors(feats, {"P3": np.zeros((4, 8, 8), dtype=np.float32)})
    elif case == "box_outside":
        ann = tmp_path / "a.json"
        ann.write_text('{"image_size": [64, 64], "instances": [{"box": [50, 50, 70, 60], "class": 0}]}')
    elif case == "bad_config":
        cfg = tmp_path / "c.cfg"
        cfg.write_text("pyramid=P3:12\n")
    assert cli.main(["assign", str(feats), str(ann), "--config", str(cfg)]) == code


def test_train_toy_zero_steps_writes_initial_checkpoint_only(tmp_path):
    assert cli.main(["train-toy", "--steps", "0", "--out", str(tmp_path / "r")]) == 0
    assert sorted(p.name for p in (tmp_path / "r").iterdir()) == ["checkpoint.iqt", "checkpoint.json"]
    params, cfg = toytrain.load_checkpoint(tmp_path / "r" / "checkpoint")
    init = toytrain.init_state(cfg)["params"]
    for k, v in init.items():
        np.testing.assert_array_equal(params[k], v.astype(np.float32))


def test_train_and_eval_toy_accept_both_modes(tmp_path, capsys):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("batch_size=1\nchannels=8\nhidden=16\n")
    for mode in ("iqdet", "center"):
        run = tmp_path / mode
        assert cli.main(["train-toy", "--config", str(cfg), "--mode", mode, "--steps", "2", "--seed", "3",
                         "--out", str(run)]) == 0
        manifest = json.loads((run / "checkpoint.json").read_text())
        assert manifest["config"]["mode"] == mode and manifest["config"]["seed"] == 3
        assert len((run / "log.jsonl").read_text().splitlines()) == 2
        out = tmp_path / f"{mode}_eval.json"
        assert cli.main(["eval-toy", "--checkpoint", str(run / "checkpoint"), "--count", "4", "--out", str(out)]) == 0
        metrics = json.loads(out.read_text())
        assert set(metrics) == {"ap50", "ap75", "mean_pos_iou", "n_scenes"} and metrics["n_scenes"] == 4
    capsys.readouterr()


def test_train_toy_nan_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(toytrain, "loss_and_grads",
                        lambda *a: (LossReport.build(float("nan"), 0, 0, 0, 1), {}, {}))
    assert cli.main(["train-toy", "--steps", "1", "--out", str(tmp_path / "r")]) == 4
    assert (tmp_path / "r" / "abort_step0.json").exists()


def test_train_toy_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("unknown_key=1\n")
    assert cli.main(["train-toy", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    cfg.write_text("lr=-1\n")
    assert cli.main(["train-toy", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2


def test_eval_toy_needs_checkpoint(tmp_path):
    assert cli.main(["eval-toy"]) == 2
    assert cli.main(["eval-toy", "--checkpoint", str(tmp_path / "none")]) == 2


def test_seed_range_and_thread_env(monkeypatch):
    assert cli.main(["sample", str(GOLDEN / "gmm.json"), "--seed", str(2**64)]) == 2
    monkeypatch.setenv("IQDET_THREADS", "zero")
    assert cli.main(["sample", str(GOLDEN / "gmm.json")]) == 2
    monkeypatch.setenv("IQDET_THREADS", "1")
    assert cli.main(["sample", str(GOLDEN / "gmm.json"), "--out", "/dev/null"]) == 0


def test_report_writes_csv_and_figures(tmp_path, capsys):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("batch_size=1\nchannels=8\nhidden=16\n")
    for mode in ("iqdet", "center"):
        cli.main(["train-toy", "--config", str(cfg), "--mode", mode, "--steps", "3", "--out", str(tmp_path / mode)])
    capsys.readouterr()
    out = tmp_path / "rep"
    assert cli.main(["report", str(tmp_path / "iqdet"), str(tmp_path / "center"), "--out", str(out)]) == 0
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[0] == "run,steps,final_total,final_mean_pos_iou,final_mu_std,window"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["iqdet", "center"]
    assert capsys.readouterr().out.splitlines() == lines
    for name in ("loss.png", "pos_iou.png", "mu_std.png"):
        assert (out / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert cli.main(["report", str(tmp_path / "missing"), "--out", str(out)]) == 2


@pytest.mark.skipif(shutil.which("iqdet") is None, reason="console script not installed")
def test_console_script(tmp_path):
    r = subprocess.run(["iqdet", "sample", str(GOLDEN / "gmm.json"), "--count", "3"], capture_output=True, text=True)
    assert r.returncode == 0 and len(json.loads(r.stdout)["offsets"]) == 3
    r = subprocess.run([sys.executable, "-m", "iqdet.cli", "viz", str(GOLDEN / "gmm.json"), "--resolution", "4",
                        "--out", str(tmp_path / "v")], capture_output=True, text=True)
    assert r.returncode == 2 and "resolution" in r.stderr
