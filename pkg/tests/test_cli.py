import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from perspective3d import cli, losses
from perspective3d.box3d import Box3D, corners
from perspective3d.errors import BehindCamera


def run(*argv):
    return cli.main([str(a) for a in argv])


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


def digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


@pytest.fixture
def dataset(tmp_path):
    cfg = write_json(tmp_path / "gen.json", {"num_scenes": 6, "seed": 7, "objects": [1, 3]})
    assert run("gen", "--config", cfg, "--out", tmp_path / "ds") == 0
    return tmp_path / "ds"


def test_gen_writes_files_and_is_stable(tmp_path):
    cfg = write_json(tmp_path / "gen.json", {"num_scenes": 10})
    assert run("gen", "--config", cfg, "--seed", 7, "--out", tmp_path / "a") == 0
    assert run("gen", "--config", cfg, "--seed", 7, "--out", tmp_path / "b") == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted([f"scene_{i:05d}.json" for i in range(10)] + ["index.json", "manifest.json"])
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["command"] == "gen" and manifest["seed"] == 7 and manifest["config"]["seed"] == 7
    assert manifest["outputs"]["index.json"] == digest(tmp_path / "a")["index.json"]
    assert len(manifest["config_hash"]) == 64


def test_gen_toml_config(tmp_path):
    cfg = tmp_path / "gen.toml"
    cfg.write_text('num_scenes = 2\nseed = 3\nnoise = 0.01\ntilt = [0.0, 0.1]\n')
    assert run("gen", "--config", cfg, "--out", tmp_path / "ds") == 0
    index = json.loads((tmp_path / "ds" / "index.json").read_text())
    assert index["num_scenes"] == 2 and index["config"]["noise"] == 0.01


@pytest.mark.parametrize(
    "config, field",
    [
        ({"num_scenes": "many"}, "num_scenes"),
        ({"distance": [5, 2]}, "distance"),
        ({"unknown_knob": 1}, "unknown_knob"),
        ({"noise": -1}, "noise"),
    ],
)
def test_gen_invalid_config(tmp_path, capsys, config, field):
    cfg = write_json(tmp_path / "bad.json", config)
    assert run("gen", "--config", cfg, "--out", tmp_path / "x") == cli.EXIT_CONFIG
    assert field in capsys.readouterr().err


def test_gen_unparseable_config(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{not json")
    assert run("gen", "--config", cfg, "--out", tmp_path / "x") == 2
    assert run("gen", "--config", tmp_path / "missing.json", "--out", tmp_path / "x") == 2


def test_gen_empty(tmp_path):
    cfg = write_json(tmp_path / "gen.json", {"num_scenes": 0})
    assert run("gen", "--config", cfg, "--out", tmp_path / "ds") == 0
    assert json.loads((tmp_path / "ds" / "index.json").read_text())["scenes"] == []
    assert run("fit", tmp_path / "ds", "--out", tmp_path / "fit") == 0
    assert json.loads((tmp_path / "fit" / "detections.json").read_text()) == []
    assert run("eval", tmp_path / "fit" / "detections.json", tmp_path / "ds", "--out", tmp_path / "ev") == 0
    assert json.loads((tmp_path / "ev" / "metrics.json").read_text())["mAP"] == 0.0


def test_manifest_replays(tmp_path, dataset):
    assert run("gen", "--config", dataset / "manifest.json", "--out", tmp_path / "again") == 0
    assert digest(tmp_path / "again") == digest(dataset)


def test_fit_exact_dataset_recovers_boxes(tmp_path, dataset):
    assert run("fit", dataset, "--out", tmp_path / "fit") == 0
    dets = json.loads((tmp_path / "fit" / "detections.json").read_text())
    _, scenes = cli.load_dataset(dataset)
    truth = {(s.scene_id, k): o.box for s in scenes for k, o in enumerate(s.objects)}
    assert len(dets) == len(truth)
    for d in dets:
        box = Box3D.from_dict(d["box"])
        assert np.max(np.abs(corners(box) - corners(truth[(d["image_id"], d["object"])]))) < 1e-6
        assert d["score"] == pytest.approx(np.exp(-d["loss"]))
        assert d["score"] > 0.999
    traces = (tmp_path / "fit" / "traces.csv").read_text().splitlines()
    assert traces[0] == ",".join(cli.TRACE_COLUMNS) and len(traces) > len(dets)
    assert json.loads((tmp_path / "fit" / "failures.json").read_text()) == []


def test_fit_records_failures_and_continues(tmp_path, dataset, monkeypatch):
    real = cli.fit_box
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 2:
            raise BehindCamera("synthetic failure")
        return real(*args, **kwargs)

    monkeypatch.setattr(cli, "fit_box", flaky)
    assert run("fit", dataset, "--out", tmp_path / "fit") == 0
    failures = json.loads((tmp_path / "fit" / "failures.json").read_text())
    dets = json.loads((tmp_path / "fit" / "detections.json").read_text())
    assert len(failures) == 1 and "synthetic failure" in failures[0]["error"]
    assert len(dets) == calls["n"] - 1


def test_fit_config_sections(tmp_path, dataset, capsys):
    good = tmp_path / "fit.toml"
    good.write_text("[fit]\nmax_iters = 100\n\n[weights]\np = 0.5\n")
    assert run("fit", dataset, "--config", good, "--out", tmp_path / "fit") == 0
    manifest = json.loads((tmp_path / "fit" / "manifest.json").read_text())
    assert manifest["config"]["fit"]["max_iters"] == 100 and manifest["config"]["weights"]["p"] == 0.5
    bad = write_json(tmp_path / "bad.json", {"fit": {"step_size": -1}})
    assert run("fit", dataset, "--config", bad, "--out", tmp_path / "x") == 2
    assert "fit.step_size" in capsys.readouterr().err
    bad = write_json(tmp_path / "bad2.json", {"solver": {}})
    assert run("fit", dataset, "--config", bad, "--out", tmp_path / "x") == 2


def test_fit_missing_dataset(tmp_path):
    assert run("fit", tmp_path / "nope", "--out", tmp_path / "fit") == cli.EXIT_DATA


def gt_detections(dataset, score=1.0):
    _, scenes = cli.load_dataset(dataset)
    return [
        {"image_id": s.scene_id, "class": o.cls, "score": score, "box": o.box.to_dict()}
        for s in scenes
        for o in s.objects
    ]


def test_eval_ground_truth_is_perfect(tmp_path, dataset):
    dets = write_json(tmp_path / "dets.json", gt_detections(dataset))
    assert run("eval", dets, dataset, "--out", tmp_path / "ev", "--svg") == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert metrics["mAP"] == 1.0 and metrics["iou_threshold"] == 0.15
    for c in metrics["per_class"]:
        assert (tmp_path / "ev" / f"pr_class_{c}.csv").read_text().startswith("recall,precision\n")
    assert (tmp_path / "ev" / "pr.svg").read_text().startswith("<svg")


def test_eval_empty_detections(tmp_path, dataset):
    dets = write_json(tmp_path / "dets.json", [])
    assert run("eval", dets, dataset, "--out", tmp_path / "ev") == 0
    assert json.loads((tmp_path / "ev" / "metrics.json").read_text())["mAP"] == 0.0


def test_eval_hand_computed_case(tmp_path):
    # one class, two ground truths in one image; detections TP(0.9), FP(0.8), TP(0.7)
    scene = {
        "schema": 1,
        "id": "img",
        "camera": {"fx": 500, "fy": 500, "cx": 320, "cy": 240, "width": 640, "height": 480, "tilt": 0, "roll": 0, "cam_height": 1.5},
        "objects": [
            {"class": 0, "box": {"center": [0, 1, 4], "size": [1, 1, 1], "yaw": 0}, "roi": [0, 0, 10, 10]},
            {"class": 0, "box": {"center": [3, 1, 6], "size": [1, 1, 1], "yaw": 0}, "roi": [0, 0, 10, 10]},
        ],
    }
    ds = tmp_path / "ds"
    ds.mkdir()
    write_json(ds / "img.json", scene)
    write_json(ds / "index.json", {"schema": 1, "scenes": ["img.json"], "class_names": ["thing"]})
    dets = [
        {"image_id": "img", "class": 0, "score": 0.9, "box": scene["objects"][0]["box"]},
        {"image_id": "img", "class": 0, "score": 0.8, "box": {"center": [-3, 1, 8], "size": [1, 1, 1], "yaw": 0}},
        {"image_id": "img", "class": 0, "score": 0.7, "box": scene["objects"][1]["box"]},
    ]
    path = write_json(tmp_path / "dets.json", dets)
    assert run("eval", path, ds, "--out", tmp_path / "ev") == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert metrics["mAP"] == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-12)
    assert metrics["per_class"]["0"]["name"] == "thing"


def test_eval_id_mismatch(tmp_path, dataset, capsys):
    dets = gt_detections(dataset)
    dets[0]["image_id"] = "scene_99999"
    path = write_json(tmp_path / "dets.json", dets)
    assert run("eval", path, dataset, "--out", tmp_path / "ev") == cli.EXIT_DATA
    assert "scene_99999" in capsys.readouterr().err


def test_eval_threshold_and_malformed(tmp_path, dataset):
    dets = write_json(tmp_path / "dets.json", gt_detections(dataset))
    assert run("eval", dets, dataset, "--out", tmp_path / "ev", "--iou-threshold", 0.5) == 0
    assert json.loads((tmp_path / "ev" / "metrics.json").read_text())["iou_threshold"] == 0.5
    assert run("eval", dets, dataset, "--out", tmp_path / "ev", "--iou-threshold", 0) == 2
    broken = tmp_path / "broken.json"
    broken.write_text('[{"image_id": "scene_00000"}]')
    assert run("eval", broken, dataset, "--out", tmp_path / "ev") == 3


def test_gradcheck_default_passes(tmp_path, capsys):
    assert run("gradcheck", "--out", tmp_path / "gc") == 0
    out = capsys.readouterr().out
    for name in ("loss_pp", "loss_perspective", "loss_3d", "loss_proj"):
        assert name in out
    report = json.loads((tmp_path / "gc" / "gradcheck.json").read_text())
    assert report["passed"] and report["num_configs"] == 100


def test_gradcheck_sign_bug_fails(monkeypatch, capsys):
    real = losses.loss_pp

    def buggy(pred, gt):
        value, grad = real(pred, gt)
        return value, -grad

    monkeypatch.setattr(losses, "loss_pp", buggy)
    assert run("gradcheck", "--num-configs", 3) == cli.EXIT_CHECK_FAILED
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_seed_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("gradcheck", "--seed", 5, "--num-configs", 5, "--out", tmp_path / name) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_jobs_do_not_change_outputs(tmp_path):
    cfg = write_json(tmp_path / "gen.json", {"num_scenes": 8, "seed": 2, "noise": 0.02})
    for jobs in (1, 3):
        root = tmp_path / f"j{jobs}"
        assert run("gen", "--config", cfg, "--out", root / "ds", "--jobs", jobs) == 0
        assert run("fit", root / "ds", "--out", root / "fit", "--jobs", jobs) == 0
        assert run("eval", root / "fit" / "detections.json", root / "ds", "--out", root / "ev") == 0
    for sub in ("ds", "fit", "ev"):
        assert digest(tmp_path / "j1" / sub) == digest(tmp_path / "j3" / sub)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "perspective3d", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "0.1.0" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "perspective3d", "gen"], capture_output=True, text=True)
    assert proc.returncode == 2
