import json

import pytest

from motionseg.cli import run_command

CONFIG = {
    "schema_version": 1,
    "scene": {"image_size": 32, "window": 8, "seed": 5},
    "data": {"n_train": 32, "n_test": 4, "n_priors": 8},
    "train": {"teacher_epochs": 1, "proxy_epochs": 1, "student_epochs": 1, "teacher_steps_per_epoch": 1,
              "base_channels": 4, "noise_size": 4, "batch_size": 4},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(CONFIG))
    assert run_command(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root, cfg


def _manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_gen_data_layout_and_determinism(work, tmp_path):
    root, cfg = work
    assert run_command(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    a, b = _manifest(root / "data"), _manifest(tmp_path / "again")
    assert a["artifacts"] == b["artifacts"]
    assert "train/flows/000000_a.flo" in a["artifacts"]
    assert "test/frames/100000_b.png" in a["artifacts"]
    assert len([k for k in a["artifacts"] if k.startswith("priors/masks/")]) == 8
    snap = json.loads((root / "data" / "config.json").read_text())
    assert snap["command"] == "gen-data" and snap["config"]["scene"]["seed"] == 5


def test_seed_override_changes_data(work, tmp_path):
    _, cfg = work
    run_command(["gen-data", "--config", str(cfg), "--seed", "6", "--out", str(tmp_path / "s6")])
    m = _manifest(tmp_path / "s6")
    assert m["artifacts"]["train/masks/000000_a.png"] != _manifest(work[0] / "data")["artifacts"][
        "train/masks/000000_a.png"]


def test_corrupt_hits_target(work):
    root, _ = work
    out = root / "cor"
    assert run_command(["corrupt", "--data", str(root / "data" / "train"), "--noise", "tool-drop",
                        "--target-iou", "0.4", "--seed", "1", "--out", str(out)]) == 0
    res = _manifest(out)["results"]
    assert abs(res["achieved_iou"] - 0.4) <= 0.02
    assert (out / "masks" / "000000_a.png").is_file()


def test_train_label_eval_sweep_plot(work):
    root, cfg = work
    data = root / "data"
    assert run_command(["train", "--config", str(cfg), "--data", str(data), "--mode", "2step",
                        "--out", str(root / "tr")]) == 0
    res = _manifest(root / "tr")["results"]
    assert set(res) == {"pseudo_label_iou", "teacher_test_iou", "proxy_test_iou", "student_test_iou"}
    ck = root / "tr" / "checkpoints"

    assert run_command(["pseudo-label", "--checkpoint", str(ck / "teacher_segmenter.ckpt"),
                        "--data", str(data / "train"), "--out", str(root / "pl")]) == 0
    assert len(list((root / "pl" / "masks").glob("*.png"))) == 32

    assert run_command(["eval", "--checkpoint", str(ck / "student.ckpt"), "--data", str(data / "test"),
                        "--out", str(root / "ev")]) == 0
    metrics = json.loads((root / "ev" / "metrics.json").read_text())
    assert len(metrics["per_sample_iou"]) == 4

    assert run_command(["sweep", "--data", str(data / "train"), "--proxy", str(ck / "proxy.ckpt"),
                        "--labels", str(root / "pl"), "--w-list", "4,32", "--eps-list", "0,0.5,1",
                        "--out", str(root / "sw")]) == 0
    assert _manifest(root / "sw")["results"]["cells"] == 6

    assert run_command(["plot", "--run", str(root / "tr")]) == 0
    assert (root / "tr" / "plots" / "trace.png").is_file()


def test_noise_study_histograms(work):
    root, cfg = work
    out = root / "ns"
    assert run_command(["noise-study", "--config", str(cfg), "--data", str(root / "data"), "--kinds", "tool-drop",
                        "--targets", "0.6", "--histograms-only", "--out", str(out)]) == 0
    study = json.loads((out / "study.json").read_text())
    assert list(study["histograms"]) == ["tool_drop@0.6"]


def test_exit_codes(work, tmp_path, capsys):
    root, _ = work
    assert run_command(["train", "--config", str(tmp_path / "missing.json"), "--data", str(root / "data")]) == 2
    assert "missing.json" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 1, "train": {"lr_proxy": -1}}))
    assert run_command(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert run_command(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(root / "data" / "test"),
                        "--out", str(tmp_path / "e")]) == 1
    assert run_command(["corrupt", "--data", str(root / "data" / "train"), "--noise", "blur",
                        "--target-iou", "0.5"]) == 2
    assert run_command([]) == 2
