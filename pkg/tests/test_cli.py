import csv
import json
from pathlib import Path

import pytest

from semiseg.cli import main

pytestmark = pytest.mark.filterwarnings("ignore::DeprecationWarning")


def write_config(path: Path, **sections) -> Path:
    base = {
        "synth": {"image_size": [32, 32], "num_classes": 3, "noise_std": 0.05, "seed": 5},
        "model": {"units_per_block": 2, "filters_per_unit": 4, "num_encoder_blocks": 2},
        "train": {"max_iterations": 40, "validation_interval": 20,
                  "initial_learning_rate": 1e-3, "val_fraction": 0.25, "seed": 7},
        "mc": {"num_passes": 2, "alpha": 2.0, "base_seed": 9},
    }
    for key, value in sections.items():
        base.setdefault(key, {}).update(value)
    path.write_text(json.dumps(base))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth-data + train-teacher + train-student, shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json")
    data = root / "data"
    assert main(["synth-data", "--config", str(cfg), "--out", str(data),
                 "--n-labeled", "8", "--n-unlabeled", "4", "--n-test", "3"]) == 0
    run = root / "run"
    assert main(["train-teacher", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    teacher = run / "teacher" / "best.ckpt"
    assert main(["train-student", "--config", str(cfg), "--data", str(data),
                 "--teacher", str(teacher), "--out", str(run), "--alpha", "2"]) == 0
    return {"root": root, "cfg": cfg, "data": data, "run": run, "teacher": teacher,
            "student": run / "student" / "best.ckpt"}


def test_synth_data_outputs(pipeline):
    data = pipeline["data"]
    manifest = json.loads((data / "manifest.json").read_text())
    splits = {s["split"] for s in manifest["samples"]}
    assert splits == {"labeled", "unlabeled", "test"}
    assert (data / "run_config.json").exists()


def test_synth_data_deterministic(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    for name in ("a", "b"):
        assert main(["synth-data", "--config", str(cfg), "--out", str(tmp_path / name),
                     "--n-labeled", "2", "--n-unlabeled", "1", "--n-test", "1"]) == 0
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_synth_data_rejects_zero_labeled(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    code = main(["synth-data", "--config", str(cfg), "--out", str(tmp_path / "x"),
                 "--n-labeled", "0"])
    assert code != 0


def test_train_outputs_exist(pipeline):
    run = pipeline["run"]
    for sub in ("teacher", "student"):
        assert (run / sub / "best.ckpt").exists()
        assert (run / sub / "last.ckpt").exists()
        assert (run / sub / "metrics.csv").exists()
        assert (run / sub / "run_config.json").exists()


def test_flag_overrides_config_file(pipeline, tmp_path):
    cfg = write_config(tmp_path / "cfg.json")  # train.seed = 7 inside
    data = pipeline["data"]
    out = tmp_path / "out"
    assert main(["synth-data", "--config", str(cfg), "--out", str(out),
                 "--seed", "99", "--n-labeled", "2", "--n-unlabeled", "1", "--n-test", "1"]) == 0
    recorded = json.loads((out / "run_config.json").read_text())
    assert recorded["seed"] == 99
    assert recorded["train"]["seed"] == 7  # explicit file value survives
    assert recorded["synth"]["seed"] == 5


def test_rerun_from_recorded_config_reproduces_metrics(pipeline, tmp_path):
    recorded = pipeline["run"] / "teacher" / "run_config.json"
    rerun = tmp_path / "rerun"
    assert main(["train-teacher", "--config", str(recorded),
                 "--data", str(pipeline["data"]), "--out", str(rerun)]) == 0

    def metric_rows(path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return [{k: v for k, v in row.items() if k != "wall_clock_s"} for row in rows]

    assert metric_rows(pipeline["run"] / "teacher" / "metrics.csv") == \
        metric_rows(rerun / "teacher" / "metrics.csv")


def test_evaluate_writes_reports(pipeline, tmp_path):
    out = tmp_path / "eval"
    assert main(["evaluate", "--checkpoint", str(pipeline["student"]),
                 "--data", str(pipeline["data"]), "--out", str(out),
                 "--confident", "--num-passes", "2", "--pr-class", "1"]) == 0
    assert (out / "dice_report.csv").exists()
    assert (out / "dice_report_confident.csv").exists()
    assert (out / "pr_curve_class1.csv").exists()
    assert (out / "pr_curve_class1.png").exists()
    assert (out / "run_config.json").exists()


def test_evaluate_rejects_mismatched_checkpoint(pipeline, tmp_path):
    cfg = write_config(tmp_path / "cfg.json", synth={"num_classes": 4})
    other_data = tmp_path / "data4"
    assert main(["synth-data", "--config", str(cfg), "--out", str(other_data),
                 "--n-labeled", "2", "--n-unlabeled", "1", "--n-test", "1"]) == 0
    out = tmp_path / "eval"
    code = main(["evaluate", "--checkpoint", str(pipeline["student"]),
                 "--data", str(other_data), "--out", str(out)])
    assert code != 0
    assert not (out / "dice_report.csv").exists()  # no partial reports


def test_infer_writes_overlays(pipeline, tmp_path):
    data = pipeline["data"]
    manifest = json.loads((data / "manifest.json").read_text())
    image_rel = next(s["image"] for s in manifest["samples"] if s["split"] == "test")
    out = tmp_path / "infer"
    assert main(["infer", "--checkpoint", str(pipeline["student"]),
                 "--image", str(data / image_rel), "--out", str(out), "--num-passes", "2"]) == 0
    stem = Path(image_rel).stem
    for suffix in ("labels", "input", "pred", "uncertainty", "composite"):
        assert (out / f"{stem}_{suffix}.png").exists()


def test_infer_missing_checkpoint_fails(tmp_path):
    code = main(["infer", "--checkpoint", str(tmp_path / "nope.ckpt"),
                 "--image", str(tmp_path / "nope.png"), "--out", str(tmp_path)])
    assert code != 0


def test_sweep_alpha(pipeline, tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep-alpha", "--config", str(pipeline["cfg"]),
                 "--data", str(pipeline["data"]), "--teacher", str(pipeline["teacher"]),
                 "--out", str(out), "--alphas", "0,2", "--max-iterations", "10"]) == 0
    with open(out / "alpha_sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["alpha"]) for r in rows] == [0.0, 2.0]
    best = json.loads((out / "alpha_sweep_best.json").read_text())
    assert best["alpha"] in (0.0, 2.0)


def test_sweep_alpha_single_zero(pipeline, tmp_path):
    out = tmp_path / "sweep0"
    assert main(["sweep-alpha", "--config", str(pipeline["cfg"]),
                 "--data", str(pipeline["data"]), "--teacher", str(pipeline["teacher"]),
                 "--out", str(out), "--alphas", "0", "--max-iterations", "6"]) == 0
    with open(out / "alpha_sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and float(rows[0]["alpha"]) == 0.0


def test_converged_toy_run_scores_high_on_training_set(tmp_path):
    # teacher trained to convergence on easy data, evaluated on its own corpus
    cfg = write_config(tmp_path / "cfg.json",
                       synth={"noise_std": 0.02, "seed": 1},
                       train={"max_iterations": 400, "validation_interval": 100})
    data = tmp_path / "data"
    assert main(["synth-data", "--config", str(cfg), "--out", str(data),
                 "--n-labeled", "6", "--n-unlabeled", "0", "--n-test", "4"]) == 0
    run = tmp_path / "run"
    assert main(["train-teacher", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    out = tmp_path / "eval"
    assert main(["evaluate", "--checkpoint", str(run / "teacher" / "best.ckpt"),
                 "--data", str(data), "--out", str(out), "--pr-class", "-1"]) == 0
    with open(out / "dice_report.csv", newline="") as fh:
        rows = {r[0]: r[1] for r in csv.reader(fh)}
    assert float(rows["mean_foreground"]) > 0.75
