"""
End-to-end tests of the CraterTAN facade on a tiny synthetic configuration
"""

import csv
import json
from unittest.mock import patch

import pytest
import torch

from cratertan.config import ConfigError, config_from_dict
from cratertan.core import data_domains
from cratertan.core.data_domains import LabelLeakageError
from cratertan.cratertan import ABLATION_GRID, CraterTAN, _mean_std
from cratertan.model.detector import CheckpointError, load_checkpoint
from cratertan.training.spf import SPFError, load_manifest


def tiny_config(output_dir, **overrides):
    """Smallest valid setup: 10 images per domain at 64 px, one epoch"""
    data = {
        "data": {"images_per_domain": 10, "image_size": 64},
        "detector": {"base_channels": 4, "input_size": 64},
        "spf": {"gate": 0.1, "finetune_epochs": 2},
        "train": {"epochs": 1, "batch_size": 4},
        "ablation": {"seeds": [0], "epochs": 1},
        "output_dir": str(output_dir),
    }
    data.update(overrides)
    cfg = config_from_dict(data)
    cfg.validate()
    return cfg


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A CraterTAN instance with stage one already trained"""
    tan = CraterTAN(tiny_config(tmp_path_factory.mktemp("run")))
    result = tan.train_stage_one()
    return tan, result


def test_stage_one_outputs(trained):
    """Test stage one writes checkpoints, the log and the config echo"""
    tan, result = trained
    assert result.best_checkpoint == tan.output_dir / "stage_one" / "best.ckpt"
    assert result.last_checkpoint.is_file()
    assert result.images_per_epoch == [8]
    assert (tan.output_dir / "config.yaml").is_file()
    assert (tan.output_dir / "run.log").is_file()

    with open(result.log_csv, newline="") as f:
        header = next(csv.reader(f))
    assert header[-4:] == ["obj_scale0", "obj_scale1", "obj_scale2", "obj_scale3"]

    model, meta = load_checkpoint(result.best_checkpoint)
    assert meta["stage"] == "stage_one"
    assert meta["num_train"] == 8
    assert model.config.num_scales == 4


def test_seeded_stage_one_is_reproducible(tmp_path):
    """Test two runs with the same seed give the same losses, metrics and weights"""
    results = [CraterTAN(tiny_config(tmp_path / name)).train_stage_one() for name in ("a", "b")]
    first, second = results

    assert first.best_epoch == second.best_epoch
    assert set(first.history) == set(second.history)
    for key, values in first.history.items():
        assert values == pytest.approx(second.history[key], abs=1e-9)
    for key, value in first.best_metrics.items():
        assert value == pytest.approx(second.best_metrics[key], abs=1e-9)

    model_a, _ = load_checkpoint(first.last_checkpoint)
    model_b, _ = load_checkpoint(second.last_checkpoint)
    state_b = model_b.state_dict()
    for name, tensor in model_a.state_dict().items():
        assert torch.allclose(tensor.double(), state_b[name].double(), atol=1e-9), name


def test_evaluate_reproduces_best_validation(trained):
    """Test re-evaluating the best checkpoint on source val matches the logged score"""
    tan, result = trained
    report = tan.evaluate(result.best_checkpoint, dataset="source-val", out_dir=tan.output_dir / "val")
    assert report.map50 == pytest.approx(result.best_metrics["map50"])
    assert report.num_images == 2
    assert (tan.output_dir / "val" / "metrics.json").is_file()


def test_spf_and_target_evaluation(trained):
    """Test pseudo-labelling, selection size, fine-tuning and the default checkpoint"""
    tan, _ = trained
    result = tan.run_spf()

    assert result["h"] == pytest.approx(0.3)
    assert result["num_target"] == 8
    assert result["num_selected"] == 3
    assert result["checkpoint"].is_file()
    manifest = load_manifest(result["manifest"])
    assert len(manifest) == 3
    assert all(d.confidence >= 0.1 for _, dets in manifest.entries for d in dets)

    _, meta = load_checkpoint(result["checkpoint"])
    assert meta["stage"] == "spf"

    report = tan.evaluate()
    assert report.num_images == 2
    metrics = json.loads((tan.output_dir / "eval" / "metrics.json").read_text())
    assert metrics["map5095"] == pytest.approx(report.map5095)


def test_target_pool_has_no_labels(trained):
    """Test the SPF pool withholds boxes and the hold-out keeps them"""
    tan, _ = trained
    pool, holdout = tan.load_target()
    assert all(not image.boxes for image in pool)
    assert any(image.boxes for image in holdout)
    assert not {i.source_id for i in pool} & {i.source_id for i in holdout}


def test_directory_target_never_reads_labels(trained, tmp_path):
    """Test SPF on a labelled directory target never opens its label files"""
    tan, result = trained
    written = CraterTAN(tiny_config(tmp_path / "gen")).generate_data()
    cfg = tiny_config(
        tmp_path / "dir_run",
        data={"images_per_domain": 10, "image_size": 64,
              "target": {"path": str(written["target"])}},
    )
    dir_tan = CraterTAN(cfg)

    with patch.object(data_domains, "read_label_file", side_effect=LabelLeakageError("label read")):
        spf = dir_tan.run_spf(result.best_checkpoint)
    assert spf["num_target"] == 10
    assert dir_tan.label_guard.roots == []

    report = dir_tan.evaluate(spf["checkpoint"], dataset="target")
    assert report.num_images == 10
    assert report.num_gt > 0


def test_missing_stage_one_checkpoint(tmp_path):
    """Test SPF before training"""
    tan = CraterTAN(tiny_config(tmp_path / "empty"))
    with pytest.raises(CheckpointError, match="run training first"):
        tan.run_spf()


def test_gate_too_high_skips_spf(tmp_path):
    """Test a gate nothing clears leaves the pipeline on M1"""
    tan = CraterTAN(tiny_config(tmp_path / "gated", spf={"gate": 1.0, "finetune_epochs": 2}))
    with pytest.raises(SPFError):
        tan.run_spf(tan.train_stage_one().last_checkpoint)

    summary = tan.run_pipeline()
    assert summary["spf"] == "skipped"
    assert summary["checkpoint"].endswith(".ckpt")
    assert "stage_one" in summary["checkpoint"]


def test_generate_data_layout(tmp_path):
    """Test both synthetic domains are written with their profile sidecar"""
    tan = CraterTAN(tiny_config(tmp_path / "gen"))
    written = tan.generate_data()

    assert set(written) == {"source", "target"}
    for name, profile in (("source", "mars"), ("target", "lunar")):
        root = written[name]
        assert len(list((root / "images").iterdir())) == 10
        assert json.loads((root / "profile.json").read_text())["profile"]["name"] == profile


def test_model_summary(tmp_path):
    """Test the ASAF graph adds three NAM blocks on a fourth scale"""
    summary = CraterTAN(tiny_config(tmp_path / "info")).model_summary()

    assert summary["baseline"]["nam_modules"] == 0
    assert summary["asaf"]["nam_modules"] == 3
    assert summary["asaf"]["parameters"] > summary["baseline"]["parameters"]
    assert summary["configured"]["frozen_groups"] == 10


def test_ablation_grid(tmp_path):
    """Test eight rows in grid order with one seed each"""
    tan = CraterTAN(tiny_config(tmp_path / "abl"))
    rows = tan.run_ablation()

    assert [(r["asaf"], r["shem"], r["bot"]) for r in rows] == ABLATION_GRID
    assert all(r["runs"] == 1 and r["recall_std"] == 0.0 for r in rows)
    with open(tan.output_dir / "ablation" / "ablation.csv", newline="") as f:
        assert len(list(csv.DictReader(f))) == 8
    runs = json.loads((tan.output_dir / "ablation" / "runs.json").read_text())
    assert runs["row1"][0]["spf"] == "off"


def test_ablation_needs_synthetic_domains(tmp_path):
    """Test a directory domain is rejected for the ablation"""
    cfg = tiny_config(
        tmp_path / "abl_dir",
        data={"images_per_domain": 10, "image_size": 64, "target": {"path": str(tmp_path)}},
    )
    with pytest.raises(ConfigError):
        CraterTAN(cfg).run_ablation()


def test_mean_std_uses_sample_deviation():
    """Test the ablation spread is the n - 1 standard deviation"""
    assert _mean_std([1.0, 2.0, 3.0]) == pytest.approx((2.0, 1.0))
    assert _mean_std([0.5]) == (0.5, 0.0)
