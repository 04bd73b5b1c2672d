"""
Tests for experiment configuration loading, validation and derived settings
"""

from pathlib import Path

import pytest
import yaml

from cratertan.config import (
    ConfigError,
    Direction,
    ExperimentConfig,
    config_from_dict,
    load_config,
    save_config,
)
from cratertan.core.augmentation import AugKind
from cratertan.model.losses import ObjectnessMode

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

SIMPLE_TO_COMPLEX = {
    "direction": "simple_to_complex",
    "data": {"source": {"profile": "lunar"}, "target": {"profile": "mars"}},
}


def test_defaults_are_valid():
    """Test the built-in defaults validate"""
    cfg = load_config()
    assert cfg.direction == Direction.COMPLEX_TO_SIMPLE
    assert cfg.detector.input_size == 320
    assert cfg.seed == 0


def test_complex_source_derivations():
    """Test a complex source turns on ASAF, SHEM and weak augmentation"""
    cfg = ExperimentConfig()
    assert cfg.asaf_enabled and cfg.shem_enabled and cfg.bot_enabled
    assert cfg.objectness_mode == ObjectnessMode.COMPLEX_SOURCE
    assert cfg.aug_policy().kind == AugKind.WEAK
    detector = cfg.detector_config()
    assert detector.num_scales == 4 and detector.asaf_enabled


def test_simple_source_derivations():
    """Test a simple source turns both modules off and picks strong augmentation"""
    cfg = config_from_dict(SIMPLE_TO_COMPLEX)
    cfg.validate()
    assert not cfg.asaf_enabled and not cfg.shem_enabled
    assert cfg.objectness_mode == ObjectnessMode.SIMPLE_SOURCE
    assert cfg.aug_policy().kind == AugKind.STRONG
    assert cfg.detector_config().num_scales == 3


def test_component_overrides():
    """Test explicit toggles win over the direction"""
    cfg = config_from_dict({"components": {"asaf": False, "shem": True, "bot": False}})
    assert cfg.detector_config().strides == (8, 16, 32)
    assert cfg.objectness_mode == ObjectnessMode.COMPLEX_SOURCE
    assert cfg.aug_policy() is None
    assert config_from_dict({"augmentation": {"enabled": False}}).aug_policy() is None


def test_policy_overrides():
    """Test augmentation field overrides, nested affine included"""
    cfg = config_from_dict(
        {"augmentation": {"policy": {"flip_prob": 0.0, "affine": {"max_rotate_deg": 5.0}}}}
    )
    policy = cfg.aug_policy()
    assert policy.flip_prob == 0.0
    assert policy.affine.max_rotate_deg == 5.0
    assert policy.kind == AugKind.WEAK

    with pytest.raises(ConfigError):
        config_from_dict({"augmentation": {"policy": {"flip_prob": 2.0}}}).aug_policy()


def test_unknown_keys_rejected():
    """Test typos fail loudly at every level"""
    with pytest.raises(ConfigError, match="epoch"):
        config_from_dict({"train": {"epoch": 3}})
    with pytest.raises(ConfigError):
        config_from_dict({"trian": {}})
    with pytest.raises(ConfigError):
        config_from_dict({"data": {"source": {"profil": "mars"}}})


def test_detector_head_width_is_derived():
    """Test asaf_enabled and num_scales cannot be set directly"""
    with pytest.raises(ConfigError, match="asaf_enabled"):
        config_from_dict({"detector": {"asaf_enabled": False}})
    with pytest.raises(ConfigError, match="num_scales"):
        config_from_dict({"detector": {"num_scales": 3}})


def test_explicit_anchors_set_scale_count():
    """Test three anchor groups with ASAF on is rejected"""
    anchors = [[[10, 13], [16, 30], [33, 23]]] * 3
    cfg = config_from_dict({"detector": {"anchors": anchors}})
    with pytest.raises(ConfigError):
        cfg.validate()
    cfg = config_from_dict(dict(SIMPLE_TO_COMPLEX, detector={"anchors": anchors}))
    cfg.validate()
    assert cfg.detector_config().num_scales == 3


def test_direction_must_match_source_profile():
    """Test a simple source under complex_to_simple is rejected"""
    cfg = config_from_dict({"data": {"source": {"profile": "lunar"}, "target": {"profile": "mars"}}})
    with pytest.raises(ConfigError, match="complex source"):
        cfg.validate()


def test_source_needs_path_or_profile():
    """Test a domain with both or neither is rejected"""
    cfg = config_from_dict({"data": {"source": {"path": "data/x", "profile": "mars"}}})
    with pytest.raises(ConfigError, match="exactly one"):
        cfg.validate()


def test_all_errors_reported_together():
    """Test validation collects every problem"""
    cfg = config_from_dict({"spf": {"gate": 1.5}, "train": {"epochs": 0}, "ablation": {"seeds": []}})
    with pytest.raises(ConfigError) as excinfo:
        cfg.validate()
    message = str(excinfo.value)
    assert "gate" in message
    assert "train.epochs" in message
    assert "ablation.seeds" in message


def test_save_and_load_round_trip(tmp_path):
    """Test the YAML echo reloads to the same configuration"""
    cfg = config_from_dict(dict(SIMPLE_TO_COMPLEX, seed=7, spf={"gate": 0.6}))
    path = save_config(cfg, tmp_path / "config.yaml")

    data = yaml.safe_load(path.read_text())
    assert "asaf_enabled" not in data["detector"]
    assert data["direction"] == "simple_to_complex"
    assert load_config(path).to_dict() == cfg.to_dict()


def test_load_config_errors(tmp_path):
    """Test missing and unparsable files"""
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [unclosed\n")
    with pytest.raises(ConfigError, match="Failed to parse"):
        load_config(bad)


def test_with_overrides_copies():
    """Test CLI overrides do not touch the original"""
    cfg = ExperimentConfig()
    override = cfg.with_overrides(seed="3", output_dir="runs/x", device="cuda:1")
    assert (override.seed, override.output_dir, override.train.device) == (3, "runs/x", "cuda:1")
    assert (cfg.seed, cfg.output_dir, cfg.train.device) == (0, "runs/tan", "cpu")
    assert cfg.with_overrides().to_dict() == cfg.to_dict()


@pytest.mark.parametrize("overrides", [
    {"seed": -1},
    {"seed": 2 ** 32},
    {"seed": "abc"},
    {"device": "gpu"},
    {"device": ""},
    {"device": "cuda:"},
])
def test_with_overrides_validates(overrides):
    """Test overridden seed and device values are checked"""
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(**overrides)


def test_validate_rejects_bad_seed_and_device():
    """Test seed and device errors are listed with the rest"""
    cfg = ExperimentConfig()
    cfg.seed = -5
    cfg.train.device = "gpu"
    with pytest.raises(ConfigError) as exc:
        cfg.validate()
    assert "seed must be in" in str(exc.value)
    assert "train.device" in str(exc.value)


@pytest.mark.parametrize("name", ["toy.yaml", "simple_to_complex.yaml"])
def test_shipped_configs_load(name):
    """Test the example configs validate"""
    cfg = load_config(CONFIG_DIR / name)
    assert cfg.train.epochs >= 1
