"""
Tests for the tan command line
"""

from unittest.mock import Mock, patch

import pytest
import yaml

from cratertan import cli
from cratertan.cli import create_parser, main

TINY = {
    "data": {"images_per_domain": 4, "image_size": 64},
    "detector": {"base_channels": 4, "input_size": 64},
    "train": {"epochs": 1, "batch_size": 2},
}


@pytest.fixture
def tiny_yaml(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def test_parser_subcommands():
    """Test every subcommand parses with the shared options"""
    parser = create_parser()
    for command in ("gen-data", "train", "spf", "eval", "ablation", "info"):
        args = parser.parse_args([command, "--seed", "4", "--out", "runs/x"])
        assert args.command == command
        assert args.seed == 4
        assert args.out == "runs/x"
    assert parser.parse_args(["eval"]).dataset == "target"


def test_environment_defaults():
    """Test TAN_* variables feed the option defaults"""
    with patch.dict("os.environ", {"TAN_SEED": "9", "TAN_DEVICE": "cuda:1"}):
        args = create_parser().parse_args(["train"])
    assert args.seed == 9
    assert args.device == "cuda:1"


def test_no_command_prints_help():
    """Test a bare invocation"""
    assert main([]) == 0


def test_info_command(tiny_yaml, tmp_path):
    """Test info reports the resolved setup"""
    assert main(["info", "--config", str(tiny_yaml), "--out", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "config.yaml").is_file()


def test_gen_data_command(tiny_yaml, tmp_path):
    """Test gen-data writes both domains"""
    out = tmp_path / "out"
    assert main(["gen-data", "--config", str(tiny_yaml), "--out", str(out)]) == 0
    assert (out / "data" / "source" / "profile.json").is_file()
    assert (out / "data" / "target" / "profile.json").is_file()


def test_invalid_config_fails(tmp_path):
    """Test a bad config exits with 1"""
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"train": {"epoch": 1}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "out")]) == 1
    assert main(["info", "--config", str(tmp_path / "missing.yaml")]) == 1


@pytest.mark.parametrize("override", [["--seed", "-1"], ["--device", "gpu"], ["--device", "cuda:x"]])
def test_invalid_overrides_fail(tiny_yaml, tmp_path, override):
    """Test bad seed and device overrides are rejected before any work starts"""
    with patch.object(cli, "CraterTAN") as tan:
        code = main(["info", "--config", str(tiny_yaml), "--out", str(tmp_path / "out"), *override])
    assert code == 1
    tan.assert_not_called()


def test_invalid_environment_device_fails(tiny_yaml, tmp_path):
    """Test TAN_DEVICE goes through the same validation as --device"""
    with patch.dict("os.environ", {"TAN_DEVICE": "tpu"}):
        assert main(["info", "--config", str(tiny_yaml), "--out", str(tmp_path / "out")]) == 1


def test_command_error_returns_one(tiny_yaml, tmp_path):
    """Test a failing stage is reported, not raised"""
    assert main(["spf", "--config", str(tiny_yaml), "--out", str(tmp_path / "out")]) == 1


def test_keyboard_interrupt(tiny_yaml, tmp_path):
    """Test Ctrl-C exits with 130"""
    with patch.dict(cli.HANDLERS, {"info": Mock(side_effect=KeyboardInterrupt)}):
        assert main(["info", "--config", str(tiny_yaml), "--out", str(tmp_path / "out")]) == 130
