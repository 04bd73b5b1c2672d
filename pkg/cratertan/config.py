"""
Experiment configuration: a dataclass tree loaded from and echoed to YAML
"""

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from cratertan.core.augmentation import AugPolicy, select_policy
from cratertan.core.data_domains import Complexity, DatasetError, DomainProfile, get_profile
from cratertan.model.detector import DetectorConfig, DetectorError
from cratertan.model.losses import LossError, ObjectnessMode, SHEMConfig
from cratertan.training.spf import SPFConfig
from cratertan.training.trainer import OptimizerConfig, TrainConfig
from cratertan.utils.validators import ConfigValidator

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Exception raised for invalid experiment configuration"""
    pass


class Direction(str, Enum):
    """Adaptation direction between the labelled source and the unlabelled target"""
    COMPLEX_TO_SIMPLE = "complex_to_simple"
    SIMPLE_TO_COMPLEX = "simple_to_complex"

    @property
    def source_complexity(self) -> Complexity:
        return Complexity.COMPLEX if self == Direction.COMPLEX_TO_SIMPLE else Complexity.SIMPLE


@dataclass
class DomainSource:
    """A dataset directory or a synthetic profile (name or inline mapping)"""

    path: Optional[str] = None
    profile: Optional[Union[str, Dict[str, Any]]] = None

    @property
    def is_synthetic(self) -> bool:
        return self.path is None

    def resolve_profile(self) -> DomainProfile:
        return get_profile(self.profile)


@dataclass
class DataConfig:
    source: DomainSource = field(default_factory=lambda: DomainSource(profile="mars"))
    target: DomainSource = field(default_factory=lambda: DomainSource(profile="lunar"))
    images_per_domain: int = 300
    image_size: int = 320
    split_ratio: float = 0.8
    # Share of target images forming the unlabelled SPF pool; the rest is the labelled hold-out
    target_split_ratio: float = 0.8


@dataclass
class AugmentationConfig:
    """Augmentation switch plus optional policy field overrides"""

    enabled: bool = True
    policy: Optional[Dict[str, Any]] = None


@dataclass
class ComponentToggles:
    """ASAF / SHEM / BOT switches; None derives the value from the direction"""

    asaf: Optional[bool] = None
    shem: Optional[bool] = None
    bot: Optional[bool] = None


@dataclass
class AblationConfig:
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    split_bot: bool = False
    epochs: Optional[int] = None


@dataclass
class ExperimentConfig:
    """
    Full experiment configuration
    """

    data: DataConfig = field(default_factory=DataConfig)
    direction: Direction = Direction.COMPLEX_TO_SIMPLE
    detector: DetectorConfig = field(default_factory=lambda: DetectorConfig(input_size=320))
    shem: SHEMConfig = field(default_factory=SHEMConfig)
    spf: SPFConfig = field(default_factory=SPFConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    components: ComponentToggles = field(default_factory=ComponentToggles)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    anchors_from_data: bool = True
    seed: int = 0
    output_dir: str = "runs/tan"

    # -- derived settings ---------------------------------------------------

    @property
    def asaf_enabled(self) -> bool:
        if self.components.asaf is not None:
            return self.components.asaf
        return self.direction == Direction.COMPLEX_TO_SIMPLE

    @property
    def shem_enabled(self) -> bool:
        if self.components.shem is not None:
            return self.components.shem
        return self.direction == Direction.COMPLEX_TO_SIMPLE

    @property
    def bot_enabled(self) -> bool:
        return True if self.components.bot is None else self.components.bot

    @property
    def objectness_mode(self) -> ObjectnessMode:
        return ObjectnessMode.COMPLEX_SOURCE if self.shem_enabled else ObjectnessMode.SIMPLE_SOURCE

    @property
    def source_complexity(self) -> Complexity:
        if self.data.source.is_synthetic:
            return self.data.source.resolve_profile().complexity
        return self.direction.source_complexity

    def detector_config(self, anchors: Optional[List] = None) -> DetectorConfig:
        """Detector config with the head width implied by the ASAF switch"""
        asaf = self.asaf_enabled
        return replace(
            self.detector,
            asaf_enabled=asaf,
            num_scales=4 if asaf else 3,
            anchors=anchors if anchors is not None else self.detector.anchors,
        )

    def aug_policy(self) -> Optional[AugPolicy]:
        """Policy selected by source complexity, with overrides; None when disabled"""
        if not (self.bot_enabled and self.augmentation.enabled):
            return None
        policy = select_policy(self.source_complexity)
        overrides = dict(self.augmentation.policy or {})
        if not overrides:
            return policy
        affine = overrides.pop("affine", None)
        try:
            if affine:
                overrides["affine"] = replace(policy.affine, **affine)
            return replace(policy, **overrides)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid augmentation.policy override: {e}")

    # -- validation and serialization ---------------------------------------

    def validate(self) -> None:
        """
        Check the whole tree; raises ConfigError listing every problem
        """
        results = []
        errors: List[str] = []
        try:
            detector = self.detector_config()
            results.append(ConfigValidator.validate_detector(detector))
            results.append(ConfigValidator.validate_shem(self.shem, detector.num_scales))
        except DetectorError as e:
            errors.append(str(e))
        results.append(ConfigValidator.validate_spf(self.spf))
        results.append(ConfigValidator.validate_optimizer(self.optimizer))
        results.append(ConfigValidator.validate_run(self.seed, self.train.device))
        merged = ConfigValidator.merge(results)
        errors.extend(merged["errors"])

        for name, source in (("source", self.data.source), ("target", self.data.target)):
            if (source.path is None) == (source.profile is None):
                errors.append(f"data.{name} needs exactly one of 'path' or 'profile'")
            elif source.is_synthetic:
                try:
                    source.resolve_profile()
                except DatasetError as e:
                    errors.append(f"data.{name}: {e}")
        if self.data.images_per_domain < 1:
            errors.append(f"data.images_per_domain must be >= 1: {self.data.images_per_domain}")
        if self.data.image_size < 64:
            errors.append(f"data.image_size must be >= 64: {self.data.image_size}")
        for name in ("split_ratio", "target_split_ratio"):
            value = getattr(self.data, name)
            if not 0.0 < value < 1.0:
                errors.append(f"data.{name} must be in (0, 1): {value}")

        if not errors and self.data.source.is_synthetic:
            actual = self.data.source.resolve_profile().complexity
            if actual != self.direction.source_complexity:
                errors.append(
                    f"direction {self.direction.value} needs a {self.direction.source_complexity.value} "
                    f"source, but profile '{self.data.source.resolve_profile().name}' is {actual.value}"
                )

        if self.train.epochs < 1:
            errors.append(f"train.epochs must be >= 1: {self.train.epochs}")
        if self.train.batch_size < 1:
            errors.append(f"train.batch_size must be >= 1: {self.train.batch_size}")
        if self.train.operating_point not in ("fixed", "max_f1"):
            errors.append(f"train.operating_point must be 'fixed' or 'max_f1': {self.train.operating_point}")
        for name in ("eval_conf_thresh", "eval_nms_iou", "report_conf"):
            value = getattr(self.train, name)
            if not 0.0 <= value <= 1.0:
                errors.append(f"train.{name} must be in [0, 1]: {value}")
        if not self.ablation.seeds:
            errors.append("ablation.seeds must not be empty")

        if errors:
            raise ConfigError("Invalid configuration:\n  - " + "\n  - ".join(errors))
        for warning in merged["warnings"]:
            logger.warning(warning)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["direction"] = self.direction.value
        data["detector"] = self.detector.to_dict()
        data["shem"]["scale_weights"] = list(self.shem.scale_weights)
        for key in ("asaf_enabled", "num_scales"):
            data["detector"].pop(key)
        return data

    def with_overrides(
        self,
        seed: Optional[int] = None,
        output_dir: Optional[str] = None,
        device: Optional[str] = None,
    ) -> "ExperimentConfig":
        """Copy with CLI/environment overrides applied; the result is re-validated"""
        cfg = replace(self)
        if seed is not None:
            try:
                cfg.seed = int(seed)
            except (TypeError, ValueError):
                raise ConfigError(f"Invalid seed override: {seed!r}")
        if output_dir:
            cfg.output_dir = str(output_dir)
        if device is not None:
            cfg.train = replace(cfg.train, device=device)
        cfg.validate()
        return cfg


_SECTIONS = {
    "shem": SHEMConfig,
    "spf": SPFConfig,
    "augmentation": AugmentationConfig,
    "components": ComponentToggles,
    "optimizer": OptimizerConfig,
    "train": TrainConfig,
    "ablation": AblationConfig,
}


def _check_keys(section: str, data: Dict[str, Any], cls: type, forbidden: tuple = ()) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{section}' must be a mapping")
    allowed = {f.name for f in fields(cls)} - set(forbidden)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"Unknown key(s) in section '{section}': {', '.join(unknown)}")


def config_from_dict(data: Optional[Dict[str, Any]]) -> ExperimentConfig:
    """
    Build an ExperimentConfig from a nested mapping; unknown keys are rejected

    Args:
        data: Nested mapping (as loaded from YAML); None gives the defaults

    Returns:
        ExperimentConfig (not yet validated)
    """
    data = dict(data or {})
    _check_keys("<root>", data, ExperimentConfig)
    kwargs: Dict[str, Any] = {}

    try:
        for section, cls in _SECTIONS.items():
            if section in data:
                _check_keys(section, data[section], cls)
                kwargs[section] = cls(**data[section])

        if "data" in data:
            section = dict(data["data"])
            _check_keys("data", section, DataConfig)
            for name in ("source", "target"):
                if name in section:
                    _check_keys(f"data.{name}", section[name], DomainSource)
                    section[name] = DomainSource(**section[name])
            kwargs["data"] = DataConfig(**section)

        if "detector" in data:
            section = data["detector"]
            _check_keys("detector", section, DetectorConfig, forbidden=("asaf_enabled", "num_scales"))
            section = dict({"input_size": 320}, **section)
            if section.get("anchors"):
                section["num_scales"] = len(section["anchors"])
                section["asaf_enabled"] = section["num_scales"] == 4
            kwargs["detector"] = DetectorConfig(**section)

        if "direction" in data:
            kwargs["direction"] = Direction(data["direction"])
        for key in ("anchors_from_data", "seed", "output_dir"):
            if key in data:
                kwargs[key] = data[key]
    except (DetectorError, LossError, TypeError, ValueError) as e:
        raise ConfigError(f"Invalid configuration: {e}")

    return ExperimentConfig(**kwargs)


def load_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """
    Load and validate a YAML experiment config; defaults when ``path`` is None

    Args:
        path: YAML file

    Returns:
        Validated ExperimentConfig
    """
    if path is None:
        cfg = ExperimentConfig()
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigError(f"Failed to parse {path}: {e}")
        cfg = config_from_dict(data)
    cfg.validate()
    return cfg


def save_config(cfg: ExperimentConfig, path: Union[str, Path]) -> Path:
    """Echo the config as YAML"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
    return path


__all__ = [
    "AblationConfig",
    "AugmentationConfig",
    "ComponentToggles",
    "ConfigError",
    "DataConfig",
    "Direction",
    "DomainSource",
    "ExperimentConfig",
    "config_from_dict",
    "load_config",
    "save_config",
]
