"""
Validation utilities for boxes, label lines and configuration blocks
"""

import math
import re
from typing import Any, Dict, List, Sequence


_DEVICE_PATTERN = re.compile(r"cpu|mps|cuda(:\d+)?")


def _result() -> Dict[str, Any]:
    return {"is_valid": True, "errors": [], "warnings": []}


def _fail(result: Dict[str, Any], message: str) -> None:
    result["is_valid"] = False
    result["errors"].append(message)


def _is_probability(value: float) -> bool:
    return 0.0 <= value <= 1.0


class BoxValidator:
    """
    Validates normalized center-format boxes and label-file lines
    """

    @staticmethod
    def validate_box(cx: float, cy: float, w: float, h: float) -> Dict[str, Any]:
        """
        Validate a normalized center-format box

        Args:
            cx: Center x as a fraction of image width
            cy: Center y as a fraction of image height
            w: Width as a fraction of image width
            h: Height as a fraction of image height

        Returns:
            Dictionary with validation results
        """
        result = _result()
        values = {"cx": cx, "cy": cy, "w": w, "h": h}
        for key, value in values.items():
            if not math.isfinite(value):
                _fail(result, f"{key} is not finite: {value}")
        if not result["is_valid"]:
            return result

        if not 0.0 <= cx <= 1.0:
            _fail(result, f"cx out of range [0, 1]: {cx}")
        if not 0.0 <= cy <= 1.0:
            _fail(result, f"cy out of range [0, 1]: {cy}")
        if not 0.0 < w <= 1.0:
            _fail(result, f"w out of range (0, 1]: {w}")
        if not 0.0 < h <= 1.0:
            _fail(result, f"h out of range (0, 1]: {h}")
        return result

    @staticmethod
    def validate_label_line(line: str) -> Dict[str, Any]:
        """
        Parse and validate one "class cx cy w h" label line

        Args:
            line: Raw text line from a label file

        Returns:
            Dictionary with validation results and, when valid, a "values" tuple
        """
        result = _result()
        parts = line.split()
        if len(parts) != 5:
            _fail(result, f"expected 5 fields 'class cx cy w h', got {len(parts)}")
            return result

        try:
            class_id = int(parts[0])
        except ValueError:
            _fail(result, f"class id is not an integer: {parts[0]!r}")
            return result
        if class_id < 0:
            _fail(result, f"class id is negative: {class_id}")

        try:
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError:
            _fail(result, "box fields are not numbers")
            return result

        box_check = BoxValidator.validate_box(cx, cy, w, h)
        result["errors"].extend(box_check["errors"])
        result["is_valid"] = result["is_valid"] and box_check["is_valid"]
        if result["is_valid"]:
            result["values"] = (class_id, cx, cy, w, h)
        return result


class ConfigValidator:
    """
    Validates configuration blocks. Every method is duck-typed on attribute
    names so that it can be used before the owning module is imported.
    """

    @staticmethod
    def validate_interval(name: str, interval: Sequence[float], positive: bool = False) -> Dict[str, Any]:
        """
        Validate a closed [lo, hi] interval

        Args:
            name: Field name used in messages
            interval: Two-element sequence
            positive: Require lo > 0

        Returns:
            Dictionary with validation results
        """
        result = _result()
        if len(interval) != 2:
            _fail(result, f"{name} must have exactly two values, got {len(interval)}")
            return result
        lo, hi = interval
        if lo > hi:
            _fail(result, f"{name} is empty: {lo} > {hi}")
        if positive and lo <= 0:
            _fail(result, f"{name} must be positive: {lo}")
        return result

    @staticmethod
    def validate_profile(profile: Any) -> Dict[str, Any]:
        """
        Validate a synthetic DomainProfile

        Args:
            profile: DomainProfile-like object

        Returns:
            Dictionary with validation results
        """
        result = _result()
        for name, positive in (("crater_count_range", False), ("radius_range", True)):
            check = ConfigValidator.validate_interval(name, getattr(profile, name), positive)
            result["errors"].extend(check["errors"])
        lo_count = profile.crater_count_range[0]
        if lo_count < 0:
            result["errors"].append(f"crater_count_range must be nonnegative: {lo_count}")
        if not _is_probability(profile.background_noise_level):
            result["errors"].append(
                f"background_noise_level must be in [0, 1]: {profile.background_noise_level}"
            )
        complexity = getattr(profile.complexity, "value", profile.complexity)
        if complexity not in ("simple", "complex"):
            result["errors"].append(f"complexity must be 'simple' or 'complex': {complexity}")
        result["is_valid"] = not result["errors"]
        return result

    @staticmethod
    def validate_aug_policy(policy: Any) -> Dict[str, Any]:
        """
        Validate an AugPolicy

        Args:
            policy: AugPolicy-like object

        Returns:
            Dictionary with validation results
        """
        result = _result()
        for name in ("flip_prob", "mosaic_prob", "stitch_prob"):
            value = getattr(policy, name)
            if not _is_probability(value):
                _fail(result, f"{name} must be in [0, 1]: {value}")
        affine = policy.affine
        check = ConfigValidator.validate_interval("scale_range", affine.scale_range, positive=True)
        result["errors"].extend(check["errors"])
        for name in ("max_rotate_deg", "translate_frac", "shear_deg"):
            if getattr(affine, name) < 0:
                result["errors"].append(f"{name} must be nonnegative: {getattr(affine, name)}")
        if not 0.0 <= policy.min_box_area_frac < 1.0:
            result["errors"].append(f"min_box_area_frac must be in [0, 1): {policy.min_box_area_frac}")
        result["is_valid"] = not result["errors"]
        return result

    @staticmethod
    def validate_detector(config: Any) -> Dict[str, Any]:
        """
        Validate a DetectorConfig

        Args:
            config: DetectorConfig-like object

        Returns:
            Dictionary with validation results
        """
        result = _result()
        if config.num_scales not in (3, 4):
            _fail(result, f"num_scales must be 3 or 4: {config.num_scales}")
        if config.asaf_enabled and config.num_scales != 4:
            _fail(result, "asaf_enabled requires num_scales = 4")
        if config.base_channels < 1:
            _fail(result, f"base_channels must be positive: {config.base_channels}")
        if config.depth_multiple <= 0:
            _fail(result, f"depth_multiple must be positive: {config.depth_multiple}")
        if config.input_size <= 0 or config.input_size % 32 != 0:
            _fail(result, f"input_size must be a positive multiple of 32: {config.input_size}")
        if config.transformer_heads < 1 or (config.base_channels * 8) % config.transformer_heads:
            _fail(
                result,
                f"transformer_heads must divide the deepest hidden width "
                f"{config.base_channels * 8}: {config.transformer_heads}"
            )
        if config.anchors is not None:
            if len(config.anchors) != config.num_scales:
                _fail(result, f"anchors must list one group per scale ({config.num_scales})")
            else:
                for i, group in enumerate(config.anchors):
                    if not group:
                        _fail(result, f"anchor group {i} is empty")
                    elif any(len(pair) != 2 or min(pair) <= 0 for pair in group):
                        _fail(result, f"anchor group {i} must hold positive (w, h) pairs")
                sizes = {len(group) for group in config.anchors}
                if len(sizes) > 1:
                    _fail(result, "every scale must use the same number of anchors")
        return result

    @staticmethod
    def validate_shem(config: Any, num_scales: int) -> Dict[str, Any]:
        """
        Validate a SHEMConfig against the detector scale count

        Args:
            config: SHEMConfig-like object
            num_scales: Number of detection scales

        Returns:
            Dictionary with validation results
        """
        result = _result()
        if config.focal_gamma < 0:
            _fail(result, f"focal_gamma must be >= 0: {config.focal_gamma}")
        if not 0.0 < config.focal_alpha <= 1.0:
            _fail(result, f"focal_alpha must be in (0, 1]: {config.focal_alpha}")
        if config.xi <= 1.0:
            _fail(result, f"xi must be > 1: {config.xi}")
        if not 0.0 < config.top_k_percent <= 100.0:
            _fail(result, f"top_k_percent must be in (0, 100]: {config.top_k_percent}")
        if len(config.scale_weights) < num_scales:
            _fail(
                result,
                f"scale_weights needs {num_scales} values, got {len(config.scale_weights)}"
            )
        if any(w < 0 for w in config.scale_weights):
            _fail(result, "scale_weights must be nonnegative")
        elif not any(w > 0 for w in config.scale_weights[:num_scales]):
            _fail(result, "scale_weights must not all be zero")
        if config.reg_lambda < 0:
            _fail(result, f"reg_lambda must be >= 0: {config.reg_lambda}")
        return result

    @staticmethod
    def validate_spf(config: Any) -> Dict[str, Any]:
        """
        Validate an SPFConfig

        Args:
            config: SPFConfig-like object

        Returns:
            Dictionary with validation results
        """
        result = _result()
        if not _is_probability(config.gate):
            _fail(result, f"gate must be in [0, 1]: {config.gate}")
        if config.alpha <= 0:
            _fail(result, f"alpha must be > 0: {config.alpha}")
        if config.h_max != 0.3:
            _fail(result, f"h_max is fixed at 0.3: {config.h_max}")
        if config.finetune_epochs not in (2, 3):
            _fail(result, f"finetune_epochs must be 2 or 3: {config.finetune_epochs}")
        if config.freeze_n < 0:
            _fail(result, f"freeze_n must be >= 0: {config.freeze_n}")
        if config.lr_scale <= 0:
            _fail(result, f"lr_scale must be > 0: {config.lr_scale}")
        if config.objectness_mode not in ("simple_source", "complex_source"):
            _fail(result, f"unknown objectness_mode: {config.objectness_mode}")
        if config.alpha > 1.0:
            result["warnings"].append(
                "alpha > 1 selects more pseudo-labelled images than source images; "
                "the selection is still capped at h = 0.3"
            )
        return result

    @staticmethod
    def validate_optimizer(config: Any) -> Dict[str, Any]:
        """
        Validate an OptimizerConfig

        Args:
            config: OptimizerConfig-like object

        Returns:
            Dictionary with validation results
        """
        result = _result()
        if config.lr <= 0:
            _fail(result, f"lr must be > 0: {config.lr}")
        if not 0.0 <= config.momentum < 1.0:
            _fail(result, f"momentum must be in [0, 1): {config.momentum}")
        if config.weight_decay < 0:
            _fail(result, f"weight_decay must be >= 0: {config.weight_decay}")
        if config.warmup_epochs < 0:
            _fail(result, f"warmup_epochs must be >= 0: {config.warmup_epochs}")
        if not 0.0 < config.final_lr_ratio <= 1.0:
            _fail(result, f"final_lr_ratio must be in (0, 1]: {config.final_lr_ratio}")
        return result

    @staticmethod
    def validate_run(seed: Any, device: Any) -> Dict[str, Any]:
        """
        Validate the run-level seed and torch device name

        Args:
            seed: Global seed; must fit numpy's 32-bit seed range
            device: cpu, mps, cuda or cuda:N

        Returns:
            Dictionary with validation results
        """
        result = _result()
        if isinstance(seed, bool) or not isinstance(seed, int):
            _fail(result, f"seed must be an integer: {seed!r}")
        elif not 0 <= seed < 2 ** 32:
            _fail(result, f"seed must be in [0, 2**32): {seed}")
        if not isinstance(device, str) or not _DEVICE_PATTERN.fullmatch(device):
            _fail(result, f"train.device must be cpu, mps, cuda or cuda:N: {device!r}")
        return result

    @staticmethod
    def merge(results: List[Dict[str, Any]]) -> Dict[str, Any]:
        """
        Merge several validation results into one

        Args:
            results: Validation result dictionaries

        Returns:
            Combined validation result
        """
        merged = _result()
        for result in results:
            merged["errors"].extend(result["errors"])
            merged["warnings"].extend(result["warnings"])
        merged["is_valid"] = not merged["errors"]
        return merged
