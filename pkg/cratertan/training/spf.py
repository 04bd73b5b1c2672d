"""
Stage two: pseudo-labels on the unlabelled target domain, count-sorted
selection and fine-tuning with a frozen backbone
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from cratertan.core.augmentation import AugPolicy
from cratertan.core.data_domains import BoundingBox, Detection, LabeledImage
from cratertan.model.detector import CraterDetector, freeze_layers
from cratertan.model.losses import SHEMConfig
from cratertan.training.trainer import OptimizerConfig, TrainConfig, Trainer, TrainResult, predict_images
from cratertan.utils.validators import ConfigValidator

logger = logging.getLogger(__name__)

H_MAX = 0.3


class SPFError(Exception):
    """Exception raised for pseudo-label selection and fine-tuning errors"""
    pass


@dataclass
class SPFConfig:
    """Pseudo-label selection and fine-tuning settings"""

    gate: float = 0.8
    alpha: float = 0.3
    h_max: float = H_MAX
    finetune_epochs: int = 3
    freeze_n: int = 10
    lr_scale: float = 0.1
    objectness_mode: str = "simple_source"
    nms_iou: float = 0.6

    def validate(self) -> None:
        validation = ConfigValidator.validate_spf(self)
        if not validation["is_valid"]:
            raise SPFError(f"Invalid SPF config: {'; '.join(validation['errors'])}")
        for warning in validation["warnings"]:
            logger.warning(warning)


@dataclass
class PseudoLabelSet:
    """
    Gated detections per target image; images without survivors keep an empty list
    """

    entries: List[Tuple[str, List[Detection]]]
    gate: float
    source_model_id: str = ""

    def __post_init__(self):
        ids = [image_id for image_id, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise SPFError("Pseudo-label entries must have unique image ids")
        for image_id, detections in self.entries:
            if any(d.confidence < self.gate for d in detections):
                raise SPFError(f"Entry {image_id} holds a detection below the gate {self.gate}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def image_ids(self) -> List[str]:
        return [image_id for image_id, _ in self.entries]

    def counts(self) -> Dict[str, int]:
        return {image_id: len(detections) for image_id, detections in self.entries}


def generate_pseudo_labels(
    model: CraterDetector,
    target_images: Sequence[LabeledImage],
    cfg: SPFConfig,
    source_model_id: str = "",
    batch_size: int = 8,
) -> PseudoLabelSet:
    """
    Promote detections with confidence >= gate to pseudo-boxes

    Target box lists are never consulted.

    Args:
        model: Stage-one detector
        target_images: Unlabelled target images
        cfg: SPF settings
        source_model_id: Identifier of the stage-one checkpoint
        batch_size: Inference batch size

    Returns:
        PseudoLabelSet with one entry per target image
    """
    if not target_images:
        raise SPFError("Target image set is empty")
    unlabelled = [image.without_labels() for image in target_images]
    if cfg.gate >= 1.0:
        predictions: Dict[str, List[Detection]] = {image.source_id: [] for image in unlabelled}
    else:
        predictions = predict_images(model, unlabelled, cfg.gate, cfg.nms_iou, batch_size)

    entries = [(image.source_id, predictions[image.source_id]) for image in unlabelled]
    pls = PseudoLabelSet(entries=entries, gate=cfg.gate, source_model_id=source_model_id)
    logger.info(
        f"Pseudo-labels: {sum(len(d) for _, d in entries)} boxes on "
        f"{sum(1 for _, d in entries if d)}/{len(entries)} target images (gate {cfg.gate})"
    )
    return pls


def compute_h(n1: int, n2: int, alpha: float, h_max: float = H_MAX) -> float:
    """
    Selected proportion h = min(n1 * alpha / n2, h_max)

    Args:
        n1: Number of labelled source training images
        n2: Number of target images
        alpha: Control parameter, smaller when the source set is much larger

    Returns:
        h in (0, h_max]
    """
    if n1 <= 0 or n2 <= 0 or alpha <= 0:
        raise SPFError(f"compute_h needs positive inputs: n1={n1}, n2={n2}, alpha={alpha}")
    return min(n1 * alpha / n2, h_max)


def selection_size(h: float, n2: int) -> int:
    """ceil(h * n2), at least 1"""
    return max(1, math.ceil(h * n2 - 1e-9))


def sort_and_select(pls: PseudoLabelSet, h: float) -> PseudoLabelSet:
    """
    Keep the ceil(h * N2) images with the most pseudo-boxes

    Ties in the count are broken by image id ascending.

    Args:
        pls: Pseudo-label set over all N2 target images
        h: Selected proportion, 0 < h <= 0.3

    Returns:
        The selected subset, in selection order
    """
    if not 0.0 < h <= H_MAX + 1e-12:
        raise SPFError(f"h must be in (0, {H_MAX}]: {h}")
    ordered = sorted(pls.entries, key=lambda entry: (-len(entry[1]), entry[0]))
    keep = selection_size(h, len(pls.entries))
    return PseudoLabelSet(entries=ordered[:keep], gate=pls.gate, source_model_id=pls.source_model_id)


def pseudo_labelled_images(
    selected: PseudoLabelSet, images: Sequence[LabeledImage]
) -> List[LabeledImage]:
    """Attach the selected pseudo-boxes to their target images"""
    by_id = {image.source_id: image for image in images}
    missing = [image_id for image_id in selected.image_ids if image_id not in by_id]
    if missing:
        raise SPFError(f"Selected pseudo-labels reference unknown images: {missing[:5]}")
    return [
        LabeledImage(by_id[image_id].pixels, [d.box for d in detections], image_id)
        for image_id, detections in selected.entries
    ]


def finetune(
    model: CraterDetector,
    selected: PseudoLabelSet,
    images: Sequence[LabeledImage],
    cfg: SPFConfig,
    train_cfg: TrainConfig,
    optim_cfg: OptimizerConfig,
    shem_cfg: SHEMConfig,
    out_dir: Union[str, Path],
    policy: Optional[AugPolicy] = None,
    seed: int = 0,
) -> Tuple[CraterDetector, TrainResult]:
    """
    Fine-tune on the selected pseudo-labelled images with the first
    ``cfg.freeze_n`` layer-groups frozen

    Args:
        model: Stage-one detector (modified in place)
        selected: Selected pseudo-labels
        images: Target images (pixels only are used)
        cfg: SPF settings
        train_cfg: Loop settings
        optim_cfg: Optimizer settings; the learning rate is scaled by cfg.lr_scale
        shem_cfg: Loss parameters
        out_dir: Output directory for m2.ckpt and train_log.csv
        policy: Augmentation policy
        seed: Seed of shuffling and augmentation

    Returns:
        (fine-tuned model, training result)
    """
    cfg.validate()
    if not selected.entries:
        raise SPFError("Pseudo-label selection is empty; lower spf.gate to admit more detections")
    if all(not detections for _, detections in selected.entries):
        raise SPFError(
            f"No pseudo-boxes passed the confidence gate {selected.gate}; lower spf.gate"
        )

    freeze_layers(model, cfg.freeze_n)
    trainer = Trainer(
        model, train_cfg, optim_cfg, shem_cfg, cfg.objectness_mode, lr_scale=cfg.lr_scale
    )
    result = trainer.fit(
        pseudo_labelled_images(selected, images),
        [],
        cfg.finetune_epochs,
        out_dir,
        policy=policy,
        seed=seed,
        checkpoint_meta={"stage": "spf", "gate": selected.gate, "selected": len(selected)},
        last_name="m2.ckpt",
    )
    return model, result


def save_manifest(pls: PseudoLabelSet, path: Union[str, Path]) -> Path:
    """
    Write one JSON line per image: {image_id, gate, detections: [{cx, cy, w, h, confidence}]}
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for image_id, detections in pls.entries:
            row = {
                "image_id": image_id,
                "gate": pls.gate,
                "source_model_id": pls.source_model_id,
                "detections": [
                    {"class_id": d.class_id, "cx": d.box.cx, "cy": d.box.cy,
                     "w": d.box.w, "h": d.box.h, "confidence": d.confidence}
                    for d in detections
                ],
            }
            f.write(json.dumps(row) + "\n")
    return path


def load_manifest(path: Union[str, Path]) -> PseudoLabelSet:
    """Read a manifest written by ``save_manifest``"""
    path = Path(path)
    if not path.is_file():
        raise SPFError(f"Pseudo-label manifest not found: {path}")
    entries, gate, model_id = [], None, ""
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                detections = [
                    Detection(
                        BoundingBox(int(d.get("class_id", 0)), d["cx"], d["cy"], d["w"], d["h"]),
                        d["confidence"],
                    )
                    for d in row["detections"]
                ]
            except (ValueError, KeyError) as e:
                raise SPFError(f"{path}: line {line_number}: {e}")
            gate = row.get("gate", gate)
            model_id = row.get("source_model_id", model_id)
            entries.append((row["image_id"], detections))
    return PseudoLabelSet(entries=entries, gate=gate if gate is not None else 0.0, source_model_id=model_id)


__all__ = [
    "H_MAX",
    "PseudoLabelSet",
    "SPFConfig",
    "SPFError",
    "compute_h",
    "finetune",
    "generate_pseudo_labels",
    "load_manifest",
    "pseudo_labelled_images",
    "save_manifest",
    "selection_size",
    "sort_and_select",
]
