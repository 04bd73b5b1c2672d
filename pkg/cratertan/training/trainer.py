"""
Stage-one trainer: letterboxed augmented batches, momentum SGD with warmup and
linear decay, per-step loss logging and best-val-mAP checkpointing
"""

import csv
import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from cratertan.core.augmentation import AugPolicy, augment
from cratertan.core.data_domains import (
    Detection,
    LabeledImage,
    invert_letterbox_box,
    letterbox_params,
    letterbox_resize,
)
from cratertan.core.metrics import MetricsReport, evaluate
from cratertan.model.detector import CraterDetector, decode_and_nms, save_checkpoint
from cratertan.model.losses import ObjectnessMode, SHEMConfig, regularized_weights, total_loss
from cratertan.utils.validators import ConfigValidator

LOG_COLUMNS = [
    "epoch", "step", "lr", "box_ciou", "objectness", "classification",
    "regularization", "total", "num_positives",
    "obj_scale0", "obj_scale1", "obj_scale2", "obj_scale3",
]


class TrainingError(Exception):
    """Exception raised for invalid training inputs"""
    pass


@dataclass
class OptimizerConfig:
    """Momentum SGD and learning-rate schedule"""

    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 0.0005
    warmup_epochs: float = 3.0
    final_lr_ratio: float = 0.01
    nesterov: bool = True

    def validate(self) -> None:
        validation = ConfigValidator.validate_optimizer(self)
        if not validation["is_valid"]:
            raise TrainingError(f"Invalid optimizer config: {'; '.join(validation['errors'])}")


@dataclass
class TrainConfig:
    """Loop, evaluation and loss-gain settings"""

    epochs: int = 30
    batch_size: int = 8
    device: str = "cpu"
    deterministic: bool = True
    num_workers: int = 0
    eval_conf_thresh: float = 0.001
    eval_nms_iou: float = 0.6
    report_conf: float = 0.25
    operating_point: str = "fixed"
    box_gain: float = 0.05
    obj_gain: float = 1.0
    cls_gain: float = 0.5
    grad_clip: float = 10.0

    @property
    def gains(self) -> Tuple[float, float, float]:
        return (self.box_gain, self.obj_gain, self.cls_gain)


@dataclass
class TrainResult:
    """Outcome of a training run"""

    best_epoch: int
    best_metrics: Dict[str, Any]
    history: Dict[str, List[float]]
    best_checkpoint: Optional[Path] = None
    last_checkpoint: Optional[Path] = None
    log_csv: Optional[Path] = None
    images_per_epoch: List[int] = field(default_factory=list)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    """Seed python, numpy and torch; optionally force deterministic kernels"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False


def resolve_device(name: str) -> torch.device:
    if name.startswith("cuda") and not torch.cuda.is_available():
        logging.getLogger(__name__).warning(f"{name} requested but CUDA is unavailable, using cpu")
        return torch.device("cpu")
    return torch.device(name)


def image_to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """H x W x 1|3 uint8 -> 3 x H x W float32 in [0, 1]"""
    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1))).float() / 255.0


def lr_factor(progress: float, epochs: int, warmup_epochs: float, final_lr_ratio: float) -> float:
    """
    Learning-rate multiplier at fractional epoch ``progress``

    Linear decay from 1 to ``final_lr_ratio`` over the run, scaled by a linear
    warmup ramp during the first ``warmup_epochs``.
    """
    decay = (1.0 - progress / max(epochs, 1)) * (1.0 - final_lr_ratio) + final_lr_ratio
    if warmup_epochs > 0 and progress < warmup_epochs:
        return decay * min(1.0, (progress + 1e-3) / warmup_epochs)
    return decay


class CraterDataset(Dataset):
    """
    Letterboxed (and optionally augmented) images with normalized box targets.

    Augmentation draws come from a generator seeded by (seed, epoch, index), so
    batches are reproducible regardless of loader order.
    """

    def __init__(
        self,
        images: Sequence[LabeledImage],
        input_size: int,
        policy: Optional[AugPolicy] = None,
        seed: int = 0,
    ):
        if not images:
            raise TrainingError("Training set is empty")
        self.input_size = input_size
        self.policy = policy
        self.seed = seed
        self.epoch = 0
        self.images = [letterbox_resize(image, input_size) for image in images]

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int):
        image = self.images[index]
        if self.policy is not None:
            rng = np.random.default_rng([self.seed, self.epoch, index])
            image = augment(image, rng, self.policy, pool=self.images)
            if image.height != self.input_size or image.width != self.input_size:
                image = letterbox_resize(image, self.input_size)
        boxes = torch.tensor(
            [[b.class_id, b.cx, b.cy, b.w, b.h] for b in image.boxes], dtype=torch.float32
        ).reshape(-1, 5)
        return image_to_tensor(image.pixels), boxes, image.source_id


def collate_batch(batch):
    """Stack images; prefix every target row with its image index"""
    tensors, boxes, ids = zip(*batch)
    targets = [
        torch.cat((torch.full((len(b), 1), float(i)), b), 1) for i, b in enumerate(boxes)
    ]
    return torch.stack(tensors), torch.cat(targets, 0), list(ids)


def build_optimizer(model: torch.nn.Module, cfg: OptimizerConfig, lr_scale: float = 1.0) -> torch.optim.SGD:
    """
    SGD with three parameter groups: decayed weights, undecayed normalization
    weights, undecayed biases. Frozen parameters are left out.
    """
    decay, no_decay, biases = [], [], []
    for module in model.modules():
        bias = getattr(module, "bias", None)
        if isinstance(bias, torch.nn.Parameter) and bias.requires_grad:
            biases.append(bias)
        weight = getattr(module, "weight", None)
        if isinstance(weight, torch.nn.Parameter) and weight.requires_grad:
            if isinstance(module, (torch.nn.BatchNorm2d, torch.nn.LayerNorm)):
                no_decay.append(weight)
            else:
                decay.append(weight)
        in_proj = getattr(module, "in_proj_weight", None)
        if isinstance(in_proj, torch.nn.Parameter) and in_proj.requires_grad:
            decay.append(in_proj)
        in_bias = getattr(module, "in_proj_bias", None)
        if isinstance(in_bias, torch.nn.Parameter) and in_bias.requires_grad:
            biases.append(in_bias)

    lr = cfg.lr * lr_scale
    optimizer = torch.optim.SGD(
        [{"params": no_decay, "weight_decay": 0.0}], lr=lr, momentum=cfg.momentum,
        nesterov=cfg.nesterov and cfg.momentum > 0,
    )
    optimizer.add_param_group({"params": decay, "weight_decay": cfg.weight_decay})
    optimizer.add_param_group({"params": biases, "weight_decay": 0.0})
    for group in optimizer.param_groups:
        group["initial_lr"] = lr
    return optimizer


@torch.no_grad()
def predict_images(
    model: CraterDetector,
    images: Sequence[LabeledImage],
    conf_thresh: float,
    nms_iou: float,
    batch_size: int = 8,
    device: Optional[torch.device] = None,
) -> Dict[str, List[Detection]]:
    """
    Run inference and map detections back to each image's original frame

    Args:
        model: Detector
        images: Images of any size (labels are ignored)
        conf_thresh: Confidence cutoff
        nms_iou: NMS overlap threshold
        batch_size: Inference batch size
        device: Device; defaults to the model's

    Returns:
        image_id -> detections in source-image normalized coordinates
    """
    device = device or next(model.parameters()).device
    size = model.config.input_size
    was_training = model.training
    model.eval()

    results: Dict[str, List[Detection]] = {}
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        batch = torch.stack([
            image_to_tensor(letterbox_resize(image.without_labels(), size).pixels) for image in chunk
        ]).to(device)
        per_image = decode_and_nms(model(batch), conf_thresh, nms_iou)
        for image, detections in zip(chunk, per_image):
            params = letterbox_params(image.height, image.width, size)
            mapped = []
            for det in detections:
                box = invert_letterbox_box(det.box, params)
                if box is not None:
                    mapped.append(Detection(box, det.confidence))
            results[image.source_id] = mapped

    model.train(was_training)
    return results


def evaluate_model(
    model: CraterDetector,
    images: Sequence[LabeledImage],
    cfg: TrainConfig,
    device: Optional[torch.device] = None,
) -> MetricsReport:
    """Predict on labelled images and compute the metrics report"""
    predictions = predict_images(
        model, images, cfg.eval_conf_thresh, cfg.eval_nms_iou, cfg.batch_size, device
    )
    ground_truth = {image.source_id: image.boxes for image in images}
    return evaluate(predictions, ground_truth, cfg.report_conf, cfg.operating_point)


class Trainer:
    """
    Trains a CraterDetector with one objectness mode
    """

    def __init__(
        self,
        model: CraterDetector,
        train_cfg: TrainConfig,
        optim_cfg: OptimizerConfig,
        shem_cfg: SHEMConfig,
        mode: Union[ObjectnessMode, str],
        lr_scale: float = 1.0,
        logger: Optional[logging.Logger] = None,
    ):
        """
        Initialize the trainer

        Args:
            model: Detector to train (modified in place)
            train_cfg: Loop settings
            optim_cfg: Optimizer settings
            shem_cfg: Loss parameters
            mode: Objectness mode, complex_source (SHEM) or simple_source (focal)
            lr_scale: Multiplier on the base learning rate
            logger: Logger, defaults to this module's
        """
        optim_cfg.validate()
        self.logger = logger or logging.getLogger(__name__)
        self.model = model
        self.train_cfg = train_cfg
        self.optim_cfg = optim_cfg
        self.shem_cfg = shem_cfg
        self.mode = ObjectnessMode(getattr(mode, "value", mode))
        self.lr_scale = lr_scale
        self.device = resolve_device(train_cfg.device)
        self.model.to(self.device)
        self.optimizer = build_optimizer(model, optim_cfg, lr_scale)

    def _set_lr(self, progress: float, epochs: int) -> float:
        factor = lr_factor(progress, epochs, self.optim_cfg.warmup_epochs, self.optim_cfg.final_lr_ratio)
        for group in self.optimizer.param_groups:
            group["lr"] = group["initial_lr"] * factor
        return self.optimizer.param_groups[0]["lr"]

    def train_epoch(
        self, loader: DataLoader, epoch: int, epochs: int, writer: Optional[Any] = None
    ) -> Dict[str, float]:
        """
        One pass over ``loader``

        Returns:
            Mean loss components over the epoch, plus the image count
        """
        self.model.train()
        sums: Dict[str, float] = {}
        steps, seen = 0, 0
        num_batches = max(len(loader), 1)

        for step, (images, targets, _) in enumerate(loader):
            lr = self._set_lr(epoch + step / num_batches, epochs)
            images, targets = images.to(self.device), targets.to(self.device)

            out = self.model(images)
            weights = regularized_weights(self.model) if self.mode == ObjectnessMode.COMPLEX_SOURCE else None
            losses = total_loss(out, targets, self.mode, self.shem_cfg, weights, self.train_cfg.gains)

            if not torch.isfinite(losses.total):
                self.logger.warning(f"Non-finite loss at epoch {epoch} step {step}, skipping step")
                self.optimizer.zero_grad(set_to_none=True)
                continue

            self.optimizer.zero_grad(set_to_none=True)
            losses.total.backward()
            if self.train_cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(
                    [p for p in self.model.parameters() if p.requires_grad], self.train_cfg.grad_clip
                )
            self.optimizer.step()

            row = losses.to_dict()
            for key in ("box_ciou", "objectness", "classification", "regularization", "total"):
                sums[key] = sums.get(key, 0.0) + row[key]
            steps += 1
            seen += images.shape[0]
            if writer is not None:
                writer.writerow([epoch, step, f"{lr:.6g}"] + [row.get(c, "") for c in LOG_COLUMNS[3:]])

        means = {key: value / max(steps, 1) for key, value in sums.items()}
        means["images"] = seen
        return means

    def fit(
        self,
        train_images: Sequence[LabeledImage],
        val_images: Sequence[LabeledImage],
        epochs: int,
        out_dir: Union[str, Path],
        policy: Optional[AugPolicy] = None,
        seed: int = 0,
        checkpoint_meta: Optional[Dict[str, Any]] = None,
        best_name: str = "best.ckpt",
        last_name: str = "last.ckpt",
    ) -> TrainResult:
        """
        Train for ``epochs`` epochs, validating after each and keeping the best checkpoint

        Args:
            train_images: Labelled training images
            val_images: Labelled validation images (may be empty)
            epochs: Number of epochs
            out_dir: Directory for checkpoints, train_log.csv and history.json
            policy: Augmentation policy, None for no augmentation
            seed: Seed of shuffling and augmentation
            checkpoint_meta: Extra metadata stored in checkpoints
            best_name: File name of the best checkpoint
            last_name: File name of the final checkpoint

        Returns:
            TrainResult
        """
        if epochs < 1:
            raise TrainingError(f"epochs must be >= 1: {epochs}")
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        dataset = CraterDataset(train_images, self.model.config.input_size, policy, seed)
        generator = torch.Generator()
        generator.manual_seed(seed)
        loader = DataLoader(
            dataset,
            batch_size=self.train_cfg.batch_size,
            shuffle=True,
            num_workers=self.train_cfg.num_workers,
            collate_fn=collate_batch,
            generator=generator,
        )

        history: Dict[str, List[float]] = {}
        best_score, best_epoch, best_metrics = -1.0, -1, {}
        images_per_epoch: List[int] = []
        log_csv = out_dir / "train_log.csv"
        best_path, last_path = out_dir / best_name, out_dir / last_name
        meta = dict(checkpoint_meta or {}, seed=seed, mode=self.mode.value)

        self.logger.info(
            f"Training {epochs} epochs on {len(dataset)} images "
            f"(mode={self.mode.value}, augmentation={policy.kind.value if policy else 'none'})"
        )
        with open(log_csv, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(LOG_COLUMNS)

            for epoch in range(epochs):
                dataset.set_epoch(epoch)
                means = self.train_epoch(loader, epoch, epochs, writer)
                images_per_epoch.append(int(means.pop("images")))
                for key, value in means.items():
                    history.setdefault(key, []).append(value)

                if val_images:
                    report = evaluate_model(self.model, val_images, self.train_cfg, self.device)
                    metrics = {"map50": report.map50, "map5095": report.map5095,
                               "precision": report.precision, "recall": report.recall}
                else:
                    metrics = {"map50": 0.0, "map5095": 0.0, "precision": 0.0, "recall": 0.0}
                for key, value in metrics.items():
                    history.setdefault(key, []).append(value)

                self.logger.info(
                    f"Epoch {epoch + 1}/{epochs}: loss={means.get('total', float('nan')):.4f} "
                    f"obj={means.get('objectness', float('nan')):.4f} "
                    f"mAP@.5={metrics['map50']:.4f} mAP@.5:.95={metrics['map5095']:.4f}"
                )

                if val_images and metrics["map50"] > best_score:
                    best_score, best_epoch, best_metrics = metrics["map50"], epoch, metrics
                    save_checkpoint(self.model, best_path, dict(meta, epoch=epoch, val=metrics))

        save_checkpoint(self.model, last_path, dict(meta, epoch=epochs - 1, val=metrics))
        (out_dir / "history.json").write_text(
            json.dumps({"history": history, "best_epoch": best_epoch, "best_metrics": best_metrics,
                        "images_per_epoch": images_per_epoch, "optimizer": asdict(self.optim_cfg)},
                       indent=2),
            encoding="utf-8",
        )
        try:
            from cratertan.utils.plotting import plot_training_history

            plot_training_history(history, out_dir / "history.png")
        except Exception as e:
            self.logger.warning(f"Could not plot training history: {e}")

        return TrainResult(
            best_epoch=best_epoch,
            best_metrics=best_metrics,
            history=history,
            best_checkpoint=best_path if best_epoch >= 0 else None,
            last_checkpoint=last_path,
            log_csv=log_csv,
            images_per_epoch=images_per_epoch,
        )


__all__ = [
    "CraterDataset",
    "OptimizerConfig",
    "TrainConfig",
    "TrainResult",
    "Trainer",
    "TrainingError",
    "build_optimizer",
    "collate_batch",
    "evaluate_model",
    "image_to_tensor",
    "lr_factor",
    "predict_images",
    "resolve_device",
    "seed_everything",
]
