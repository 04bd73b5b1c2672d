"""
Loss stack: focal, balanced focal (BFL), multi-scale loss-rank mining (LRM),
SHEM with L2 smoothing, CIoU, anchor target assignment and total-loss assembly
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from cratertan.model.detector import DetectionOutput
from cratertan.utils.validators import ConfigValidator

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
ANCHOR_RATIO_LIMIT = 4.0


class LossError(Exception):
    """Exception raised for invalid loss inputs or parameters"""
    pass


class ObjectnessMode(str, Enum):
    """Objectness pathway of the total loss"""
    COMPLEX_SOURCE = "complex_source"
    SIMPLE_SOURCE = "simple_source"


@dataclass
class SHEMConfig:
    """
    Hard-example mining parameters. ``scale_weights`` run from the finest to the
    coarsest detection scale.
    """

    focal_gamma: float = 2.0
    focal_alpha: float = 1.0
    xi: float = 1.5
    top_k_percent: float = 70.0
    scale_weights: Tuple[float, ...] = (4.0, 1.0, 0.4, 0.1)
    reg_lambda: float = 5e-9

    def __post_init__(self):
        self.scale_weights = tuple(float(w) for w in self.scale_weights)

    def validate(self, num_scales: int) -> None:
        validation = ConfigValidator.validate_shem(self, num_scales)
        if not validation["is_valid"]:
            raise LossError(f"Invalid SHEM config: {'; '.join(validation['errors'])}")


@dataclass
class LossBreakdown:
    """
    Loss components as 0-dim tensors; ``total`` carries the graph for backward
    """

    box_ciou: torch.Tensor
    objectness: torch.Tensor
    classification: torch.Tensor
    regularization: torch.Tensor
    total: torch.Tensor
    per_scale_objectness: List[float] = field(default_factory=list)
    gains: Tuple[float, float, float] = (0.05, 1.0, 0.5)
    num_positives: int = 0

    def to_dict(self) -> Dict[str, float]:
        row = {
            "box_ciou": float(self.box_ciou.detach()),
            "objectness": float(self.objectness.detach()),
            "classification": float(self.classification.detach()),
            "regularization": float(self.regularization.detach()),
            "total": float(self.total.detach()),
            "num_positives": self.num_positives,
        }
        for i, value in enumerate(self.per_scale_objectness):
            row[f"obj_scale{i}"] = value
        return row


# ---------------------------------------------------------------------------
# Elementwise losses
# ---------------------------------------------------------------------------

def focal_loss(
    q: torch.Tensor, y: torch.Tensor, focal_gamma: float, focal_alpha: float = 1.0
) -> torch.Tensor:
    """
    Elementwise focal loss -(1 - p)^gamma * log(p), p = q for y = 1 else 1 - q

    Args:
        q: Predicted probabilities, clamped to [1e-7, 1 - 1e-7]
        y: Binary labels, same shape
        focal_gamma: Focusing parameter (0 gives cross-entropy)
        focal_alpha: Weight on positive entries

    Returns:
        Loss tensor, same shape as ``q``
    """
    q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    positive = y > 0.5
    p = torch.where(positive, q, 1.0 - q)
    loss = -((1.0 - p) ** focal_gamma) * torch.log(p)
    if focal_alpha != 1.0:
        loss = loss * torch.where(positive, torch.full_like(q, focal_alpha), torch.ones_like(q))
    return loss


def focal_loss_with_logits(
    logits: torch.Tensor, y: torch.Tensor, focal_gamma: float, focal_alpha: float = 1.0
) -> torch.Tensor:
    """Focal loss on logits, using log-sigmoid for stability"""
    positive = y > 0.5
    log_p = torch.where(positive, F.logsigmoid(logits), F.logsigmoid(-logits))
    log_p = log_p.clamp(max=math.log1p(-PROB_CLAMP))
    loss = -((1.0 - log_p.exp()) ** focal_gamma) * log_p
    if focal_alpha != 1.0:
        loss = loss * torch.where(positive, torch.full_like(loss, focal_alpha), torch.ones_like(loss))
    return loss


def bfl(losses: torch.Tensor, xi: float) -> torch.Tensor:
    """
    Balanced focal loss: xi times the focal losses

    Raises:
        LossError: If xi <= 1
    """
    if xi <= 1.0:
        raise LossError(f"xi must be > 1: {xi}")
    return losses * xi


def _top_k_count(count: int, top_k_percent: float) -> int:
    return max(1, math.ceil(top_k_percent * count / 100.0 - 1e-9))


def lrm(
    per_scale_losses: Sequence[torch.Tensor],
    top_k_percent: float,
    scale_weights: Sequence[float],
) -> torch.Tensor:
    """
    Multi-scale loss-rank mining

    Per scale, the top ceil(K% * count) loss values are averaged; the per-scale
    means are combined as a weighted average.

    Args:
        per_scale_losses: One loss tensor per scale, finest first
        top_k_percent: K in (0, 100]
        scale_weights: Nonnegative weight per scale

    Returns:
        0-dim loss tensor
    """
    if not 0.0 < top_k_percent <= 100.0:
        raise LossError(f"top_k_percent must be in (0, 100]: {top_k_percent}")
    if len(scale_weights) < len(per_scale_losses):
        raise LossError(f"{len(per_scale_losses)} scales but {len(scale_weights)} weights")

    weighted = []
    total_weight = 0.0
    for index, (losses, weight) in enumerate(zip(per_scale_losses, scale_weights)):
        values = losses.reshape(-1)
        if values.numel() == 0:
            logger.warning(f"Scale {index} has no loss values; it contributes with weight 0")
            continue
        if weight < 0:
            raise LossError(f"scale weight {index} is negative: {weight}")
        k = _top_k_count(values.numel(), top_k_percent)
        top = torch.sort(values, descending=True).values[:k]
        weighted.append(weight * top.mean())
        total_weight += weight

    if total_weight <= 0.0:
        raise LossError("All scale weights are zero (or every scale is empty)")
    return torch.stack(weighted).sum() / total_weight


def l2_penalty(model_weights: Iterable[torch.Tensor]) -> torch.Tensor:
    """Sum of squares over all given tensors, accumulated in float64"""
    total = torch.zeros((), dtype=torch.float64)
    for weight in model_weights:
        total = total.to(weight.device) + weight.double().pow(2).sum()
    return total


def shem(
    per_scale_losses: Sequence[torch.Tensor],
    cfg: SHEMConfig,
    model_weights: Iterable[torch.Tensor] = (),
) -> torch.Tensor:
    """
    LRM over BFL-scaled focal losses plus reg_lambda * ||w||^2

    Args:
        per_scale_losses: Per-scale focal loss tensors
        cfg: SHEM parameters
        model_weights: Weight tensors entering the L2 term

    Returns:
        0-dim loss tensor
    """
    mined = lrm([bfl(l, cfg.xi) for l in per_scale_losses], cfg.top_k_percent, cfg.scale_weights)
    if cfg.reg_lambda == 0:
        return mined
    return mined + (cfg.reg_lambda * l2_penalty(model_weights)).to(mined.dtype)


def ciou_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """
    Complete-IoU loss: 1 - IoU + center distance^2 / enclosing diagonal^2 + alpha * v

    Args:
        pred: (..., 4) center-format boxes (cx, cy, w, h)
        gt: (..., 4) center-format boxes

    Returns:
        Loss per box pair, shape (...)

    Raises:
        LossError: If any box has zero or negative extent
    """
    if (pred[..., 2:4] <= 0).any() or (gt[..., 2:4] <= 0).any():
        raise LossError("CIoU needs boxes with positive width and height")

    p_x1, p_x2 = pred[..., 0] - pred[..., 2] / 2, pred[..., 0] + pred[..., 2] / 2
    p_y1, p_y2 = pred[..., 1] - pred[..., 3] / 2, pred[..., 1] + pred[..., 3] / 2
    g_x1, g_x2 = gt[..., 0] - gt[..., 2] / 2, gt[..., 0] + gt[..., 2] / 2
    g_y1, g_y2 = gt[..., 1] - gt[..., 3] / 2, gt[..., 1] + gt[..., 3] / 2

    inter = (torch.min(p_x2, g_x2) - torch.max(p_x1, g_x1)).clamp(min=0) * (
        torch.min(p_y2, g_y2) - torch.max(p_y1, g_y1)
    ).clamp(min=0)
    union = pred[..., 2] * pred[..., 3] + gt[..., 2] * gt[..., 3] - inter
    iou = inter / union

    cw = torch.max(p_x2, g_x2) - torch.min(p_x1, g_x1)
    ch = torch.max(p_y2, g_y2) - torch.min(p_y1, g_y1)
    c2 = cw ** 2 + ch ** 2 + eps
    rho2 = (pred[..., 0] - gt[..., 0]) ** 2 + (pred[..., 1] - gt[..., 1]) ** 2

    v = (4 / math.pi ** 2) * (torch.atan(gt[..., 2] / gt[..., 3]) - torch.atan(pred[..., 2] / pred[..., 3])) ** 2
    alpha = v / (v - iou + 1 + eps)
    return 1 - iou + rho2 / c2 + alpha * v


# ---------------------------------------------------------------------------
# Target assignment and total loss
# ---------------------------------------------------------------------------

@dataclass
class ScaleTargets:
    """Positive anchors of one scale"""

    image: torch.Tensor
    anchor: torch.Tensor
    gj: torch.Tensor
    gi: torch.Tensor
    box: torch.Tensor
    anchor_wh: torch.Tensor
    cls: torch.Tensor

    def __len__(self) -> int:
        return int(self.image.numel())


def build_targets(out: DetectionOutput, targets: torch.Tensor) -> List[ScaleTargets]:
    """
    Ratio-based anchor matching with neighbour-cell expansion

    A target is assigned to every anchor whose side ratios to it lie within
    [1/4, 4], in its own cell plus the two nearest neighbouring cells.

    Args:
        out: Raw detector output (for grid shapes, anchors and strides)
        targets: M x 6 tensor (image index, class, cx, cy, w, h), normalized

    Returns:
        One ScaleTargets per scale; boxes are (x offset in cell, y offset, w, h) in grid units
    """
    device = out.grids[0].device
    targets = targets.to(device=device, dtype=torch.float32)
    g = 0.5
    offsets = torch.tensor([[0, 0], [1, 0], [0, 1], [-1, 0], [0, -1]], device=device).float() * g

    assigned = []
    for grid, stride, anchors in zip(out.grids, out.strides, out.anchors):
        _, num_anchors, h, w, _ = grid.shape
        anchors_grid = anchors.to(device).float() / stride
        empty = torch.zeros(0, dtype=torch.long, device=device)

        if targets.numel() == 0:
            assigned.append(ScaleTargets(empty, empty, empty, empty,
                                         torch.zeros(0, 4, device=device),
                                         torch.zeros(0, 2, device=device), empty))
            continue

        t = targets.clone()
        t[:, [2, 4]] *= w
        t[:, [3, 5]] *= h

        ratio = t[None, :, 4:6] / anchors_grid[:, None]
        matched = torch.max(ratio, 1.0 / ratio).max(2).values < ANCHOR_RATIO_LIMIT
        anchor_index = torch.arange(num_anchors, device=device)[:, None].expand(num_anchors, len(t))
        t, a = t[None].expand(num_anchors, -1, -1)[matched], anchor_index[matched]

        gxy = t[:, 2:4]
        gxi = torch.tensor([w, h], device=device).float() - gxy
        j, k = ((gxy % 1 < g) & (gxy > 1)).T
        l, m = ((gxi % 1 < g) & (gxi > 1)).T
        select = torch.stack((torch.ones_like(j), j, k, l, m))
        t = t.repeat((5, 1, 1))[select]
        a = a.repeat((5, 1))[select]
        cell_offsets = (torch.zeros_like(gxy)[None] + offsets[:, None])[select]

        gij = (gxy.repeat((5, 1, 1))[select] - cell_offsets).long()
        gi = gij[:, 0].clamp(0, w - 1)
        gj = gij[:, 1].clamp(0, h - 1)
        box = torch.cat((t[:, 2:4] - torch.stack((gi, gj), 1).float(), t[:, 4:6]), 1)

        assigned.append(ScaleTargets(
            image=t[:, 0].long(),
            anchor=a,
            gj=gj,
            gi=gi,
            box=box,
            anchor_wh=anchors_grid[a],
            cls=t[:, 1].long(),
        ))
    return assigned


def regularized_weights(model: nn.Module) -> List[torch.Tensor]:
    """
    Trainable convolution, linear and attention projection weights. Biases and
    normalization parameters (the NAM scale factors included) are left out.
    """
    weights = []
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            weights.append(module.weight)
        elif isinstance(module, nn.MultiheadAttention) and module.in_proj_weight is not None:
            weights.append(module.in_proj_weight)
    return [w for w in weights if w.requires_grad]


def total_loss(
    out: DetectionOutput,
    targets: torch.Tensor,
    mode: Union[ObjectnessMode, str],
    cfg: SHEMConfig,
    model_weights: Optional[Iterable[torch.Tensor]] = None,
    gains: Tuple[float, float, float] = (0.05, 1.0, 0.5),
) -> LossBreakdown:
    """
    Box (CIoU), objectness and classification losses

    Objectness is SHEM in complex_source mode and a scale-weighted mean of the
    per-scale focal losses in simple_source mode (no mining, no L2 term).

    Args:
        out: Raw detector output
        targets: M x 6 tensor (image index, class, cx, cy, w, h), normalized
        mode: complex_source or simple_source
        cfg: SHEM / focal parameters
        model_weights: Tensors entering the L2 term (complex_source only)
        gains: (box, objectness, classification) weights

    Returns:
        LossBreakdown
    """
    mode = ObjectnessMode(getattr(mode, "value", mode))
    cfg.validate(len(out.grids))
    device = out.grids[0].device
    zero = torch.zeros((), device=device)

    assigned = build_targets(out, targets)
    ciou_terms, cls_terms, obj_terms, per_scale = [], [], [], []

    for grid, scale in zip(out.grids, assigned):
        tobj = torch.zeros(grid.shape[:4], device=device, dtype=grid.dtype)
        if len(scale):
            ps = grid[scale.image, scale.anchor, scale.gj, scale.gi]
            pxy = ps[:, 0:2].sigmoid() * 2.0 - 0.5
            pwh = scale.anchor_wh * torch.exp(ps[:, 2:4].clamp(-4.0, 4.0))
            ciou_terms.append(ciou_loss(torch.cat((pxy, pwh), 1), scale.box))
            tobj[scale.image, scale.anchor, scale.gj, scale.gi] = 1.0

            tcls = F.one_hot(scale.cls, grid.shape[-1] - 5).to(ps.dtype)
            cls_terms.append(
                focal_loss_with_logits(ps[:, 5:], tcls, cfg.focal_gamma, cfg.focal_alpha).mean(1)
            )

        obj = focal_loss_with_logits(grid[..., 4], tobj, cfg.focal_gamma, cfg.focal_alpha)
        obj_terms.append(obj.reshape(-1))
        per_scale.append(float(obj.detach().mean()))

    num_positives = sum(len(s) for s in assigned)
    box = torch.cat(ciou_terms).mean() if num_positives else zero
    cls = torch.cat(cls_terms).mean() if num_positives else zero

    if mode == ObjectnessMode.COMPLEX_SOURCE:
        objectness = lrm([bfl(o, cfg.xi) for o in obj_terms], cfg.top_k_percent, cfg.scale_weights)
        weights = list(model_weights) if model_weights is not None else []
        regularization = (cfg.reg_lambda * l2_penalty(weights)).to(objectness.dtype) if weights else zero
    else:
        objectness = lrm(obj_terms, 100.0, cfg.scale_weights)
        regularization = zero

    box_gain, obj_gain, cls_gain = gains
    total = box_gain * box + obj_gain * (objectness + regularization) + cls_gain * cls
    return LossBreakdown(
        box_ciou=box,
        objectness=objectness,
        classification=cls,
        regularization=regularization,
        total=total,
        per_scale_objectness=per_scale,
        gains=tuple(gains),
        num_positives=num_positives,
    )


__all__ = [
    "LossBreakdown",
    "LossError",
    "ObjectnessMode",
    "SHEMConfig",
    "ScaleTargets",
    "bfl",
    "build_targets",
    "ciou_loss",
    "focal_loss",
    "focal_loss_with_logits",
    "l2_penalty",
    "lrm",
    "regularized_weights",
    "shem",
    "total_loss",
]
