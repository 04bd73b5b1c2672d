"""
Anchor-based crater detector: focus stem and C3 backbone with a C3TR deepest
stage, FPN + PAN neck, optional shallow-feature attention fusion (ASAF) and a
three- or four-scale head. Also decode/NMS, layer freezing, anchors and checkpoints.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from scipy.cluster.vq import kmeans

from cratertan.core.data_domains import BoundingBox, Detection
from cratertan.model.nam import NAM
from cratertan.utils.validators import ConfigValidator

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "TANCKPT1"
CHECKPOINT_VERSION = 1
ALL_STRIDES = (4, 8, 16, 32)
BACKBONE_GROUPS = 10
MAX_DETECTIONS = 300
MAX_NMS_CANDIDATES = 3000

# Pixel anchors at 640 input, finest scale first
_DEFAULT_ANCHORS_640 = (
    ((5, 6), (8, 14), (15, 11)),
    ((10, 13), (16, 30), (33, 23)),
    ((30, 61), (62, 45), (59, 119)),
    ((116, 90), (156, 198), (373, 326)),
)


class DetectorError(Exception):
    """Exception raised for invalid detector configuration or inputs"""
    pass


class CheckpointError(Exception):
    """Exception raised when a checkpoint cannot be written or restored"""
    pass


def default_anchors(num_scales: int, input_size: int) -> List[List[Tuple[float, float]]]:
    """Standard anchors scaled to ``input_size``, one group per scale"""
    ratio = input_size / 640.0
    groups = _DEFAULT_ANCHORS_640[-num_scales:]
    return [[(w * ratio, h * ratio) for w, h in group] for group in groups]


@dataclass
class DetectorConfig:
    """
    Detector hyper-parameters
    """

    num_classes: int = 1
    base_channels: int = 16
    depth_multiple: float = 0.33
    num_scales: int = 4
    anchors: Optional[List[List[Tuple[float, float]]]] = None
    input_size: int = 640
    asaf_enabled: bool = True
    transformer_heads: int = 4

    def __post_init__(self):
        if self.anchors is not None:
            self.anchors = [[(float(w), float(h)) for w, h in group] for group in self.anchors]
        validation = ConfigValidator.validate_detector(self)
        if not validation["is_valid"]:
            raise DetectorError(f"Invalid detector config: {'; '.join(validation['errors'])}")

    @property
    def strides(self) -> Tuple[int, ...]:
        return ALL_STRIDES[-self.num_scales:]

    def resolved_anchors(self) -> List[List[Tuple[float, float]]]:
        return self.anchors if self.anchors is not None else default_anchors(self.num_scales, self.input_size)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        if self.anchors is not None:
            data["anchors"] = [[list(pair) for pair in group] for group in self.anchors]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DetectorConfig":
        return cls(**data)


@dataclass
class DetectionOutput:
    """
    Raw head output: per scale a N x A x H x W x (5 + num_classes) tensor of
    (tx, ty, tw, th, objectness logit, class logits), plus the geometry to decode it
    """

    grids: List[torch.Tensor]
    strides: Tuple[int, ...]
    anchors: torch.Tensor
    input_size: int

    @property
    def batch_size(self) -> int:
        return int(self.grids[0].shape[0])


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def autopad(k: int, p: Optional[int] = None) -> int:
    return k // 2 if p is None else p


class Conv(nn.Module):
    """Conv2d + BatchNorm + SiLU"""

    def __init__(self, c1: int, c2: int, k: int = 1, s: int = 1, p: Optional[int] = None, act: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(c1, c2, k, s, autopad(k, p), bias=False)
        self.bn = nn.BatchNorm2d(c2, eps=1e-3, momentum=0.03)
        self.act = nn.SiLU() if act else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.bn(self.conv(x)))


class Bottleneck(nn.Module):
    def __init__(self, c1: int, c2: int, shortcut: bool = True, e: float = 0.5):
        super().__init__()
        c_ = int(c2 * e)
        self.cv1 = Conv(c1, c_, 1, 1)
        self.cv2 = Conv(c_, c2, 3, 1)
        self.add = shortcut and c1 == c2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class C3(nn.Module):
    """CSP bottleneck with three convolutions"""

    def __init__(self, c1: int, c2: int, n: int = 1, shortcut: bool = True, e: float = 0.5):
        super().__init__()
        c_ = int(c2 * e)
        self.cv1 = Conv(c1, c_, 1, 1)
        self.cv2 = Conv(c1, c_, 1, 1)
        self.cv3 = Conv(2 * c_, c2, 1)
        self.m = nn.Sequential(*(Bottleneck(c_, c_, shortcut, e=1.0) for _ in range(n)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.cv3(torch.cat((self.m(self.cv1(x)), self.cv2(x)), dim=1))


class TransformerLayer(nn.Module):
    """Multi-head self-attention plus MLP, each with a residual"""

    def __init__(self, c: int, num_heads: int):
        super().__init__()
        self.q = nn.Linear(c, c, bias=False)
        self.k = nn.Linear(c, c, bias=False)
        self.v = nn.Linear(c, c, bias=False)
        self.ma = nn.MultiheadAttention(embed_dim=c, num_heads=num_heads)
        self.fc1 = nn.Linear(c, c, bias=False)
        self.fc2 = nn.Linear(c, c, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.ma(self.q(x), self.k(x), self.v(x), need_weights=False)[0] + x
        return self.fc2(self.fc1(x)) + x


class TransformerBlock(nn.Module):
    def __init__(self, c1: int, c2: int, num_heads: int, num_layers: int):
        super().__init__()
        self.conv = Conv(c1, c2) if c1 != c2 else None
        self.linear = nn.Linear(c2, c2)
        self.tr = nn.Sequential(*(TransformerLayer(c2, num_heads) for _ in range(num_layers)))
        self.c2 = c2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.conv is not None:
            x = self.conv(x)
        b, _, h, w = x.shape
        p = x.flatten(2).permute(2, 0, 1)
        return self.tr(p + self.linear(p)).permute(1, 2, 0).reshape(b, self.c2, h, w)


class C3TR(C3):
    """C3 whose bottleneck series is replaced by one transformer block"""

    def __init__(self, c1: int, c2: int, num_heads: int = 4, shortcut: bool = True, e: float = 0.5):
        super().__init__(c1, c2, 1, shortcut, e)
        c_ = int(c2 * e)
        self.m = TransformerBlock(c_, c_, num_heads, 1)


class Focus(nn.Module):
    """Space-to-depth stem: 2x2 pixel blocks into channels, then a conv"""

    def __init__(self, c1: int, c2: int, k: int = 3):
        super().__init__()
        self.conv = Conv(c1 * 4, c2, k, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(
            torch.cat((x[..., ::2, ::2], x[..., 1::2, ::2], x[..., ::2, 1::2], x[..., 1::2, 1::2]), 1)
        )


class SPPF(nn.Module):
    """Spatial pyramid pooling, fast variant"""

    def __init__(self, c1: int, c2: int, k: int = 5):
        super().__init__()
        c_ = c1 // 2
        self.cv1 = Conv(c1, c_, 1, 1)
        self.cv2 = Conv(c_ * 4, c2, 1, 1)
        self.m = nn.MaxPool2d(kernel_size=k, stride=1, padding=k // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.cv1(x)
        y1 = self.m(x)
        y2 = self.m(y1)
        return self.cv2(torch.cat((x, y1, y2, self.m(y2)), 1))


class ShallowFusion(nn.Module):
    """Concatenate an attention-gated shallow map and project back to the target width"""

    def __init__(self, c_target: int, c_shallow: int):
        super().__init__()
        self.proj = Conv(c_target + c_shallow, c_target, 1, 1)

    def forward(self, target: torch.Tensor, shallow: torch.Tensor) -> torch.Tensor:
        return self.proj(torch.cat((target, shallow), 1))


# ---------------------------------------------------------------------------
# Detector
# ---------------------------------------------------------------------------

class CraterDetector(nn.Module):
    """
    Multi-scale anchor detector. With ``asaf_enabled`` the stride-4/8/16 backbone
    maps pass through NAM blocks, are max-pooled to the stride-8/16/32 levels and
    fused into both the backbone-side and neck-side maps, each neck fusion
    followed by an injected C3.
    """

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        self.strides = config.strides
        self.num_outputs = 5 + config.num_classes
        anchors = config.resolved_anchors()
        self.num_anchors = len(anchors[0])
        self.register_buffer("anchors", torch.tensor(anchors, dtype=torch.float32))
        self.frozen_groups = 0

        c = config.base_channels

        def ch(stride: int) -> int:
            return c * stride // 2

        def depth(n: int) -> int:
            return max(round(n * config.depth_multiple), 1)

        # Backbone: ten layer-groups, outputs at strides 4, 8, 16, 32
        deepest = (
            C3TR(ch(32), ch(32), config.transformer_heads)
            if config.asaf_enabled
            else C3(ch(32), ch(32), depth(3))
        )
        self.backbone = nn.ModuleList([
            Focus(3, ch(2), 3),
            Conv(ch(2), ch(4), 3, 2),
            C3(ch(4), ch(4), depth(3)),
            Conv(ch(4), ch(8), 3, 2),
            C3(ch(8), ch(8), depth(6)),
            Conv(ch(8), ch(16), 3, 2),
            C3(ch(16), ch(16), depth(9)),
            Conv(ch(16), ch(32), 3, 2),
            deepest,
            SPPF(ch(32), ch(32), 5),
        ])
        self._backbone_taps = {2: 4, 4: 8, 6: 16, 9: 32}

        widths = [ch(s) for s in self.strides]
        levels = len(widths)

        # Attention paths: NAM on strides 4/8/16, pooled into strides 8/16/32
        if config.asaf_enabled:
            self.asaf_nam = nn.ModuleList([NAM(ch(s)) for s in (4, 8, 16)])
            self.asaf_pool = nn.MaxPool2d(kernel_size=2, stride=2)
            self.asaf_backbone_fuse = nn.ModuleList(
                [ShallowFusion(ch(s), ch(s // 2)) for s in (8, 16, 32)]
            )
            self.asaf_neck_fuse = nn.ModuleList(
                [ShallowFusion(ch(s), ch(s // 2)) for s in (8, 16, 32)]
            )
            self.asaf_neck_c3 = nn.ModuleList(
                [C3(ch(s), ch(s), depth(3), shortcut=False) for s in (8, 16, 32)]
            )

        # Top-down FPN, deepest level first
        self.lateral = nn.ModuleList()
        self.td_c3 = nn.ModuleList()
        for i in range(levels - 1, 0, -1):
            self.lateral.append(Conv(widths[i], widths[i - 1], 1, 1))
            self.td_c3.append(C3(2 * widths[i - 1], widths[i - 1], depth(3), shortcut=False))
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")

        # Bottom-up PAN, finest level first
        self.down = nn.ModuleList()
        self.bu_c3 = nn.ModuleList()
        for i in range(1, levels):
            self.down.append(Conv(widths[i - 1], widths[i - 1], 3, 2))
            self.bu_c3.append(C3(2 * widths[i - 1], widths[i], depth(3), shortcut=False))

        self.head = nn.ModuleList(
            [nn.Conv2d(w, self.num_anchors * self.num_outputs, 1) for w in widths]
        )
        self._initialize_weights()

    def _initialize_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.SiLU):
                m.inplace = True
        for conv in self.head:
            nn.init.normal_(conv.weight, mean=0.0, std=0.01)
            nn.init.zeros_(conv.bias)

    # -- layer groups -------------------------------------------------------

    def layer_groups(self) -> List[Tuple[str, nn.Module]]:
        """Freezable layer-groups in construction order"""
        groups = [(f"backbone.{i}", m) for i, m in enumerate(self.backbone)]
        if self.config.asaf_enabled:
            groups += [(f"asaf_nam.{i}", m) for i, m in enumerate(self.asaf_nam)]
            groups += [(f"asaf_backbone_fuse.{i}", m) for i, m in enumerate(self.asaf_backbone_fuse)]
            groups += [(f"asaf_neck_fuse.{i}", m) for i, m in enumerate(self.asaf_neck_fuse)]
            groups += [(f"asaf_neck_c3.{i}", m) for i, m in enumerate(self.asaf_neck_c3)]
        for name in ("lateral", "td_c3", "down", "bu_c3", "head"):
            groups += [(f"{name}.{i}", m) for i, m in enumerate(getattr(self, name))]
        return groups

    def train(self, mode: bool = True) -> "CraterDetector":
        super().train(mode)
        # Frozen groups keep their batch-norm statistics fixed
        for _, module in self.layer_groups()[:self.frozen_groups]:
            module.eval()
        return self

    # -- forward ------------------------------------------------------------

    def forward(self, x: torch.Tensor) -> DetectionOutput:
        size = self.config.input_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
            raise DetectorError(
                f"Expected input N x 3 x {size} x {size}, got {tuple(x.shape)}"
            )

        taps: Dict[int, torch.Tensor] = {}
        for index, layer in enumerate(self.backbone):
            x = layer(x)
            if index in self._backbone_taps:
                taps[self._backbone_taps[index]] = x

        shallow: Dict[int, torch.Tensor] = {}
        if self.config.asaf_enabled:
            for nam_block, stride in zip(self.asaf_nam, (4, 8, 16)):
                shallow[stride * 2] = self.asaf_pool(nam_block(taps[stride]))
            for fuse, stride in zip(self.asaf_backbone_fuse, (8, 16, 32)):
                taps[stride] = fuse(taps[stride], shallow[stride])

        features = [taps[s] for s in self.strides]
        levels = len(features)

        # Top-down
        x = features[-1]
        laterals: Dict[int, torch.Tensor] = {}
        for j, i in enumerate(range(levels - 1, 0, -1)):
            lateral = self.lateral[j](x)
            laterals[i] = lateral
            x = self.td_c3[j](torch.cat((self.upsample(lateral), features[i - 1]), 1))

        # Bottom-up
        outputs = [x]
        for i in range(1, levels):
            y = self.bu_c3[i - 1](torch.cat((self.down[i - 1](outputs[-1]), laterals[i]), 1))
            stride = self.strides[i]
            if self.config.asaf_enabled and stride in shallow:
                k = (8, 16, 32).index(stride)
                y = self.asaf_neck_c3[k](self.asaf_neck_fuse[k](y, shallow[stride]))
            outputs.append(y)

        grids = []
        for conv, feature in zip(self.head, outputs):
            n, _, h, w = feature.shape
            grids.append(
                conv(feature)
                .view(n, self.num_anchors, self.num_outputs, h, w)
                .permute(0, 1, 3, 4, 2)
                .contiguous()
            )
        return DetectionOutput(grids, self.strides, self.anchors, size)


def build_model(config: DetectorConfig) -> CraterDetector:
    """
    Construct the detector graph for ``config``

    Args:
        config: Detector configuration

    Returns:
        A freshly initialised CraterDetector
    """
    model = CraterDetector(config)
    logger.debug(
        f"Built detector: scales={config.strides}, asaf={config.asaf_enabled}, "
        f"params={count_parameters(model):,}"
    )
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def count_nam_modules(model: nn.Module) -> int:
    """Number of NAM blocks in the graph"""
    return sum(isinstance(m, NAM) for m in model.modules())


def freeze_layers(model: CraterDetector, n: int) -> CraterDetector:
    """
    Exclude the first ``n`` layer-groups from gradient updates

    Frozen groups also stay in eval mode so their batch-norm buffers do not move.

    Args:
        model: Detector
        n: Number of leading layer-groups to freeze

    Returns:
        The same model
    """
    groups = model.layer_groups()
    if not 0 <= n <= len(groups):
        raise DetectorError(f"freeze count must be in [0, {len(groups)}]: {n}")
    for index, (_, module) in enumerate(groups):
        for param in module.parameters():
            param.requires_grad_(index >= n)
    model.frozen_groups = n
    model.train(model.training)
    logger.debug(f"Froze {n}/{len(groups)} layer-groups")
    return model


# ---------------------------------------------------------------------------
# Decode and NMS
# ---------------------------------------------------------------------------

def decode(out: DetectionOutput) -> torch.Tensor:
    """
    Anchor decode of every grid cell

    Returns:
        N x M x 6 tensor of (x1, y1, x2, y2, confidence, class) in input pixels,
        ordered by (scale, anchor, row, column)
    """
    rows = []
    for grid, stride, anchors in zip(out.grids, out.strides, out.anchors):
        n, a, h, w, k = grid.shape
        p = grid.detach().float()
        gy, gx = torch.meshgrid(
            torch.arange(h, device=p.device), torch.arange(w, device=p.device), indexing="ij"
        )
        cell = torch.stack((gx, gy), -1).view(1, 1, h, w, 2).float()
        xy = (p[..., 0:2].sigmoid() * 2.0 - 0.5 + cell) * stride
        wh = anchors.view(1, a, 1, 1, 2).to(p) * torch.exp(p[..., 2:4].clamp(-4.0, 4.0))
        conf, cls = (p[..., 4:5].sigmoid() * p[..., 5:].sigmoid()).max(-1)
        boxes = torch.cat((xy - wh / 2, xy + wh / 2, conf.unsqueeze(-1), cls.unsqueeze(-1).float()), -1)
        rows.append(boxes.view(n, -1, 6))
    return torch.cat(rows, 1)


def _box_iou(box: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    iw = (torch.min(box[2], boxes[:, 2]) - torch.max(box[0], boxes[:, 0])).clamp(min=0)
    ih = (torch.min(box[3], boxes[:, 3]) - torch.max(box[1], boxes[:, 1])).clamp(min=0)
    inter = iw * ih
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    union = area + areas - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(union))


def greedy_nms(
    boxes: torch.Tensor, scores: torch.Tensor, iou_thresh: float, max_keep: Optional[int] = None
) -> List[int]:
    """
    Greedy confidence-descending NMS; equal scores keep their input order

    Args:
        boxes: M x 4 xyxy
        scores: M scores
        iou_thresh: A box is suppressed when its IoU with a kept box exceeds this
        max_keep: Stop after this many kept boxes

    Returns:
        Indices of kept boxes in descending score order
    """
    order = torch.sort(scores, descending=True, stable=True).indices
    suppressed = torch.zeros(len(order), dtype=torch.bool)
    keep: List[int] = []
    sorted_boxes = boxes[order]
    for rank in range(len(order)):
        if suppressed[rank]:
            continue
        keep.append(int(order[rank]))
        if max_keep is not None and len(keep) >= max_keep:
            break
        if rank + 1 < len(order):
            overlaps = _box_iou(sorted_boxes[rank], sorted_boxes[rank + 1:])
            suppressed[rank + 1:] |= (overlaps > iou_thresh).cpu()
    return keep


def decode_and_nms(
    out: DetectionOutput,
    conf_thresh: float,
    nms_iou: float,
    max_detections: int = MAX_DETECTIONS,
) -> List[List[Detection]]:
    """
    Decode raw output and run per-class greedy NMS

    Args:
        out: Raw detector output
        conf_thresh: Minimum confidence, in [0, 1]
        nms_iou: NMS overlap threshold, in [0, 1]
        max_detections: Cap on detections per image

    Returns:
        One list of Detections per image, boxes normalized to the input frame
    """
    if not (0.0 <= conf_thresh <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise DetectorError(f"Thresholds must lie in [0, 1]: conf={conf_thresh}, nms={nms_iou}")
    if conf_thresh >= 1.0:
        return [[] for _ in range(out.batch_size)]

    decoded = decode(out).cpu()
    size = float(out.input_size)
    results = []
    for rows in decoded:
        rows = rows[rows[:, 4] >= conf_thresh]
        if len(rows) > MAX_NMS_CANDIDATES:
            top = torch.sort(rows[:, 4], descending=True, stable=True).indices[:MAX_NMS_CANDIDATES]
            rows = rows[torch.sort(top).values]
        # Offset boxes by class so NMS never mixes classes
        offsets = rows[:, 5:6] * (size * 4)
        keep = greedy_nms(rows[:, :4] + offsets, rows[:, 4], nms_iou, max_detections)

        detections = []
        for index in keep:
            x1, y1, x2, y2, conf, cls = rows[index].tolist()
            box = BoundingBox.from_xyxy(x1 / size, y1 / size, x2 / size, y2 / size, int(cls))
            if box is not None:
                detections.append(Detection(box, min(max(conf, 0.0), 1.0)))
        results.append(detections)
    return results


# ---------------------------------------------------------------------------
# Anchors
# ---------------------------------------------------------------------------

def anchors_from_boxes(
    boxes: Sequence[BoundingBox],
    input_size: int,
    num_scales: int,
    per_scale: int = 3,
    seed: int = 0,
) -> List[List[Tuple[float, float]]]:
    """
    k-means anchors over training box sizes, sorted by area and split finest scale first

    Args:
        boxes: Normalized training boxes (already in the letterboxed frame)
        input_size: Network input side in pixels
        num_scales: Number of detection scales
        per_scale: Anchors per scale
        seed: Seed of the initial centroid draw

    Returns:
        Pixel anchors, one group per scale; the defaults when there are too few boxes
    """
    k = num_scales * per_scale
    wh = np.array([(b.w * input_size, b.h * input_size) for b in boxes], dtype=np.float64)
    unique = np.unique(wh, axis=0) if len(wh) else wh
    if len(unique) < k:
        logger.warning(f"Only {len(unique)} distinct box sizes for {k} anchors, using defaults")
        return default_anchors(num_scales, input_size)

    scale = wh.std(0)
    scale[scale == 0] = 1.0
    rng = np.random.default_rng(seed)
    guess = unique[rng.choice(len(unique), k, replace=False)] / scale
    centroids, distortion = kmeans(wh / scale, guess, iter=30)
    if len(centroids) < k:
        logger.warning(f"k-means kept {len(centroids)} of {k} anchors, using defaults")
        return default_anchors(num_scales, input_size)

    centroids = centroids * scale
    centroids = centroids[np.argsort(centroids.prod(1), kind="stable")]
    logger.debug(f"k-means anchors (distortion {distortion:.4f}): {np.round(centroids, 1).tolist()}")
    return [
        [(float(w), float(h)) for w, h in centroids[i * per_scale:(i + 1) * per_scale]]
        for i in range(num_scales)
    ]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    model: CraterDetector, path: Union[str, Path], meta: Optional[Dict[str, Any]] = None
) -> Path:
    """
    Write a self-describing checkpoint (magic, version, config echo, tensors, metadata)

    Args:
        model: Detector to save
        path: Destination file
        meta: Extra JSON-compatible metadata (epoch, metrics, seed, ...)

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "meta": meta or {},
    }
    try:
        torch.save(payload, path)
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {path}: {e}")
    return path


def load_checkpoint(
    path: Union[str, Path], map_location: Union[str, torch.device] = "cpu"
) -> Tuple[CraterDetector, Dict[str, Any]]:
    """
    Restore a detector written by ``save_checkpoint``

    Args:
        path: Checkpoint file
        map_location: Device for the tensors

    Returns:
        (model in eval mode, metadata)
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Failed to read checkpoint {path}: {e}")

    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a crater detector checkpoint (bad magic)")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version: {payload.get('version')}")

    try:
        model = build_model(DetectorConfig.from_dict(payload["config"]))
        model.load_state_dict(payload["state_dict"])
    except (DetectorError, RuntimeError, TypeError) as e:
        raise CheckpointError(f"Checkpoint {path} does not match its config: {e}")
    model.to(map_location)
    model.eval()
    return model, payload.get("meta", {})


def model_summary(model: CraterDetector) -> Dict[str, Any]:
    """
    Structural summary: parameter count, NAM blocks, layer-groups and grid shapes

    Args:
        model: Detector

    Returns:
        Summary dictionary
    """
    size = model.config.input_size
    return {
        "parameters": count_parameters(model),
        "trainable_parameters": sum(p.numel() for p in model.parameters() if p.requires_grad),
        "nam_modules": count_nam_modules(model),
        "layer_groups": len(model.layer_groups()),
        "frozen_groups": model.frozen_groups,
        "strides": list(model.strides),
        "grid_sizes": [size // s for s in model.strides],
        "anchors": model.anchors.tolist(),
        "asaf_enabled": model.config.asaf_enabled,
        "input_size": size,
    }


__all__ = [
    "C3",
    "C3TR",
    "CheckpointError",
    "Conv",
    "CraterDetector",
    "DetectionOutput",
    "DetectorConfig",
    "DetectorError",
    "Focus",
    "SPPF",
    "anchors_from_boxes",
    "build_model",
    "count_nam_modules",
    "count_parameters",
    "decode",
    "decode_and_nms",
    "default_anchors",
    "freeze_layers",
    "greedy_nms",
    "load_checkpoint",
    "model_summary",
    "save_checkpoint",
]
