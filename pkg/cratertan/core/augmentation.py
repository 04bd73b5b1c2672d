"""
Box-consistent geometric augmentation with a weak policy (flip, stitch) and a
strong policy (mosaic, random affine), selected by source-domain complexity
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from cratertan.core.data_domains import (
    PAD_VALUE,
    BoundingBox,
    Complexity,
    LabeledImage,
    letterbox_resize,
)
from cratertan.utils.validators import ConfigValidator

logger = logging.getLogger(__name__)


class AugKind(str, Enum):
    """Augmentation policy family"""
    WEAK = "weak"
    STRONG = "strong"


@dataclass(frozen=True)
class AffineParams:
    """Ranges of the random affine transform"""

    max_rotate_deg: float = 0.0
    scale_range: Tuple[float, float] = (1.0, 1.0)
    translate_frac: float = 0.0
    shear_deg: float = 0.0

    @property
    def is_identity(self) -> bool:
        return (
            self.max_rotate_deg == 0.0
            and tuple(self.scale_range) == (1.0, 1.0)
            and self.translate_frac == 0.0
            and self.shear_deg == 0.0
        )


@dataclass(frozen=True)
class AugPolicy:
    """
    Augmentation policy. Probabilities are per image.
    """

    kind: AugKind
    flip_prob: float = 0.5
    affine: AffineParams = field(default_factory=AffineParams)
    mosaic_prob: float = 0.0
    stitch_prob: float = 0.0
    min_box_area_frac: float = 0.0004

    def __post_init__(self):
        object.__setattr__(self, "kind", AugKind(getattr(self.kind, "value", self.kind)))
        validation = ConfigValidator.validate_aug_policy(self)
        if not validation["is_valid"]:
            raise ValueError(f"Invalid augmentation policy: {'; '.join(validation['errors'])}")


WEAK_POLICY = AugPolicy(kind=AugKind.WEAK, flip_prob=0.5, stitch_prob=0.25)

STRONG_POLICY = AugPolicy(
    kind=AugKind.STRONG,
    flip_prob=0.5,
    mosaic_prob=1.0,
    affine=AffineParams(
        max_rotate_deg=10.0, scale_range=(0.5, 1.5), translate_frac=0.1, shear_deg=2.0
    ),
)


def select_policy(
    source_complexity: Union[Complexity, str],
    weak: AugPolicy = WEAK_POLICY,
    strong: AugPolicy = STRONG_POLICY,
) -> AugPolicy:
    """
    Pick the augmentation policy for a source domain

    A complex source already spans the target's variety and only needs minor
    augmentation; a simple source is widened with strong augmentation.

    Args:
        source_complexity: "simple" or "complex"
        weak: Policy returned for complex sources
        strong: Policy returned for simple sources

    Returns:
        The selected AugPolicy
    """
    complexity = Complexity(getattr(source_complexity, "value", source_complexity))
    return weak if complexity == Complexity.COMPLEX else strong


# ---------------------------------------------------------------------------
# Primitive transforms
# ---------------------------------------------------------------------------

def _match_channels(pixels: np.ndarray, channels: int) -> np.ndarray:
    if pixels.shape[2] == channels:
        return pixels
    if channels == 3:
        return np.repeat(pixels, 3, axis=2)
    return cv2.cvtColor(pixels, cv2.COLOR_RGB2GRAY)[:, :, None]


def _fit(image: LabeledImage, height: int, width: int, channels: int) -> LabeledImage:
    """Stretch to height x width; normalized boxes are invariant under this resize"""
    pixels = _match_channels(image.pixels, channels)
    if pixels.shape[:2] != (height, width):
        pixels = cv2.resize(pixels, (width, height), interpolation=cv2.INTER_LINEAR)
        pixels = pixels.reshape(height, width, channels)
    return LabeledImage(pixels, list(image.boxes), image.source_id)


def _filter_boxes(boxes: Sequence[BoundingBox], min_area_frac: float) -> List[BoundingBox]:
    return [b for b in boxes if b.area >= min_area_frac]


def hflip(image: LabeledImage) -> LabeledImage:
    """Horizontal mirror"""
    pixels = np.ascontiguousarray(image.pixels[:, ::-1])
    boxes = [BoundingBox(b.class_id, 1.0 - b.cx, b.cy, b.w, b.h) for b in image.boxes]
    return LabeledImage(pixels, boxes, image.source_id)


def stitch_2x2(images: Sequence[LabeledImage], min_box_area_frac: float = 0.0) -> LabeledImage:
    """
    Scale-preserving 2x2 grid of four images (top-left, top-right, bottom-left, bottom-right)

    Partners are resized to the first image's size; the output is 2H x 2W and
    every box keeps its pixel size, so normalized w and h are halved.

    Args:
        images: Exactly four images
        min_box_area_frac: Drop boxes whose normalized area falls below this

    Returns:
        Stitched image carrying the first image's source id
    """
    if len(images) != 4:
        raise ValueError(f"stitch_2x2 needs exactly 4 images, got {len(images)}")
    first = images[0]
    h, w, c = first.pixels.shape
    tiles = [_fit(img, h, w, c) for img in images]

    canvas = np.empty((2 * h, 2 * w, c), dtype=np.uint8)
    boxes = []
    for index, tile in enumerate(tiles):
        row, col = divmod(index, 2)
        canvas[row * h:(row + 1) * h, col * w:(col + 1) * w] = tile.pixels
        for b in tile.boxes:
            boxes.append(
                BoundingBox(b.class_id, (b.cx + col) / 2, (b.cy + row) / 2, b.w / 2, b.h / 2)
            )
    return LabeledImage(canvas, _filter_boxes(boxes, min_box_area_frac), first.source_id)


def mosaic(
    images: Sequence[LabeledImage], center: Tuple[float, float], size: Optional[int] = None
) -> LabeledImage:
    """
    Composite four images around ``center`` on a 2S x 2S canvas

    Each image is letterboxed to S x S first. A center of (S, S) reproduces the
    2x2 stitch exactly.

    Args:
        images: Exactly four images, placed top-left, top-right, bottom-left, bottom-right
        center: Mosaic center (xc, yc) in canvas pixels, within [0, 2S]
        size: Tile side S, defaults to the first image's longer side

    Returns:
        Canvas with boxes in canvas coordinates, clipped
    """
    if len(images) != 4:
        raise ValueError(f"mosaic needs exactly 4 images, got {len(images)}")
    s = size or max(images[0].height, images[0].width)
    c = images[0].pixels.shape[2]
    xc, yc = int(round(center[0])), int(round(center[1]))
    if not (0 <= xc <= 2 * s and 0 <= yc <= 2 * s):
        raise ValueError(f"mosaic center {center} outside canvas of side {2 * s}")

    canvas = np.full((2 * s, 2 * s, c), PAD_VALUE, dtype=np.uint8)
    boxes = []
    for index, source in enumerate(images):
        tile = letterbox_resize(source, s)
        pixels = _match_channels(tile.pixels, c)
        if index == 0:
            x1a, y1a, x2a, y2a = max(xc - s, 0), max(yc - s, 0), xc, yc
            x1b, y1b, x2b, y2b = s - (x2a - x1a), s - (y2a - y1a), s, s
        elif index == 1:
            x1a, y1a, x2a, y2a = xc, max(yc - s, 0), min(xc + s, 2 * s), yc
            x1b, y1b, x2b, y2b = 0, s - (y2a - y1a), min(s, x2a - x1a), s
        elif index == 2:
            x1a, y1a, x2a, y2a = max(xc - s, 0), yc, xc, min(2 * s, yc + s)
            x1b, y1b, x2b, y2b = s - (x2a - x1a), 0, s, min(y2a - y1a, s)
        else:
            x1a, y1a, x2a, y2a = xc, yc, min(xc + s, 2 * s), min(2 * s, yc + s)
            x1b, y1b, x2b, y2b = 0, 0, min(s, x2a - x1a), min(y2a - y1a, s)

        if x2a > x1a and y2a > y1a:
            canvas[y1a:y2a, x1a:x2a] = pixels[y1b:y2b, x1b:x2b]
        padw, padh = x1a - x1b, y1a - y1b

        for b in tile.boxes:
            x1, y1, x2, y2 = (v * s for v in b.to_xyxy())
            # Clip to the visible tile window, then to the canvas
            x1, x2 = max(x1 + padw, x1a), min(x2 + padw, x2a)
            y1, y2 = max(y1 + padh, y1a), min(y2 + padh, y2a)
            box = BoundingBox.from_xyxy(
                x1 / (2 * s), y1 / (2 * s), x2 / (2 * s), y2 / (2 * s), b.class_id
            )
            if box is not None:
                boxes.append(box)

    return LabeledImage(canvas, boxes, images[0].source_id)


def affine_matrix(
    in_size: Tuple[int, int],
    out_size: Tuple[int, int],
    rotate_deg: float = 0.0,
    scale: float = 1.0,
    shear_deg: Tuple[float, float] = (0.0, 0.0),
    translate_frac: Tuple[float, float] = (0.0, 0.0),
) -> np.ndarray:
    """
    3x3 affine: center the input, rotate/scale, shear, then place at the output
    center offset by ``translate_frac`` of the output size

    Args:
        in_size: Input (width, height)
        out_size: Output (width, height)
        rotate_deg: Counter-clockwise rotation in degrees
        scale: Isotropic scale
        shear_deg: (x, y) shear angles in degrees
        translate_frac: (x, y) offset as a fraction of output width/height

    Returns:
        3x3 float64 matrix mapping input pixels to output pixels
    """
    center = np.eye(3)
    center[0, 2] = -in_size[0] / 2
    center[1, 2] = -in_size[1] / 2

    rotation = np.eye(3)
    rotation[:2] = cv2.getRotationMatrix2D(angle=rotate_deg, center=(0, 0), scale=scale)

    shear = np.eye(3)
    shear[0, 1] = math.tan(math.radians(shear_deg[0]))
    shear[1, 0] = math.tan(math.radians(shear_deg[1]))

    translation = np.eye(3)
    translation[0, 2] = (0.5 + translate_frac[0]) * out_size[0]
    translation[1, 2] = (0.5 + translate_frac[1]) * out_size[1]

    return translation @ shear @ rotation @ center


def sample_affine(
    rng: np.random.Generator,
    params: AffineParams,
    in_size: Tuple[int, int],
    out_size: Tuple[int, int],
) -> np.ndarray:
    """Draw a random affine matrix within ``params``"""
    rotate = rng.uniform(-params.max_rotate_deg, params.max_rotate_deg)
    scale = rng.uniform(*params.scale_range)
    shear = (
        rng.uniform(-params.shear_deg, params.shear_deg),
        rng.uniform(-params.shear_deg, params.shear_deg),
    )
    translate = (
        rng.uniform(-params.translate_frac, params.translate_frac),
        rng.uniform(-params.translate_frac, params.translate_frac),
    )
    return affine_matrix(in_size, out_size, rotate, scale, shear, translate)


def warp_affine(
    image: LabeledImage,
    matrix: np.ndarray,
    out_size: Tuple[int, int],
    min_box_area_frac: float = 0.0,
) -> LabeledImage:
    """
    Apply an affine matrix to pixels and boxes

    Boxes are the axis-aligned hull of their four transformed corners, clipped
    to the output and area-filtered.

    Args:
        image: Source image
        matrix: 3x3 matrix from ``affine_matrix``
        out_size: Output (width, height)
        min_box_area_frac: Drop boxes whose normalized area falls below this

    Returns:
        Warped image
    """
    out_w, out_h = out_size
    c = image.pixels.shape[2]
    if (out_w, out_h) == (image.width, image.height) and np.allclose(matrix, np.eye(3)):
        return LabeledImage(image.pixels.copy(), list(image.boxes), image.source_id)

    pixels = cv2.warpAffine(
        image.pixels, matrix[:2], dsize=(out_w, out_h), borderValue=(PAD_VALUE,) * 3
    ).reshape(out_h, out_w, c)

    boxes = []
    if image.boxes:
        xyxy = np.array([b.to_xyxy() for b in image.boxes], dtype=np.float64)
        xyxy[:, [0, 2]] *= image.width
        xyxy[:, [1, 3]] *= image.height
        corners = np.ones((len(xyxy) * 4, 3))
        corners[:, :2] = xyxy[:, [0, 1, 2, 3, 0, 3, 2, 1]].reshape(-1, 2)
        corners = (corners @ matrix.T)[:, :2].reshape(-1, 8)
        xs, ys = corners[:, [0, 2, 4, 6]], corners[:, [1, 3, 5, 7]]
        for b, x1, y1, x2, y2 in zip(image.boxes, xs.min(1), ys.min(1), xs.max(1), ys.max(1)):
            box = BoundingBox.from_xyxy(x1 / out_w, y1 / out_h, x2 / out_w, y2 / out_h, b.class_id)
            if box is not None:
                boxes.append(box)

    return LabeledImage(pixels, _filter_boxes(boxes, min_box_area_frac), image.source_id)


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

def _partners(
    image: LabeledImage, pool: Optional[Sequence[LabeledImage]], rng: np.random.Generator
) -> List[LabeledImage]:
    """Three partners from the same split; the image itself when no pool is given"""
    if not pool:
        return [image, image, image]
    picks = rng.integers(0, len(pool), size=3)
    return [pool[int(i)] for i in picks]


def apply_weak(
    image: LabeledImage,
    rng: np.random.Generator,
    policy: AugPolicy = WEAK_POLICY,
    pool: Optional[Sequence[LabeledImage]] = None,
) -> LabeledImage:
    """
    Weak augmentation: horizontal flip, then an optional 2x2 stitch

    Args:
        image: Source image
        rng: Seeded generator; draws happen in a fixed order
        policy: Weak policy
        pool: Same-split images to draw stitch partners from

    Returns:
        Augmented image
    """
    out = image
    if rng.random() < policy.flip_prob:
        out = hflip(out)
    if rng.random() < policy.stitch_prob:
        out = stitch_2x2([out] + _partners(image, pool, rng), policy.min_box_area_frac)
    return out


def apply_strong(
    image: LabeledImage,
    rng: np.random.Generator,
    policy: AugPolicy = STRONG_POLICY,
    pool: Optional[Sequence[LabeledImage]] = None,
) -> LabeledImage:
    """
    Strong augmentation: optional mosaic, random affine, horizontal flip

    Output keeps the input's side S. With mosaic, the 2S x 2S composite is
    warped back down to S x S around its center.

    Args:
        image: Source image
        rng: Seeded generator; draws happen in a fixed order
        policy: Strong policy
        pool: Same-split images to draw mosaic partners from

    Returns:
        Augmented image
    """
    s = max(image.height, image.width)
    out = image
    if rng.random() < policy.mosaic_prob:
        center = (rng.uniform(0.5 * s, 1.5 * s), rng.uniform(0.5 * s, 1.5 * s))
        out = mosaic([image] + _partners(image, pool, rng), center, size=s)
        out_size = (s, s)
    else:
        out_size = (image.width, image.height)

    if out is not image or not policy.affine.is_identity:
        matrix = sample_affine(rng, policy.affine, (out.width, out.height), out_size)
        out = warp_affine(out, matrix, out_size, policy.min_box_area_frac)

    if rng.random() < policy.flip_prob:
        out = hflip(out)
    return out


def augment(
    image: LabeledImage,
    rng: np.random.Generator,
    policy: AugPolicy,
    pool: Optional[Sequence[LabeledImage]] = None,
) -> LabeledImage:
    """Dispatch to the weak or strong pipeline by ``policy.kind``"""
    if policy.kind == AugKind.WEAK:
        return apply_weak(image, rng, policy, pool)
    return apply_strong(image, rng, policy, pool)


__all__ = [
    "AffineParams",
    "AugKind",
    "AugPolicy",
    "STRONG_POLICY",
    "WEAK_POLICY",
    "affine_matrix",
    "apply_strong",
    "apply_weak",
    "augment",
    "hflip",
    "mosaic",
    "sample_affine",
    "select_policy",
    "stitch_2x2",
    "warp_affine",
]
