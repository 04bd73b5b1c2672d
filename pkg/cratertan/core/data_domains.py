"""
Crater dataset ingestion, synthetic two-domain generation, splitting and letterboxing
"""

import json
import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from cratertan.utils.validators import BoxValidator, ConfigValidator

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
PAD_VALUE = 114
MAX_GT_OVERLAP_IOU = 0.5
_MAX_PLACEMENT_ATTEMPTS = 200


class DatasetError(Exception):
    """Exception raised for dataset loading and generation errors"""
    pass


class LabelFormatError(DatasetError):
    """Exception raised for a malformed label line"""
    pass


class LabelLeakageError(DatasetError):
    """Exception raised when a guarded (unlabelled) domain's labels are read"""
    pass


class Complexity(str, Enum):
    """Scene complexity of a crater domain"""
    SIMPLE = "simple"
    COMPLEX = "complex"


@dataclass(frozen=True)
class BoundingBox:
    """
    Normalized center-format box. Coordinates are fractions of image size.
    """

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        check = BoxValidator.validate_box(self.cx, self.cy, self.w, self.h)
        if not check["is_valid"]:
            raise ValueError(f"Invalid bounding box: {'; '.join(check['errors'])}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_xyxy(self) -> Tuple[float, float, float, float]:
        """Corner coordinates (x1, y1, x2, y2), still normalized"""
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    @classmethod
    def from_xyxy(
        cls, x1: float, y1: float, x2: float, y2: float, class_id: int = 0
    ) -> Optional["BoundingBox"]:
        """
        Build a box from normalized corners, clipping to the image

        Args:
            x1, y1, x2, y2: Normalized corner coordinates
            class_id: Class index

        Returns:
            The clipped box, or None when clipping leaves no extent
        """
        x1, x2 = min(max(x1, 0.0), 1.0), min(max(x2, 0.0), 1.0)
        y1, y2 = min(max(y1, 0.0), 1.0), min(max(y2, 0.0), 1.0)
        w, h = x2 - x1, y2 - y1
        if w <= 0.0 or h <= 0.0:
            return None
        return cls(class_id, (x1 + x2) / 2, (y1 + y2) / 2, w, h)


@dataclass(frozen=True)
class Detection:
    """A scored box produced by the detector"""

    box: BoundingBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1]: {self.confidence}")

    @property
    def class_id(self) -> int:
        return self.box.class_id


@dataclass
class LabeledImage:
    """
    Pixels (H x W x 1|3, uint8) plus normalized boxes
    """

    pixels: np.ndarray
    boxes: List[BoundingBox] = field(default_factory=list)
    source_id: str = ""

    def __post_init__(self):
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise ValueError(f"pixels must be H x W x 1|3, got shape {self.pixels.shape}")
        if self.pixels.shape[0] == 0 or self.pixels.shape[1] == 0:
            raise ValueError("image has zero height or width")
        if self.pixels.dtype != np.uint8:
            self.pixels = np.clip(self.pixels, 0, 255).astype(np.uint8)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def without_labels(self) -> "LabeledImage":
        """Copy of this image with the box list withheld"""
        return LabeledImage(self.pixels, [], self.source_id)


class DomainProfile:
    """
    Parameters of a synthetic crater domain
    """

    def __init__(
        self,
        name: str,
        crater_count_range: Tuple[int, int],
        radius_range: Tuple[float, float],
        background_noise_level: float,
        weathering_artifacts: bool,
        complexity: Union[Complexity, str],
    ):
        """
        Initialize a domain profile

        Args:
            name: Profile name, used as image id prefix
            crater_count_range: Inclusive crater count interval per image
            radius_range: Crater radius interval as a fraction of image size
            background_noise_level: Noise strength in [0, 1]
            weathering_artifacts: Render low-frequency multiplicative weathering
            complexity: "simple" or "complex"
        """
        self.name = name
        self.crater_count_range = (int(crater_count_range[0]), int(crater_count_range[1]))
        self.radius_range = (float(radius_range[0]), float(radius_range[1]))
        self.background_noise_level = float(background_noise_level)
        self.weathering_artifacts = bool(weathering_artifacts)
        self.complexity = complexity

        validation = ConfigValidator.validate_profile(self)
        if not validation["is_valid"]:
            raise DatasetError(f"Invalid domain profile '{name}': {'; '.join(validation['errors'])}")
        self.complexity = Complexity(getattr(complexity, "value", complexity))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "crater_count_range": list(self.crater_count_range),
            "radius_range": list(self.radius_range),
            "background_noise_level": self.background_noise_level,
            "weathering_artifacts": self.weathering_artifacts,
            "complexity": self.complexity.value,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DomainProfile":
        return cls(
            name=data.get("name", "custom"),
            crater_count_range=tuple(data["crater_count_range"]),
            radius_range=tuple(data["radius_range"]),
            background_noise_level=data["background_noise_level"],
            weathering_artifacts=data.get("weathering_artifacts", False),
            complexity=data["complexity"],
        )

    def __eq__(self, other: object) -> bool:
        return isinstance(other, DomainProfile) and self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return (
            f"DomainProfile(name='{self.name}', craters={self.crater_count_range}, "
            f"radius={self.radius_range}, complexity='{self.complexity.value}')"
        )


# Many small craters on a quiet background vs fewer, larger craters under heavy weathering
LUNAR_PROFILE = DomainProfile(
    name="lunar",
    crater_count_range=(8, 20),
    radius_range=(0.015, 0.05),
    background_noise_level=0.1,
    weathering_artifacts=False,
    complexity=Complexity.SIMPLE,
)

MARS_PROFILE = DomainProfile(
    name="mars",
    crater_count_range=(2, 7),
    radius_range=(0.04, 0.14),
    background_noise_level=0.45,
    weathering_artifacts=True,
    complexity=Complexity.COMPLEX,
)

PROFILES = {"lunar": LUNAR_PROFILE, "mars": MARS_PROFILE}


def get_profile(name_or_profile: Union[str, Dict[str, Any], DomainProfile]) -> DomainProfile:
    """
    Resolve a built-in profile name or inline profile mapping

    Args:
        name_or_profile: Profile name ("lunar" / "mars"), mapping, or DomainProfile

    Returns:
        DomainProfile instance
    """
    if isinstance(name_or_profile, DomainProfile):
        return name_or_profile
    if isinstance(name_or_profile, dict):
        return DomainProfile.from_dict(name_or_profile)
    try:
        return PROFILES[name_or_profile.lower()]
    except KeyError:
        raise DatasetError(
            f"Unknown domain profile: {name_or_profile}. Built-in profiles: {', '.join(PROFILES)}"
        )


@dataclass
class DatasetSplit:
    """Train/validation partition of a dataset"""

    train: List[LabeledImage]
    val: List[LabeledImage]
    ratio: float


# ---------------------------------------------------------------------------
# Label files
# ---------------------------------------------------------------------------

class LabelGuard:
    """
    Directories whose label files must not be read. Each owner (one CraterTAN
    run) keeps its own instance and hands it to the loaders explicitly.
    """

    def __init__(self):
        self._roots: List[Path] = []
        self._lock = threading.Lock()

    @contextmanager
    def protect(self, root: Union[str, Path]) -> Iterator[None]:
        """
        Forbid label reads below ``root`` for the duration of the block

        Args:
            root: Directory of an unlabelled domain
        """
        resolved = Path(root).resolve()
        with self._lock:
            self._roots.append(resolved)
        try:
            yield
        finally:
            with self._lock:
                self._roots.remove(resolved)

    @property
    def roots(self) -> List[Path]:
        with self._lock:
            return list(self._roots)

    def check(self, path: Union[str, Path]) -> None:
        """
        Raises:
            LabelLeakageError: If ``path`` lies below a protected root
        """
        resolved = Path(path).resolve()
        for root in self.roots:
            if resolved == root or root in resolved.parents:
                raise LabelLeakageError(f"Label read inside guarded domain {root}: {path}")


def read_label_file(path: Union[str, Path], guard: Optional[LabelGuard] = None) -> List[BoundingBox]:
    """
    Read one "class cx cy w h" label file

    Args:
        path: Label text file
        guard: Label guard of the calling run, if any

    Returns:
        Boxes in file order

    Raises:
        LabelLeakageError: If the file lies below a root protected by ``guard``
        LabelFormatError: On the first malformed line
    """
    path = Path(path)
    if guard is not None:
        guard.check(path)

    boxes = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            check = BoxValidator.validate_label_line(line)
            if not check["is_valid"]:
                raise LabelFormatError(
                    f"{path}: line {line_number}: {'; '.join(check['errors'])}"
                )
            class_id, cx, cy, w, h = check["values"]
            boxes.append(BoundingBox(class_id, cx, cy, w, h))
    return boxes


def _read_image(path: Path) -> np.ndarray:
    """Read an image as uint8 H x W x 1 (grayscale) or H x W x 3 (RGB)"""
    pixels = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if pixels is None:
        raise DatasetError(f"Failed to read image: {path}")
    if pixels.dtype != np.uint8:
        # 16-bit and float products are rescaled to 8 bits
        pixels = pixels.astype(np.float64)
        lo, hi = float(pixels.min()), float(pixels.max())
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        pixels = ((pixels - lo) * scale).astype(np.uint8)
    if pixels.ndim == 2:
        return pixels[:, :, None]
    if pixels.shape[2] == 4:
        pixels = pixels[:, :, :3]
    if pixels.shape[2] == 3:
        return cv2.cvtColor(pixels, cv2.COLOR_BGR2RGB)
    return pixels[:, :, :1]


def load_box_dataset(
    dir_path: Union[str, Path], read_labels: bool = True, guard: Optional[LabelGuard] = None
) -> List[LabeledImage]:
    """
    Load a crater dataset in plain-text normalized box format

    Accepts either ``images/`` + ``labels/`` sub-directories or image files with
    sibling ``.txt`` label files. Images without a label file get no boxes.

    Args:
        dir_path: Dataset root directory
        read_labels: Set False for unlabelled domains; label files are never opened
        guard: Label guard of the calling run, checked before every label read

    Returns:
        List of labeled images sorted by file name
    """
    root = Path(dir_path)
    if not root.is_dir():
        raise DatasetError(f"Dataset directory not found: {root}")

    image_dir = root / "images" if (root / "images").is_dir() else root
    label_dir = root / "labels" if (root / "labels").is_dir() else image_dir

    image_paths = sorted(
        p for p in image_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not image_paths:
        raise DatasetError(f"No images found in {image_dir}")

    images = []
    for image_path in image_paths:
        boxes: List[BoundingBox] = []
        if read_labels:
            label_path = label_dir / f"{image_path.stem}.txt"
            if label_path.is_file():
                boxes = read_label_file(label_path, guard)
        images.append(LabeledImage(_read_image(image_path), boxes, image_path.stem))

    logger.info(
        f"Loaded {len(images)} images from {root}"
        + (f" ({sum(len(i.boxes) for i in images)} boxes)" if read_labels else " (labels withheld)")
    )
    return images


def save_box_dataset(
    images: Sequence[LabeledImage],
    out_dir: Union[str, Path],
    profile: Optional[DomainProfile] = None,
    seed: Optional[int] = None,
) -> Path:
    """
    Write images/*.png and labels/*.txt, plus a profile.json sidecar when a profile is given

    Args:
        images: Images to write
        out_dir: Destination directory
        profile: Generating profile, recorded in the sidecar
        seed: Generating seed, recorded in the sidecar

    Returns:
        The output directory
    """
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)

    for image in images:
        pixels = image.pixels
        if pixels.shape[2] == 3:
            pixels = cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)
        cv2.imwrite(str(root / "images" / f"{image.source_id}.png"), pixels)
        lines = [f"{b.class_id} {b.cx:.8f} {b.cy:.8f} {b.w:.8f} {b.h:.8f}" for b in image.boxes]
        (root / "labels" / f"{image.source_id}.txt").write_text(
            "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8"
        )

    if profile is not None:
        sidecar = {"profile": profile.to_dict(), "seed": seed, "count": len(images)}
        (root / "profile.json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return root


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def split_dataset(images: Sequence[LabeledImage], ratio: float, seed: int) -> DatasetSplit:
    """
    Deterministic shuffle then partition; floor(n * ratio) images go to train

    Args:
        images: Images to split
        ratio: Train fraction in (0, 1)
        seed: Shuffle seed

    Returns:
        DatasetSplit
    """
    if not images:
        raise DatasetError("Cannot split an empty dataset")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"Split ratio must be in (0, 1): {ratio}")

    order = np.random.default_rng(seed).permutation(len(images))
    n_train = int(math.floor(len(images) * ratio + 1e-9))
    train = [images[i] for i in order[:n_train]]
    val = [images[i] for i in order[n_train:]]
    return DatasetSplit(train=train, val=val, ratio=ratio)


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

def _pixel_iou(a: Tuple[float, ...], b: Tuple[float, ...]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    """Zero-mean, unit-peak low-frequency noise field"""
    noise = gaussian_filter(rng.standard_normal((size, size)), sigma=sigma, mode="wrap")
    peak = np.abs(noise).max()
    return noise / peak if peak > 0 else noise


def _render_crater(
    canvas: np.ndarray, cx: float, cy: float, radius: float, sun: float, depth: float
) -> None:
    """Annular bright rim plus darkened, directionally shadowed interior"""
    size = canvas.shape[0]
    x0, x1 = max(int(math.floor(cx - radius)), 0), min(int(math.ceil(cx + radius)), size)
    y0, y1 = max(int(math.floor(cy - radius)), 0), min(int(math.ceil(cy + radius)), size)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64) + 0.5
    dx, dy = (xx - cx) / radius, (yy - cy) / radius
    dist = np.hypot(dx, dy)
    shade = dx * math.cos(sun) + dy * math.sin(sun)

    region = canvas[y0:y1, x0:x1]
    interior = dist < 0.8
    rim = (dist >= 0.8) & (dist <= 1.0)
    region[interior] += -depth * (0.55 + 0.45 * shade[interior])
    region[rim] += depth * (0.9 - 0.4 * shade[rim])


def generate_synthetic_domain(
    profile: DomainProfile, n: int, image_size: int, seed: int
) -> List[LabeledImage]:
    """
    Render a deterministic synthetic crater domain

    Args:
        profile: Domain profile
        n: Number of images
        image_size: Square image side in pixels (>= 64)
        seed: Generator seed

    Returns:
        Grayscale images with one tight box per rendered crater
    """
    if n <= 0:
        raise ValueError(f"Number of images must be positive: {n}")
    if image_size < 64:
        raise ValueError(f"image_size must be >= 64: {image_size}")
    r_lo, r_hi = profile.radius_range
    if 2.0 * r_hi > 1.0:
        raise DatasetError(
            f"radius_range {profile.radius_range} exceeds image bounds (diameter > image size)"
        )

    rng = np.random.default_rng(seed)
    noise_level = profile.background_noise_level
    images = []

    for index in range(n):
        canvas = 115.0 + 18.0 * _smooth_field(rng, image_size, sigma=image_size / 12)
        sun = rng.uniform(0.0, 2.0 * math.pi)
        count = int(rng.integers(profile.crater_count_range[0], profile.crater_count_range[1] + 1))

        placed: List[Tuple[float, float, float, float]] = []
        for _ in range(count):
            for _attempt in range(_MAX_PLACEMENT_ATTEMPTS):
                radius = max(rng.uniform(r_lo, r_hi) * image_size, 1.5)
                cx = rng.uniform(radius, image_size - radius)
                cy = rng.uniform(radius, image_size - radius)
                candidate = (cx - radius, cy - radius, cx + radius, cy + radius)
                if all(_pixel_iou(candidate, other) <= MAX_GT_OVERLAP_IOU for other in placed):
                    break
            else:
                raise DatasetError(
                    f"Could not place {count} craters without overlap in image {index}; "
                    f"profile '{profile.name}' is too dense for size {image_size}"
                )
            placed.append(candidate)
            _render_crater(canvas, cx, cy, radius, sun, depth=rng.uniform(35.0, 60.0))

        if profile.weathering_artifacts:
            canvas *= 1.0 + 0.35 * _smooth_field(rng, image_size, sigma=image_size / 10)
        canvas += rng.normal(0.0, 3.0 + 40.0 * noise_level, canvas.shape)

        pixels = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)[:, :, None]
        boxes = [
            BoundingBox.from_xyxy(x1 / image_size, y1 / image_size, x2 / image_size, y2 / image_size)
            for x1, y1, x2, y2 in placed
        ]
        images.append(LabeledImage(pixels, boxes, f"{profile.name}_{index:05d}"))

    logger.debug(
        f"Generated {n} '{profile.name}' images with {sum(len(i.boxes) for i in images)} craters"
    )
    return images


# ---------------------------------------------------------------------------
# Letterbox
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LetterboxParams:
    """Geometry of a letterbox transform"""

    orig_w: int
    orig_h: int
    target: int
    new_w: int
    new_h: int
    pad_left: int
    pad_top: int


def letterbox_params(height: int, width: int, target: int) -> LetterboxParams:
    """
    Uniform scale to fit ``target`` plus symmetric padding

    Args:
        height: Source height
        width: Source width
        target: Output side

    Returns:
        LetterboxParams
    """
    if target <= 0:
        raise ValueError(f"Letterbox target must be positive: {target}")
    scale = target / max(height, width)
    new_w = min(max(int(round(width * scale)), 1), target)
    new_h = min(max(int(round(height * scale)), 1), target)
    return LetterboxParams(
        orig_w=width,
        orig_h=height,
        target=target,
        new_w=new_w,
        new_h=new_h,
        pad_left=(target - new_w) // 2,
        pad_top=(target - new_h) // 2,
    )


def letterbox_box(box: BoundingBox, params: LetterboxParams) -> BoundingBox:
    """Map a normalized box from the source frame into the letterboxed frame"""
    t = params.target
    return BoundingBox(
        box.class_id,
        (box.cx * params.new_w + params.pad_left) / t,
        (box.cy * params.new_h + params.pad_top) / t,
        box.w * params.new_w / t,
        box.h * params.new_h / t,
    )


def invert_letterbox_box(box: BoundingBox, params: LetterboxParams) -> Optional[BoundingBox]:
    """
    Map a normalized box from the letterboxed frame back to the source frame

    Args:
        box: Box in letterboxed coordinates
        params: Transform geometry

    Returns:
        Box in source coordinates clipped to the image, or None if it lies in padding
    """
    t = params.target
    cx = (box.cx * t - params.pad_left) / params.new_w
    cy = (box.cy * t - params.pad_top) / params.new_h
    w = box.w * t / params.new_w
    h = box.h * t / params.new_h
    return BoundingBox.from_xyxy(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, box.class_id)


def letterbox_resize(image: LabeledImage, target: int) -> LabeledImage:
    """
    Resize to target x target keeping aspect ratio, padding symmetrically

    Args:
        image: Source image
        target: Output side

    Returns:
        Letterboxed image with boxes transformed consistently
    """
    params = letterbox_params(image.height, image.width, target)
    pixels = image.pixels
    if (params.new_w, params.new_h) != (image.width, image.height):
        resized = cv2.resize(pixels, (params.new_w, params.new_h), interpolation=cv2.INTER_LINEAR)
        pixels = resized.reshape(params.new_h, params.new_w, image.pixels.shape[2])

    if params.new_w == target and params.new_h == target:
        canvas = np.ascontiguousarray(pixels)
    else:
        canvas = np.full((target, target, pixels.shape[2]), PAD_VALUE, dtype=np.uint8)
        canvas[
            params.pad_top:params.pad_top + params.new_h,
            params.pad_left:params.pad_left + params.new_w,
        ] = pixels

    boxes = [letterbox_box(b, params) for b in image.boxes]
    return LabeledImage(canvas, boxes, image.source_id)


def with_boxes(image: LabeledImage, boxes: List[BoundingBox]) -> LabeledImage:
    """Copy of ``image`` carrying ``boxes``"""
    return replace(image, boxes=list(boxes))


def profile_summary(images: Sequence[LabeledImage]) -> Dict[str, float]:
    """
    Box statistics of a dataset (count per image and mean box side)

    Args:
        images: Dataset

    Returns:
        Dictionary of summary statistics
    """
    counts = [len(i.boxes) for i in images]
    sides = [math.sqrt(b.area) for i in images for b in i.boxes]
    return {
        "images": float(len(images)),
        "boxes": float(sum(counts)),
        "mean_boxes_per_image": float(np.mean(counts)) if counts else 0.0,
        "mean_box_side": float(np.mean(sides)) if sides else 0.0,
    }


__all__ = [
    "BoundingBox",
    "Complexity",
    "DatasetError",
    "DatasetSplit",
    "Detection",
    "DomainProfile",
    "LabelFormatError",
    "LabelGuard",
    "LabelLeakageError",
    "LabeledImage",
    "LetterboxParams",
    "LUNAR_PROFILE",
    "MARS_PROFILE",
    "PROFILES",
    "generate_synthetic_domain",
    "get_profile",
    "invert_letterbox_box",
    "letterbox_box",
    "letterbox_params",
    "letterbox_resize",
    "load_box_dataset",
    "profile_summary",
    "read_label_file",
    "save_box_dataset",
    "split_dataset",
    "with_boxes",
]
