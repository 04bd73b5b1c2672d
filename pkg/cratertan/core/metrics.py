"""
Detection metrics: IoU, greedy matching, precision/recall, AP, mAP@.5 and mAP@.5:.95
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from cratertan.core.data_domains import BoundingBox, Detection

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
OPERATING_POINTS = ("fixed", "max_f1")


class MetricsError(Exception):
    """Exception raised for evaluation input errors"""
    pass


@dataclass
class MatchResult:
    """
    Outcome of matching one detection set against ground truth.
    ``flags`` holds (confidence, is_tp) in processing order.
    """

    tp: int = 0
    fp: int = 0
    fn: int = 0
    flags: List[Tuple[float, bool]] = field(default_factory=list)


@dataclass
class MetricsReport:
    """Evaluation summary"""

    precision: float
    recall: float
    ap_per_threshold: Dict[float, float]
    map50: float
    map5095: float
    pr_curve: List[Tuple[float, float]]
    pr_confidences: List[float] = field(default_factory=list)
    conf_cutoff: float = 0.25
    operating_point: str = "fixed"
    num_images: int = 0
    num_gt: int = 0
    num_detections: int = 0

    def to_dict(self) -> Dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "ap_per_threshold": {f"{t:.2f}": ap for t, ap in self.ap_per_threshold.items()},
            "map50": self.map50,
            "map5095": self.map5095,
            "pr_curve": [list(p) for p in self.pr_curve],
            "conf_cutoff": self.conf_cutoff,
            "operating_point": self.operating_point,
            "num_images": self.num_images,
            "num_gt": self.num_gt,
            "num_detections": self.num_detections,
        }


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """
    Intersection over union of two boxes, 0 when the union is empty

    Args:
        a: First box
        b: Second box

    Returns:
        IoU in [0, 1]
    """
    return float(iou_matrix([a], [b])[0, 0])


def iou_matrix(boxes_a: Sequence[BoundingBox], boxes_b: Sequence[BoundingBox]) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b)), computed in float64"""
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)), dtype=np.float64)
    a = np.array([bx.to_xyxy() for bx in boxes_a], dtype=np.float64)
    b = np.array([bx.to_xyxy() for bx in boxes_b], dtype=np.float64)

    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        result = np.where(union > 0, inter / union, 0.0)
    return np.clip(result, 0.0, 1.0)


def match_detections(
    dets: Sequence[Detection], gts: Sequence[BoundingBox], iou_thresh: float
) -> MatchResult:
    """
    Greedy one-to-one matching in descending confidence order

    Each detection takes the highest-IoU unmatched ground truth of its class
    if that IoU reaches ``iou_thresh``; otherwise it is a false positive.

    Args:
        dets: Detections
        gts: Ground-truth boxes
        iou_thresh: Match threshold in (0, 1]

    Returns:
        MatchResult
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise MetricsError(f"iou_thresh must be in (0, 1]: {iou_thresh}")

    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    ious = iou_matrix([d.box for d in dets], list(gts))
    if len(dets) and len(gts):
        same_class = np.array(
            [[d.class_id == g.class_id for g in gts] for d in dets], dtype=bool
        )
        ious = np.where(same_class, ious, 0.0)

    matched = np.zeros(len(gts), dtype=bool)
    result = MatchResult()
    for i in order:
        is_tp = False
        if len(gts):
            candidates = np.where(matched, -1.0, ious[i])
            best = int(np.argmax(candidates))
            if candidates[best] >= iou_thresh:
                matched[best] = True
                is_tp = True
        result.flags.append((float(dets[i].confidence), is_tp))
        if is_tp:
            result.tp += 1
        else:
            result.fp += 1
    result.fn = len(gts) - result.tp
    return result


def precision_recall(m: MatchResult) -> Tuple[float, float]:
    """(precision, recall) with 0/0 defined as 0"""
    precision = m.tp / (m.tp + m.fp) if m.tp + m.fp else 0.0
    recall = m.tp / (m.tp + m.fn) if m.tp + m.fn else 0.0
    return precision, recall


def pr_points(
    flags: Sequence[Tuple[float, bool]], total_gt: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Raw precision/recall at every distinct confidence threshold

    Equal-confidence flags enter the curve together.

    Args:
        flags: (confidence, is_tp) pairs, any order
        total_gt: Number of ground-truth boxes

    Returns:
        (recall, precision, confidence) arrays ordered by descending confidence
    """
    if not flags:
        empty = np.zeros(0, dtype=np.float64)
        return empty, empty, empty
    conf = np.array([f[0] for f in flags], dtype=np.float64)
    hits = np.array([f[1] for f in flags], dtype=np.float64)
    order = np.argsort(-conf, kind="stable")
    conf, hits = conf[order], hits[order]

    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    # Keep only the last index of each equal-confidence run
    last = np.r_[conf[1:] != conf[:-1], True]
    tp, fp, conf = tp[last], fp[last], conf[last]

    recall = tp / total_gt if total_gt > 0 else np.zeros_like(tp)
    precision = tp / (tp + fp)
    return recall, precision, conf


def average_precision(flags: Sequence[Tuple[float, bool]], total_gt: int) -> float:
    """
    All-points interpolated AP: area under the monotone precision envelope

    Args:
        flags: (confidence, is_tp) pairs pooled over all images
        total_gt: Number of ground-truth boxes

    Returns:
        AP in [0, 1]
    """
    if total_gt < 0:
        raise MetricsError(f"total_gt must be >= 0: {total_gt}")
    if total_gt == 0:
        ap = 1.0 if not flags else 0.0
        logger.debug(f"No ground truth: AP defined as {ap} ({len(flags)} detections)")
        return ap

    recall, precision, _ = pr_points(flags, total_gt)
    if recall.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * envelope))


def _as_mapping(
    items: Union[Mapping[str, Sequence], Sequence[Tuple[str, Sequence]]]
) -> Dict[str, Sequence]:
    if isinstance(items, Mapping):
        return dict(items)
    result = {}
    for image_id, value in items:
        if image_id in result:
            raise MetricsError(f"Duplicate image id: {image_id}")
        result[image_id] = value
    return result


def evaluate(
    dets_per_image: Union[Mapping[str, Sequence[Detection]], Sequence[Tuple[str, Sequence[Detection]]]],
    gts_per_image: Union[Mapping[str, Sequence[BoundingBox]], Sequence[Tuple[str, Sequence[BoundingBox]]]],
    conf_cutoff: float = 0.25,
    operating_point: str = "fixed",
) -> MetricsReport:
    """
    Evaluate detections against ground truth at IoU 0.50:0.05:0.95

    Args:
        dets_per_image: image_id -> detections
        gts_per_image: image_id -> ground-truth boxes
        conf_cutoff: Confidence cutoff for the reported precision/recall ("fixed" mode)
        operating_point: "fixed" (use conf_cutoff) or "max_f1" (best F1 point of the IoU 0.5 curve)

    Returns:
        MetricsReport
    """
    if operating_point not in OPERATING_POINTS:
        raise MetricsError(f"Unknown operating point: {operating_point}")
    dets = _as_mapping(dets_per_image)
    gts = _as_mapping(gts_per_image)
    if set(dets) != set(gts):
        missing = sorted(set(gts) - set(dets))[:5]
        extra = sorted(set(dets) - set(gts))[:5]
        raise MetricsError(
            f"Detection and ground-truth image ids differ (missing: {missing}, unexpected: {extra})"
        )

    image_ids = sorted(gts)
    total_gt = sum(len(gts[i]) for i in image_ids)
    ap_per_threshold: Dict[float, float] = {}
    flags50: List[Tuple[float, bool]] = []

    for threshold in IOU_THRESHOLDS:
        flags: List[Tuple[float, bool]] = []
        for image_id in image_ids:
            flags.extend(match_detections(dets[image_id], gts[image_id], threshold).flags)
        ap_per_threshold[threshold] = average_precision(flags, total_gt)
        if threshold == 0.5:
            flags50 = flags

    recall_curve, precision_curve, conf_curve = pr_points(flags50, total_gt)

    if operating_point == "max_f1" and recall_curve.size:
        denom = recall_curve + precision_curve
        f1 = np.where(denom > 0, 2 * recall_curve * precision_curve / np.where(denom > 0, denom, 1), 0)
        best = int(np.argmax(f1))
        precision, recall = float(precision_curve[best]), float(recall_curve[best])
        cutoff = float(conf_curve[best])
    else:
        kept = [hit for conf, hit in flags50 if conf >= conf_cutoff]
        tp = sum(kept)
        m = MatchResult(tp=tp, fp=len(kept) - tp, fn=total_gt - tp)
        precision, recall = precision_recall(m)
        cutoff = conf_cutoff

    map50 = ap_per_threshold[0.5]
    map5095 = float(np.mean(list(ap_per_threshold.values())))
    return MetricsReport(
        precision=precision,
        recall=recall,
        ap_per_threshold=ap_per_threshold,
        map50=map50,
        map5095=map5095,
        pr_curve=list(zip(recall_curve.tolist(), precision_curve.tolist())),
        pr_confidences=conf_curve.tolist(),
        conf_cutoff=cutoff,
        operating_point=operating_point,
        num_images=len(image_ids),
        num_gt=total_gt,
        num_detections=sum(len(dets[i]) for i in image_ids),
    )


def save_metrics_report(
    report: MetricsReport, out_dir: Union[str, Path], title: Optional[str] = None
) -> Dict[str, Path]:
    """
    Write metrics.json, pr_curve.csv and pr_curve.png

    Args:
        report: Evaluation report
        out_dir: Output directory
        title: Plot title

    Returns:
        Mapping of artifact name to path
    """
    from cratertan.utils.plotting import plot_pr_curve

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": root / "metrics.json",
        "pr_csv": root / "pr_curve.csv",
        "pr_png": root / "pr_curve.png",
    }

    paths["metrics"].write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    with open(paths["pr_csv"], "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["recall", "precision", "confidence"])
        for (recall, precision), conf in zip(report.pr_curve, report.pr_confidences):
            writer.writerow([f"{recall:.6f}", f"{precision:.6f}", f"{conf:.6f}"])
    plot_pr_curve(report.pr_curve, paths["pr_png"], title=title, ap50=report.map50)

    logger.info(f"Wrote evaluation artifacts to {root}")
    return paths
