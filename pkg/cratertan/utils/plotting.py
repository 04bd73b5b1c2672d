"""
Static plot emission (PR curves, training history)
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_pr_curve(
    points: Sequence[Tuple[float, float]],
    path: Union[str, Path],
    title: Optional[str] = None,
    ap50: Optional[float] = None,
) -> Path:
    """
    Save a precision-recall curve as PNG

    Args:
        points: (recall, precision) samples
        path: Output file
        title: Plot title
        ap50: AP at IoU 0.5, shown in the legend

    Returns:
        Path of the written file
    """
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 4))
    if points:
        recall, precision = zip(*points)
        label = f"AP@.5 = {ap50:.3f}" if ap50 is not None else None
        ax.step(recall, precision, where="post", label=label)
        if label:
            ax.legend(loc="lower left")
    else:
        ax.text(0.5, 0.5, "no detections", ha="center", va="center")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_title(title or "Precision-Recall (IoU 0.5)")
    ax.grid(alpha=0.3)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training_history(history: Dict[str, List[float]], path: Union[str, Path]) -> Path:
    """Loss and validation mAP per epoch"""
    path = Path(path)
    fig, (ax_loss, ax_map) = plt.subplots(1, 2, figsize=(9, 3.5))
    epochs = range(1, len(history.get("total", [])) + 1)
    for key in ("total", "box_ciou", "objectness", "classification"):
        if history.get(key):
            ax_loss.plot(epochs, history[key], label=key)
    ax_loss.set_xlabel("Epoch")
    ax_loss.set_title("Training loss")
    ax_loss.legend(fontsize=8)

    for key in ("map50", "map5095"):
        if history.get(key):
            ax_map.plot(range(1, len(history[key]) + 1), history[key], label=key)
    ax_map.set_xlabel("Epoch")
    ax_map.set_ylim(0, 1)
    ax_map.set_title("Validation mAP")
    ax_map.legend(fontsize=8)

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
