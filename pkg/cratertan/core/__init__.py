"""
Core modules for crater domains, augmentation and evaluation
"""

from cratertan.core.data_domains import BoundingBox, DomainProfile, LabeledImage, generate_synthetic_domain
from cratertan.core.augmentation import AugPolicy, augment
from cratertan.core.metrics import MetricsReport, evaluate

__all__ = [
    "BoundingBox",
    "DomainProfile",
    "LabeledImage",
    "generate_synthetic_domain",
    "AugPolicy",
    "augment",
    "MetricsReport",
    "evaluate",
]
