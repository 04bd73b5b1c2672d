"""
Detector, attention and loss modules
"""

from cratertan.model.nam import NAM
from cratertan.model.detector import CraterDetector, DetectorConfig, build_model
from cratertan.model.losses import SHEMConfig, total_loss

__all__ = ["NAM", "CraterDetector", "DetectorConfig", "build_model", "SHEMConfig", "total_loss"]
