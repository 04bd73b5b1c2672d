"""
Utility modules
"""

from cratertan.utils.validators import BoxValidator, ConfigValidator
from cratertan.utils.logger import setup_logger

__all__ = ["BoxValidator", "ConfigValidator", "setup_logger"]
