"""Instance-wise quality-distribution label assignment for dense detectors."""

from .geometry import Box, DomainError, PyramidSpec
from .qdist import QualityGMM

__all__ = ["Box", "DomainError", "PyramidSpec", "QualityGMM"]
__version__ = "0.1.0"
