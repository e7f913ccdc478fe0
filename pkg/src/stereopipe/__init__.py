"""Stereo matching pipeline with learned matching costs, a global disparity
network with reflective confidence, and confidence-gated refinement."""

from .config import RunConfig
from .types import CostVolume, DisparityMap

__all__ = ["RunConfig", "CostVolume", "DisparityMap"]
__version__ = "0.1.0"
