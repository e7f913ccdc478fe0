"""Small shared value types for the pipeline stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class DisparityMap:
    """Per-pixel subpixel disparity with a validity mask."""

    values: np.ndarray  # (H, W) float64
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise ValueError("disparity values and validity mask differ in shape")

    def copy(self):
        return DisparityMap(self.values.copy(), self.valid.copy())


@dataclass
class CostVolume:
    """H x W x D matching costs; lower is a better match.

    `valid` flags entries whose right-image position fell inside the image;
    invalid entries hold a max-finite fill value and are ignored by
    aggregation and argmin.  `meta` carries bookkeeping (iteration counts,
    intermediate cost scales) between pipeline stages.
    """

    costs: np.ndarray  # (H, W, D) float
    valid: np.ndarray  # (H, W, D) bool
    d_max: int
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.costs.shape

    def copy(self):
        return CostVolume(self.costs.copy(), self.valid.copy(), self.d_max, dict(self.meta))
