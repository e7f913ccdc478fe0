"""Confidence-gated refinement: outlier labeling, interpolation, subpixel
enhancement and edge-preserving smoothing.

Pixels are labeled correct / mismatch / occlusion by left-right
consistency with a confidence override; outliers are filled from nearby
correct pixels (16-direction median for mismatches, nearest correct pixel
to the left for occlusions), then a parabola fit refines disparities to
subpixel precision and median + bilateral filters smooth the result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import median_filter

from .errors import ConfigurationError, InputError
from .types import DisparityMap

CORRECT, MISMATCH, OCCLUSION = 0, 1, 2

# unit steps at multiples of 22.5 degrees
_DIRECTIONS = [
    (np.cos(k * np.pi / 8.0), np.sin(k * np.pi / 8.0)) for k in range(16)
]


@dataclass
class RefinementConfig:
    tau1: float = 1.0  # max left-right disagreement for a correct match
    tau2: float = 0.7  # min confidence for the override
    tau3: float = 0.1  # min left-right confidence gap for the override
    tau4: float = 1.0  # max disagreement when searching alternative disparities

    def __post_init__(self):
        if not 0.0 <= self.tau2 <= 1.0:
            raise ConfigurationError("tau2 must lie in [0, 1]")
        if self.tau1 < 0 or self.tau4 < 0:
            raise ConfigurationError("tau1 and tau4 must be >= 0")


def label_pixels(d_left, d_right, c_left, c_right, config=None, d_max=None):
    """Classify each pixel, applying the rules in order (first match wins):

    correct   if |d - D_R(x-d)| <= tau1, or C_L >= tau2 and
              C_L - C_R(x-d) >= tau3;
    mismatch  if some other integer disparity d^ has |d^ - D_R(x-d^)| <= tau4;
    occlusion otherwise.

    Positions x-d outside the right image cannot satisfy the correct
    clauses and fall through to the mismatch/occlusion rules.
    """
    config = config or RefinementConfig()
    dl, dr = d_left.values, d_right.values
    cl, cr = np.asarray(c_left, np.float64), np.asarray(c_right, np.float64)
    if not (dl.shape == dr.shape == cl.shape == cr.shape):
        raise InputError("disparity and confidence maps differ in shape")
    h, w = dl.shape
    if d_max is None:
        d_max = int(np.ceil(max(dl.max(), dr.max()))) + 1
    xs = np.arange(w)[None, :]
    xr = np.rint(xs - dl).astype(int)
    inside = (xr >= 0) & (xr < w)
    xr_c = np.clip(xr, 0, w - 1)
    rows = np.arange(h)[:, None]
    agree = np.abs(dl - dr[rows, xr_c]) <= config.tau1
    override = (cl >= config.tau2) & (cl - cr[rows, xr_c] >= config.tau3)
    correct = inside & (agree | override)

    any_alt = np.zeros((h, w), dtype=bool)
    d_round = np.rint(dl).astype(int)
    for d_hat in range(d_max):
        xh = xs - d_hat
        ok = (xh >= 0) & (xh < w) & (d_hat != d_round)
        xh_c = np.clip(xh, 0, w - 1)
        match = np.abs(d_hat - dr[rows, xh_c]) <= config.tau4
        any_alt |= np.broadcast_to(ok, (h, w)) & match

    labels = np.full((h, w), OCCLUSION, dtype=np.uint8)
    labels[any_alt] = MISMATCH
    labels[correct] = CORRECT
    return labels


def _trace_correct(values, labels, y, x, dy, dx, max_steps):
    """First correct-labeled pixel along a rasterized direction, or None."""
    for t in range(1, max_steps + 1):
        yy = int(round(y + dy * t))
        xx = int(round(x + dx * t))
        if yy < 0 or yy >= labels.shape[0] or xx < 0 or xx >= labels.shape[1]:
            return None
        if labels[yy, xx] == CORRECT:
            return values[yy, xx]
    return None


def interpolate(d_map, labels):
    """Fill outliers from correct neighbors.

    Mismatches take the median of the nearest correct pixel in each of 16
    directions; occlusions take the nearest correct pixel strictly to the
    left (to the right when the row has none on the left).
    """
    values = d_map.values
    if not np.any(labels == CORRECT):
        raise InputError("no pixels labeled correct; cannot interpolate")
    h, w = values.shape
    out = values.copy()
    diag = int(np.ceil(np.hypot(h, w)))
    ys, xs = np.nonzero(labels != CORRECT)
    for y, x in zip(ys, xs):
        if labels[y, x] == MISMATCH:
            found = []
            for dy, dx in _DIRECTIONS:
                v = _trace_correct(values, labels, y, x, dy, dx, diag)
                if v is not None:
                    found.append(v)
            if found:
                out[y, x] = float(np.median(found))
        else:  # occlusion: background extends from the left
            v = None
            for xx in range(x - 1, -1, -1):
                if labels[y, xx] == CORRECT:
                    v = values[y, xx]
                    break
            if v is None:
                for xx in range(x + 1, w):
                    if labels[y, xx] == CORRECT:
                        v = values[y, xx]
                        break
            if v is not None:
                out[y, x] = v
    return DisparityMap(out, d_map.valid.copy())


def subpixel(d_map, volume):
    """Parabola fit through the costs at d-1, d, d+1.

    d' = d - (C(d+1) - C(d-1)) / (2 (C(d+1) - 2 C(d) + C(d-1))); pixels at
    the disparity boundary or with a non-convex fit keep their value.
    """
    values = d_map.values
    h, w = values.shape
    costs = volume.costs
    d_int = np.clip(np.rint(values).astype(int), 0, volume.d_max - 1)
    out = values.copy()
    interior = (d_int >= 1) & (d_int <= volume.d_max - 2)
    ys, xs = np.nonzero(interior)
    dd = d_int[ys, xs]
    c_m = costs[ys, xs, dd - 1]
    c_0 = costs[ys, xs, dd]
    c_p = costs[ys, xs, dd + 1]
    denom = 2.0 * (c_p - 2.0 * c_0 + c_m)
    convex = denom > 0
    corr = np.zeros_like(c_0)
    corr[convex] = -(c_p - c_m)[convex] / denom[convex]
    # the fit is only trusted around a local minimum, where |corr| <= 1/2
    np.clip(corr, -0.5, 0.5, out=corr)
    refined = dd + corr
    sel = convex
    out[ys[sel], xs[sel]] = refined[sel]
    return DisparityMap(out, d_map.valid.copy())


def bilateral_filter(values, sigma_s=5.0, sigma_r=7.5):
    """Windowed bilateral filter on the disparity field itself."""
    radius = max(1, int(round(2 * sigma_s)))
    radius = min(radius, 8)
    h, w = values.shape
    padded = np.pad(values, radius, mode="edge")
    acc = np.zeros_like(values)
    norm = np.zeros_like(values)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = padded[radius + dy:radius + dy + h,
                             radius + dx:radius + dx + w]
            wgt = np.exp(-(dy * dy + dx * dx) / (2 * sigma_s ** 2)
                         - (shifted - values) ** 2 / (2 * sigma_r ** 2))
            acc += wgt * shifted
            norm += wgt
    return acc / norm


def smooth(d_map, median_size=5, sigma_s=5.0, sigma_r=7.5):
    """Median filter then bilateral filter; edges survive both."""
    med = median_filter(d_map.values, size=median_size, mode="nearest")
    out = bilateral_filter(med, sigma_s, sigma_r)
    return DisparityMap(out, d_map.valid.copy())


def label_fractions(labels):
    n = labels.size
    return {
        "correct": float((labels == CORRECT).sum()) / n,
        "mismatch": float((labels == MISMATCH).sum()) / n,
        "occlusion": float((labels == OCCLUSION).sum()) / n,
    }


def write_label_png(path, labels):
    """8-bit dump: 0 = correct, 128 = mismatch, 255 = occlusion."""
    img = np.zeros(labels.shape, dtype=np.uint8)
    img[labels == MISMATCH] = 128
    img[labels == OCCLUSION] = 255
    Image.fromarray(img).save(path)


def read_label_png(path):
    arr = np.asarray(Image.open(path), dtype=np.uint8)
    labels = np.full(arr.shape, OCCLUSION, dtype=np.uint8)
    labels[arr == 0] = CORRECT
    labels[arr == 128] = MISMATCH
    return labels


def refine(d_left, d_right, c_left, c_right, volume, config=None,
           median_size=5, sigma_s=5.0, sigma_r=7.5, d_max=None):
    """Full refinement chain; returns (refined map, labels)."""
    labels = label_pixels(d_left, d_right, c_left, c_right, config,
                          d_max or volume.d_max)
    filled = interpolate(d_left, labels)
    sub = subpixel(filled, volume)
    return smooth(sub, median_size, sigma_s, sigma_r), labels
