"""Classical cost-volume post-processing: CBCA, SGM and Tanh normalization.

The aggregation schedule follows the accurate pipeline (two CBCA passes,
one SGM block, two more CBCA passes, then Tanh); the fast pipeline skips
cost aggregation entirely.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ConfigurationError, InputError
from .types import CostVolume, DisparityMap


def _intensity(image):
    """Mean over color planes; accepts (H,W) or (C,H,W)."""
    image = np.asarray(image, dtype=np.float64)
    return image if image.ndim == 2 else image.mean(axis=0)


def compute_arms(image, tau, l_max):
    """Cross arm lengths (left, right, up, down) per pixel.

    An arm extends while the intensity difference to the anchor pixel stays
    below tau, up to l_max steps and the image border.
    """
    inten = _intensity(image)
    h, w = inten.shape
    arms = np.zeros((4, h, w), dtype=np.int64)
    shifts = [(0, -1), (0, 1), (-1, 0), (1, 0)]  # left, right, up, down
    for a, (dy, dx) in enumerate(shifts):
        alive = np.ones((h, w), dtype=bool)
        for n in range(1, l_max + 1):
            ys = np.arange(h) + dy * n
            xs = np.arange(w) + dx * n
            in_y = (ys >= 0) & (ys < h)
            in_x = (xs >= 0) & (xs < w)
            ok = np.zeros((h, w), dtype=bool)
            grid = np.ix_(in_y, in_x)
            diff = np.abs(inten[np.ix_(ys[in_y], xs[in_x])] - inten[grid])
            ok[grid] = diff < tau
            alive &= ok
            arms[a] += alive
    return arms


def _segment_sum(values, lo, hi, axis):
    """Inclusive segment sums values[lo..hi] along axis via cumsum gather."""
    cs = np.cumsum(values, axis=axis)
    cs = np.concatenate([np.zeros_like(np.take(cs, [0], axis=axis)), cs], axis=axis)
    upper = np.take_along_axis(cs, hi + 1, axis=axis)
    lower = np.take_along_axis(cs, lo, axis=axis)
    return upper - lower


def cbca(volume, left_image, right_image, iterations, tau=0.02, l_max=5):
    """Cross-based cost aggregation over combined left/right supports.

    Each cost is replaced by the mean over the union of horizontal segments
    spanned by the vertical arm (horizontal-then-vertical two-pass), with
    per-disparity arms taken as the minimum of the left-image cross at p
    and the right-image cross at p-d.  Invalid entries contribute nothing.
    """
    if iterations < 0:
        raise ConfigurationError("cbca iterations must be >= 0")
    if iterations == 0:
        return volume.copy()
    h, w, d_max = volume.shape
    if _intensity(left_image).shape != (h, w):
        raise ConfigurationError("cbca: image extents do not match the cost volume")
    arms_l = compute_arms(left_image, tau, l_max)
    arms_r = compute_arms(right_image, tau, l_max)
    xs = np.arange(w)

    costs = volume.costs.copy()
    valid = volume.valid
    for _ in range(iterations):
        out = costs.copy()
        for d in range(d_max):
            xr = np.clip(xs - d, 0, w - 1)
            comb = np.minimum(arms_l, arms_r[:, :, xr])  # (4,H,W)
            num = np.where(valid[:, :, d], costs[:, :, d], 0.0)
            cnt = valid[:, :, d].astype(np.float64)
            lo = xs[None, :] - comb[0]
            hi = xs[None, :] + comb[1]
            hsum = _segment_sum(num, lo, hi, axis=1)
            hcnt = _segment_sum(cnt, lo, hi, axis=1)
            ys = np.arange(h)[:, None]
            lo_v = ys - comb[2]
            hi_v = ys + comb[3]
            vsum = _segment_sum(hsum, lo_v, hi_v, axis=0)
            vcnt = _segment_sum(hcnt, lo_v, hi_v, axis=0)
            good = vcnt > 0
            out[:, :, d] = np.where(good, vsum / np.maximum(vcnt, 1.0), costs[:, :, d])
        costs = out
    result = CostVolume(costs, valid.copy(), volume.d_max, dict(volume.meta))
    result.meta["cbca_iterations"] = result.meta.get("cbca_iterations", 0) + iterations
    return result


def _sgm_sweep(costs, p1, p2, axis, reverse):
    """One SGM path direction along the given spatial axis."""
    c = np.moveaxis(costs, axis, 0)  # (steps, other, D)
    if reverse:
        c = c[::-1]
    out = np.empty_like(c)
    out[0] = c[0]
    big = np.inf
    for i in range(1, c.shape[0]):
        prev = out[i - 1]
        m = prev.min(axis=-1, keepdims=True)
        up = np.concatenate([np.full_like(prev[:, :1], big), prev[:, :-1]], axis=-1)
        down = np.concatenate([prev[:, 1:], np.full_like(prev[:, :1], big)], axis=-1)
        cand = np.minimum(np.minimum(prev, np.minimum(up, down) + p1), m + p2)
        out[i] = c[i] + cand - m
    if reverse:
        out = out[::-1]
    return np.moveaxis(out, 0, axis)


def sgm(volume, p1=1.0, p2=8.0):
    """Semi-global matching over 4 path directions, rescaled by 1/4."""
    if p2 < p1:
        raise ConfigurationError(f"sgm requires p2 >= p1, got p1={p1} p2={p2}")
    costs = volume.costs
    if not np.all(np.isfinite(costs)):
        raise ConfigurationError("sgm requires finite costs")
    acc = np.zeros_like(costs)
    for axis, reverse in [(1, False), (1, True), (0, False), (0, True)]:
        acc += _sgm_sweep(costs, p1, p2, axis, reverse)
    result = CostVolume(acc / 4.0, volume.valid.copy(), volume.d_max, dict(volume.meta))
    result.meta["sgm_passes"] = result.meta.get("sgm_passes", 0) + 2
    return result


def normalize_tanh(volume):
    """Squash costs elementwise into [-1, 1]; validity is preserved."""
    return CostVolume(np.tanh(volume.costs), volume.valid.copy(), volume.d_max,
                      dict(volume.meta))


def postprocess(volume, left_image, right_image, mode, p1=1.0, p2=8.0,
                tau_cbca=0.02, l_max=5):
    """Full post-processing chain feeding the disparity network.

    accurate: CBCA x2 -> SGM -> CBCA x2 -> Tanh;  fast: SGM -> Tanh.
    The post-SGM cost planes are kept in meta["sgm_costs"] for the
    cost-curve confidence measures.
    """
    if mode not in ("fast", "accurate"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    v = volume.copy()
    v.meta.setdefault("cbca_iterations", 0)
    if mode == "accurate":
        v = cbca(v, left_image, right_image, 2, tau_cbca, l_max)
    v = sgm(v, p1, p2)
    v.meta["sgm_costs"] = v.costs.copy()
    if mode == "accurate":
        sgm_costs = v.meta["sgm_costs"]
        v = cbca(v, left_image, right_image, 2, tau_cbca, l_max)
        v.meta["sgm_costs"] = sgm_costs
    return normalize_tanh(v)


def wta(volume):
    """Winner-takes-all disparity: per-pixel argmin, smallest d on ties."""
    masked = np.where(volume.valid, volume.costs, np.inf)
    any_valid = volume.valid.any(axis=2)
    d = np.argmin(masked, axis=2).astype(np.float64)
    d[~any_valid] = 0.0
    return DisparityMap(d, any_valid)


def write_cvol(path, volume):
    """Dump costs as (H, W, D) uint32 header + little-endian float32 planes."""
    h, w, d = volume.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<III", h, w, d))
        f.write(np.ascontiguousarray(volume.costs, dtype="<f4").tobytes())


def read_cvol(path):
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) != 12:
            raise InputError(f"{path}: truncated .cvol header")
        h, w, d = struct.unpack("<III", head)
        data = np.frombuffer(f.read(h * w * d * 4), dtype="<f4")
        if data.size != h * w * d:
            raise InputError(f"{path}: truncated .cvol payload")
    costs = data.reshape(h, w, d).astype(np.float64)
    return CostVolume(costs, np.ones((h, w, d), dtype=bool), d)
