"""Synthetic stereo scenes with exact ground truth, sampling, and file IO.

Scenes are built from a wide random texture: the right image is a crop of
it and the left image samples the texture at x - gt(x, y), so the true
disparity is known everywhere (real-valued where the surface is slanted).
Disparity maps travel as 16-bit fixed-point PNGs (value = disparity * 256,
0 = invalid).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import binary_dilation, gaussian_filter

from .errors import ConfigurationError, InputError
from .types import DisparityMap


@dataclass
class SyntheticScene:
    left: np.ndarray  # (C, H, W) in [0, 1]
    right: np.ndarray  # (C, H, W)
    gt: DisparityMap  # real-valued, defined everywhere
    occlusion: np.ndarray  # (H, W) bool, true where the match is covered
    d_max: int


@dataclass
class MatchPairDataset:
    """Left anchor patches with matching and non-matching right patches."""

    left: np.ndarray  # (N, C, p, p)
    pos: np.ndarray
    neg: np.ndarray


@dataclass
class GdnPatchDataset:
    patches: np.ndarray  # (N, D, 9, 9)
    targets: np.ndarray  # (N,) real-valued disparities


def _texture(rng, channels, height, width, scale=2.0):
    base = np.stack([
        gaussian_filter(rng.normal(size=(height, width)), scale)
        + 0.5 * gaussian_filter(rng.normal(size=(height, width)), scale / 3)
        for _ in range(channels)
    ])
    lo, hi = base.min(), base.max()
    return (base - lo) / (hi - lo + 1e-12)


def _warp_left(texture_wide, gt, d_max):
    """Sample left(x) = texture_wide(x - gt + d_max) with linear interpolation."""
    c, h, w_wide = texture_wide.shape
    w = w_wide - d_max
    xs = np.arange(w)[None, :] - gt + d_max  # (H, W) source columns
    x0 = np.floor(xs).astype(int)
    frac = xs - x0
    x0 = np.clip(x0, 0, w_wide - 2)
    rows = np.arange(h)[:, None]
    left = (1 - frac) * texture_wide[:, rows, x0] + frac * texture_wide[:, rows, x0 + 1]
    return left


def _occlusion_mask(gt):
    """A pixel is occluded when a closer surface maps onto its right-image column."""
    h, w = gt.shape
    occ = np.zeros((h, w), dtype=bool)
    xs = np.arange(w)
    for y in range(h):
        xr = xs - gt[y]
        closer = gt[y][None, :] > gt[y][:, None] + 0.5  # [p, q]: q in front of p
        covers = np.abs(xr[None, :] - xr[:, None]) < 0.5
        occ[y] = np.any(closer & covers, axis=1)
    return occ


def generate_scene(kind="scene", height=64, width=128, d_max=32, channels=1,
                   seed=0, noise=0.01, brightness_shift=0.02, shift=None,
                   texture_scale=2.0):
    """Deterministic synthetic stereo pair with exact ground truth.

    kinds: "shift" (constant disparity), "slant" (disparity linear in x,
    real-valued), "scene" (slanted background, foreground boxes with
    occlusions, a low-texture region and a decorrelated region that
    produces locally inconsistent matches).
    """
    if d_max < 2:
        raise ConfigurationError("d_max must be >= 2")
    rng = np.random.default_rng(seed)
    wide = _texture(rng, channels, height, width + d_max, texture_scale)
    xs = np.arange(width, dtype=np.float64)[None, :]

    if kind == "shift":
        k = float(shift if shift is not None else d_max // 4)
        gt = np.full((height, width), k)
    elif kind == "slant":
        lo, hi = 2.0, d_max - 2.0
        gt = np.broadcast_to(lo + (hi - lo) * xs / max(width - 1, 1),
                             (height, width)).copy()
    elif kind == "scene":
        lo = 2.0 + rng.uniform(0, 2)
        hi = min(lo + rng.uniform(4, 8), max(d_max - 2.0, lo))
        gt = np.broadcast_to(lo + (hi - lo) * xs / max(width - 1, 1),
                             (height, width)).copy()
        box_lo = min(hi + 4.0, d_max - 2.0)
        for _ in range(3):
            bh = rng.integers(height // 6, height // 3)
            bw = rng.integers(width // 8, width // 4)
            y0 = rng.integers(0, height - bh)
            x0 = rng.integers(width // 4, width - bw)
            gt[y0:y0 + bh, x0:x0 + bw] = rng.uniform(box_lo,
                                                     max(d_max - 2.0, box_lo))
    else:
        raise ConfigurationError(f"unknown scene kind {kind!r}")

    if kind == "scene":
        # low-texture patch: flatten the texture locally
        y0 = rng.integers(0, height // 2)
        x0 = rng.integers(width // 3, 2 * width // 3)
        region = wide[:, y0:y0 + height // 5, x0:x0 + width // 6]
        wide[:, y0:y0 + height // 5, x0:x0 + width // 6] = region.mean() \
            + 0.02 * (region - region.mean())

    left = _warp_left(wide, gt, d_max)
    right = wide[:, :, d_max:].copy()
    occ = _occlusion_mask(gt) if kind == "scene" else np.zeros_like(gt, dtype=bool)

    if kind == "scene":
        # locally inconsistent analogue of a reflective surface
        y0 = rng.integers(height // 2, 3 * height // 4)
        x0 = rng.integers(width // 3, 2 * width // 3)
        bh, bw = height // 8, width // 10
        patch = right[:, y0:y0 + bh, x0:x0 + bw]
        right[:, y0:y0 + bh, x0:x0 + bw] = (
            0.5 * patch + 0.5 * rng.uniform(0, 1, size=(channels, bh, bw)))

    left = left + rng.normal(scale=noise, size=left.shape)
    right = right + rng.normal(scale=noise, size=right.shape) + brightness_shift
    gt_map = DisparityMap(gt, np.ones_like(gt, dtype=bool))
    return SyntheticScene(np.clip(left, 0, 1), np.clip(right, 0, 1), gt_map, occ, d_max)


def sample_match_pairs(scene, n, patch_size, neg_offset_range=(4, 8), seed=0,
                       normalized=None):
    """Matching / non-matching patch pairs at positions with known disparity.

    The positive right patch is centered at the true disparity, the
    negative at an offset drawn uniformly from the given range (random
    sign, flipped if it would leave the image).  Patches never cross the
    image border.
    """
    from .matchnet import normalize_image

    rng = np.random.default_rng(seed)
    r = patch_size // 2
    ln, rn = normalized if normalized else (normalize_image(scene.left),
                                            normalize_image(scene.right))
    h, w = scene.gt.values.shape
    off_lo, off_hi = neg_offset_range
    ys, xs = np.mgrid[r:h - r, r:w - r]
    gt = scene.gt.values[ys, xs]
    xr = np.rint(xs - gt).astype(int)
    ok = (scene.gt.valid[ys, xs] & ~scene.occlusion[ys, xs]
          & (xr - r - off_hi >= 0) & (xr + r + off_hi < w))
    cand = np.stack([ys[ok], xs[ok], xr[ok]], axis=1)
    if n == 0 or len(cand) == 0:
        c = ln.shape[0]
        empty = np.zeros((0, c, patch_size, patch_size))
        return MatchPairDataset(empty, empty.copy(), empty.copy())
    pick = rng.choice(len(cand), size=n, replace=len(cand) < n)
    left_p, pos_p, neg_p = [], [], []
    for y, x, xp in cand[pick]:
        o = int(rng.integers(off_lo, off_hi + 1)) * (1 if rng.random() < 0.5 else -1)
        xn = xp + o
        left_p.append(ln[:, y - r:y + r + 1, x - r:x + r + 1])
        pos_p.append(rn[:, y - r:y + r + 1, xp - r:xp + r + 1])
        neg_p.append(rn[:, y - r:y + r + 1, xn - r:xn + r + 1])
    return MatchPairDataset(np.stack(left_p), np.stack(pos_p), np.stack(neg_p))


def sample_gdn_patches(volume, gt, n, seed=0, patch=9, balance=False,
                       edge_weight=0.0):
    """D x 9 x 9 cost patches with the central ground-truth disparity.

    Centers are drawn without replacement where the ground truth is valid
    (with replacement only if n exceeds the valid-pixel count); borders
    are handled by replicate padding.  With balance=True, pixels are
    weighted by the inverse frequency of their (rounded) disparity so the
    sampled targets cover the disparity range more evenly.  edge_weight > 0
    boosts pixels near disparity discontinuities, where estimators tend to
    blur, by a factor of 1 + edge_weight.
    """
    rng = np.random.default_rng(seed)
    r = patch // 2
    h, w, d = volume.shape
    padded = np.pad(volume.costs, ((r, r), (r, r), (0, 0)), mode="edge")
    ok = gt.valid & (gt.values >= 0) & (gt.values <= d - 1)
    ys, xs = np.nonzero(ok)
    if len(ys) == 0:
        raise InputError("no valid ground-truth pixels to sample from")
    weight = np.ones(len(ys))
    if balance:
        bins = np.rint(gt.values[ys, xs]).astype(int)
        counts = np.bincount(bins, minlength=d)
        weight /= counts[bins]
    if edge_weight > 0.0:
        gy, gx = np.gradient(gt.values)
        edge = (np.abs(gy) + np.abs(gx)) > 2.0
        near = binary_dilation(edge, iterations=4)
        weight *= 1.0 + edge_weight * near[ys, xs]
    p = None
    if balance or edge_weight > 0.0:
        p = weight / weight.sum()
    pick = rng.choice(len(ys), size=n, replace=len(ys) < n, p=p)
    patches = np.empty((n, d, patch, patch))
    targets = np.empty(n)
    for i, j in enumerate(pick):
        y, x = ys[j], xs[j]
        patches[i] = padded[y:y + patch, x:x + patch, :].transpose(2, 0, 1)
        targets[i] = gt.values[y, x]
    return GdnPatchDataset(patches, targets)


# ---------------------------------------------------------------------------
# file formats


def write_disparity_png(path, dmap):
    """16-bit PNG, fixed point: stored = round(disparity * 256), 0 = invalid."""
    stored = np.rint(dmap.values * 256.0)
    stored = np.clip(stored, 0, 65535).astype(np.uint16)
    stored[~dmap.valid] = 0
    Image.fromarray(stored).save(path)


def read_disparity_png(path):
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.uint16).astype(np.float64)
    valid = arr > 0
    return DisparityMap(arr / 256.0, valid)


def write_image_png(path, image):
    """8-bit PNG from a (C,H,W) or (H,W) float image in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def read_image_png(path, channels=None):
    """Read an image as (C,H,W) float in [0, 1]."""
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)[:3]
    if channels == 1 and arr.shape[0] != 1:
        arr = arr.mean(axis=0, keepdims=True)
    if channels == 3 and arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    return arr


def read_pfm(path):
    """Read a PFM disparity/image file (read-only import path)."""
    with open(path, "rb") as f:
        header = f.readline().decode("latin-1").strip()
        if header not in ("Pf", "PF"):
            raise InputError(f"{path}: not a PFM file")
        dims = f.readline().decode("latin-1").split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().decode("latin-1").strip())
        endian = "<" if scale < 0 else ">"
        count = w * h * (3 if header == "PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype=endian + "f4")
    if header == "PF":
        data = data.reshape(h, w, 3)
    else:
        data = data.reshape(h, w)
    return np.flipud(data).astype(np.float64)


def pixel_error(pred, gt, threshold=3.0):
    """Fraction of valid ground-truth pixels off by more than the threshold."""
    if pred.values.shape != gt.values.shape:
        raise InputError("prediction and ground truth differ in shape")
    if not gt.valid.any():
        raise InputError("ground truth has no valid pixels")
    bad = (np.abs(pred.values - gt.values) > threshold) | ~pred.valid
    return float(bad[gt.valid].mean())
