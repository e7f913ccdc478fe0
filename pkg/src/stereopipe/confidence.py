"""Stereo confidence measures and sparsification-AUC evaluation.

Cost-curve measures operate on the per-pixel vector of D matching costs at
the post-SGM scale; the probability measure uses the disparity network's
softmax scores.  All scores are oriented so that higher means more
reliable.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError

EPS = 1e-9


def _check_curve(curve):
    curve = np.asarray(curve, dtype=np.float64)
    if curve.size == 0:
        raise InputError("empty cost curve")
    return curve


def msm(curve, d1=None):
    """Matching score measure: negated cost of the prediction."""
    curve = _check_curve(curve)
    if d1 is None:
        d1 = int(np.argmin(curve))
    return -float(curve[d1])


def prob(scores):
    """Softmax probability of the predicted disparity from network scores."""
    scores = _check_curve(scores)
    e = np.exp(scores - scores.max())
    return float((e / e.sum()).max())


def cur(curve, d1=None):
    """Cost-curve curvature at the prediction; boundary reflects the single
    available neighbor."""
    curve = _check_curve(curve)
    if d1 is None:
        d1 = int(np.argmin(curve))
    left = curve[d1 - 1] if d1 > 0 else curve[d1 + 1]
    right = curve[d1 + 1] if d1 < len(curve) - 1 else curve[d1 - 1]
    return float(-2.0 * curve[d1] + left + right)


def second_local_min(curve, d1):
    """Second smallest local minimum of the curve, excluding d1.

    Falls back to the global second-smallest value when the curve has no
    other local minimum.
    """
    curve = _check_curve(curve)
    n = len(curve)
    best = None
    for i in range(n):
        if i == d1:
            continue
        left_ok = i == 0 or curve[i] <= curve[i - 1]
        right_ok = i == n - 1 or curve[i] <= curve[i + 1]
        if left_ok and right_ok and (best is None or curve[i] < best):
            best = float(curve[i])
    if best is None:
        others = np.delete(curve, d1)
        if others.size == 0:
            return float(curve[d1])
        best = float(others.min())
    return best


def pkrn(curve, d1=None):
    """Peak ratio: second local minimum over the minimum (guarded)."""
    curve = _check_curve(curve)
    if d1 is None:
        d1 = int(np.argmin(curve))
    c1 = float(curve[d1])
    c2 = second_local_min(curve, d1)
    return c2 / (c1 + EPS)


def nem(curve):
    """Negated entropy of the softmin distribution over the curve.

    Ranges in [-log D, 0]; a near-delta distribution scores near 0
    (maximum confidence), a flat curve scores -log D.
    """
    curve = _check_curve(curve)
    z = -(curve - curve.min())
    p = np.exp(z)
    p /= p.sum()
    return float(np.sum(p * np.log(np.maximum(p, 1e-300))))


def lrd(curve, right_costs, d1=None):
    """Left-right difference: margin between the two smallest minima over
    the consistency gap with the corresponding right-image cost curve."""
    curve = _check_curve(curve)
    right_costs = _check_curve(right_costs)
    if d1 is None:
        d1 = int(np.argmin(curve))
    c1 = float(curve[d1])
    c2 = second_local_min(curve, d1)
    return (c2 - c1) / (abs(c1 - float(right_costs.min())) + EPS)


# ---------------------------------------------------------------------------
# map-level wrappers


def curve_measure_maps(costs, disp, right_costs=None):
    """Per-pixel MSM/CUR/PKRN/NEM (and LRD when the right volume is given).

    `costs` is the (H, W, D) post-SGM cost volume, `disp` the predicted
    integer disparity per pixel, `right_costs` the right-reference volume.
    """
    h, w, _ = costs.shape
    out = {k: np.zeros((h, w)) for k in ("msm", "cur", "pkrn", "nem")}
    if right_costs is not None:
        out["lrd"] = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            c = costs[y, x]
            d1 = int(disp[y, x])
            d1 = min(max(d1, 0), len(c) - 1)
            out["msm"][y, x] = msm(c, d1)
            out["cur"][y, x] = cur(c, d1)
            out["pkrn"][y, x] = pkrn(c, d1)
            out["nem"][y, x] = nem(c)
            if right_costs is not None:
                xr = x - d1
                if 0 <= xr < w:
                    out["lrd"][y, x] = lrd(c, right_costs[y, xr], d1)
                else:
                    out["lrd"][y, x] = 0.0
    return out


def auc_sparsification(confidence, disparity, gt, err_threshold=3.0):
    """Area under the accuracy-vs-density sparsification curve.

    Pixels are ranked by descending confidence; for each density t the
    accuracy over the most confident t-fraction is computed, ties sharing
    a confidence value pooled to their mean correctness.  The curve is
    integrated by the trapezoidal rule over t in [0, 1]; higher is better.
    """
    conf = np.asarray(confidence, dtype=np.float64)
    if not gt.valid.any():
        raise InputError("ground truth has no valid pixels")
    sel = gt.valid
    c = conf[sel]
    correct = ((np.abs(disparity.values - gt.values) <= err_threshold)
               & disparity.valid)[sel].astype(np.float64)
    order = np.argsort(-c, kind="stable")
    c_sorted = c[order]
    correct_sorted = correct[order]
    # pool ties: every pixel in an equal-confidence group contributes the
    # group's mean correctness
    pooled = correct_sorted.copy()
    start = 0
    n = len(c_sorted)
    while start < n:
        end = start
        while end < n and c_sorted[end] == c_sorted[start]:
            end += 1
        pooled[start:end] = correct_sorted[start:end].mean()
        start = end
    acc = np.cumsum(pooled) / np.arange(1, n + 1)
    t = np.arange(1, n + 1) / n
    t_ext = np.concatenate([[0.0], t])
    acc_ext = np.concatenate([[acc[0]], acc])
    trapezoid = getattr(np, "trapezoid", np.trapz)
    return float(trapezoid(acc_ext, t_ext))
