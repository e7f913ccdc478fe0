"""End-to-end orchestration shared by the CLI and the evaluation suite."""

from __future__ import annotations

import time

import numpy as np

from . import confidence as confmod
from . import costproc, dataio, gdn, matchnet, refine
from .config import RunConfig


def _dtype(config):
    return np.float32 if config.inference_dtype == "float32" else None


def prepare_pair(left, right, config):
    """Channel-adjust and normalize an image pair for the matcher."""
    def fix(img):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = img[None]
        if config.channels == 1 and img.shape[0] != 1:
            img = img.mean(axis=0, keepdims=True)
        if config.channels == 3 and img.shape[0] == 1:
            img = np.repeat(img, 3, axis=0)
        return img
    left, right = fix(left), fix(right)
    return (left, right,
            matchnet.normalize_image(left), matchnet.normalize_image(right))


def training_scenes(config, count, height=64, width=128, seed=None, kind="scene"):
    seed = config.seed if seed is None else seed
    return [
        dataio.generate_scene(kind=kind, height=height, width=width,
                              d_max=config.d_max, channels=config.channels,
                              seed=seed + i)
        for i in range(count)
    ]


def sample_pairs_from_scenes(scenes, matcher_rf, n_total, config, seed=None):
    """Pool matching/non-matching patch pairs across scenes."""
    seed = config.seed if seed is None else seed
    per_scene = max(1, n_total // max(len(scenes), 1))
    parts = []
    for i, scene in enumerate(scenes):
        ds = dataio.sample_match_pairs(
            scene, per_scene, matcher_rf,
            (config.neg_offset_min, config.neg_offset_max), seed=seed + i)
        if len(ds.left):
            parts.append(ds)
    if not parts:
        return dataio.MatchPairDataset(*([np.zeros((0, config.channels,
                                                    matcher_rf, matcher_rf))] * 3))
    return dataio.MatchPairDataset(
        np.concatenate([p.left for p in parts]),
        np.concatenate([p.pos for p in parts]),
        np.concatenate([p.neg for p in parts]))


def scene_volumes(matcher, scene, config, both_references=True):
    """Raw and post-processed cost volumes for a scene (left, and optionally
    right, reference)."""
    dt = _dtype(config)
    _, _, ln, rn = prepare_pair(scene.left, scene.right, config)
    out = {}
    raw_l = matchnet.build_cost_volume(matcher, ln, rn, config.d_max,
                                       config.mode, "left", dt)
    out["raw_left"] = raw_l
    out["post_left"] = costproc.postprocess(
        raw_l, ln, rn, config.mode, config.sgm_p1, config.sgm_p2,
        config.tau_cbca, config.cbca_l_max)
    if both_references:
        raw_r = matchnet.build_cost_volume(matcher, ln, rn, config.d_max,
                                           config.mode, "right", dt)
        out["raw_right"] = raw_r
        out["post_right"] = costproc.postprocess(
            raw_r, rn, ln, config.mode, config.sgm_p1, config.sgm_p2,
            config.tau_cbca, config.cbca_l_max)
    return out


def predict_scene(matcher, gdn_model, scene, config):
    """Run the full pipeline on one scene; returns all stage outputs."""
    dt = _dtype(config)
    vols = scene_volumes(matcher, scene, config, both_references=True)
    res = dict(vols)
    res["wta_raw"] = costproc.wta(vols["raw_left"])
    res["wta_post"] = costproc.wta(vols["post_left"])
    d_l, c_l = gdn.gdn_predict_image(gdn_model, vols["post_left"], dt)
    d_r, c_r = gdn.gdn_predict_image(gdn_model, vols["post_right"], dt)
    res.update(gdn_left=d_l, conf_left=c_l, gdn_right=d_r, conf_right=c_r)
    rcfg = refine.RefinementConfig(config.tau1, config.tau2, config.tau3,
                                   config.tau4)
    refined, labels = refine.refine(
        d_l, d_r, c_l, c_r, vols["post_left"], rcfg, config.median_size,
        config.bilateral_sigma_s, config.bilateral_sigma_r, config.d_max)
    res.update(refined=refined, labels=labels)
    return res


def confidence_measure_maps(result, gdn_model, config):
    """All confidence maps (reflective + cost-curve baselines) for a scene
    result from predict_scene."""
    dt = _dtype(config)
    post = result["post_left"]
    sgm_costs = post.meta["sgm_costs"]
    sgm_right = result["post_right"].meta["sgm_costs"]
    disp = result["gdn_left"].values
    maps = confmod.curve_measure_maps(sgm_costs, disp, sgm_right)
    scores, _ = gdn_model.predict_dense(post, dt)
    maps["prob"] = gdn.gdn_scores_prob(scores)
    maps["reflective"] = result["conf_left"]
    return maps


BENCH_STAGES = ["description", "decision", "cbca", "sgm", "gdn",
                "interpolation", "subpixel", "smoothing"]


def bench_pipeline(matcher, gdn_model, scene, config):
    """Wall time per pipeline stage on one scene (one left-reference pass)."""
    dt = _dtype(config)
    _, _, ln, rn = prepare_pair(scene.left, scene.right, config)
    times = dict.fromkeys(BENCH_STAGES, 0.0)

    t0 = time.perf_counter()
    u_l = matchnet.describe_grid(matcher, ln, dt)
    u_r = matchnet.describe_grid(matcher, rn, dt)
    times["description"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    raw = matchnet.build_cost_volume(matcher, ln, rn, config.d_max,
                                     config.mode, "left", dt,
                                     descriptors=(u_l, u_r))
    times["decision"] = time.perf_counter() - t0

    vol = raw
    if config.mode == "accurate":
        t0 = time.perf_counter()
        vol = costproc.cbca(vol, ln, rn, 2, config.tau_cbca, config.cbca_l_max)
        times["cbca"] += time.perf_counter() - t0
    t0 = time.perf_counter()
    vol = costproc.sgm(vol, config.sgm_p1, config.sgm_p2)
    times["sgm"] = time.perf_counter() - t0
    if config.mode == "accurate":
        t0 = time.perf_counter()
        vol = costproc.cbca(vol, ln, rn, 2, config.tau_cbca, config.cbca_l_max)
        times["cbca"] += time.perf_counter() - t0
    post = costproc.normalize_tanh(vol)

    t0 = time.perf_counter()
    d_l, c_l = gdn.gdn_predict_image(gdn_model, post, dt)
    times["gdn"] = time.perf_counter() - t0

    rcfg = refine.RefinementConfig(config.tau1, config.tau2, config.tau3,
                                   config.tau4)
    t0 = time.perf_counter()
    labels = refine.label_pixels(d_l, d_l, c_l, c_l, rcfg, config.d_max)
    filled = refine.interpolate(d_l, labels)
    times["interpolation"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    sub = refine.subpixel(filled, post)
    times["subpixel"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    refine.smooth(sub, config.median_size, config.bilateral_sigma_s,
                  config.bilateral_sigma_r)
    times["smoothing"] = time.perf_counter() - t0
    return times


def evaluate_chain(matcher, gdn_model, scenes, config):
    """Pooled 3-px error along raw-WTA -> post-WTA -> GDN -> refined."""
    errs = {"wta_raw": [], "wta_post": [], "gdn": [], "refined": []}
    weights = []
    for scene in scenes:
        res = predict_scene(matcher, gdn_model, scene, config)
        errs["wta_raw"].append(dataio.pixel_error(res["wta_raw"], scene.gt,
                                                  config.error_threshold))
        errs["wta_post"].append(dataio.pixel_error(res["wta_post"], scene.gt,
                                                   config.error_threshold))
        errs["gdn"].append(dataio.pixel_error(res["gdn_left"], scene.gt,
                                              config.error_threshold))
        errs["refined"].append(dataio.pixel_error(res["refined"], scene.gt,
                                                  config.error_threshold))
        weights.append(scene.gt.valid.sum())
    w = np.asarray(weights, dtype=np.float64)
    return {k: float(np.average(v, weights=w)) for k, v in errs.items()}
