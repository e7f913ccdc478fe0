"""Command-line front end: training, prediction, evaluation and timing."""

from __future__ import annotations

import csv
import sys
from pathlib import Path

import click
import numpy as np

from . import costproc, dataio, gdn, matchnet, pipeline, refine
from .config import RunConfig
from .errors import InputError, StereoError


def _load_config(config_path, seed, **overrides):
    cfg = RunConfig.load(config_path) if config_path else RunConfig()
    merged = {k: v for k, v in overrides.items() if v is not None}
    if seed is not None:
        merged["seed"] = seed
    return cfg.replace(**merged) if merged else cfg


def _snapshot(cfg, near):
    near = Path(near)
    cfg.save(near.parent / (near.stem + ".config.txt"))


@click.group()
def main():
    """Stereo matching pipeline: matching-cost networks, a global disparity
    network with learned confidence, and confidence-gated refinement."""


@main.command("train-matcher")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--log", "log_path", type=click.Path())
@click.option("--scenes", default=6, show_default=True)
@click.option("--samples", default=2000, show_default=True)
@click.option("--height", default=64, show_default=True)
@click.option("--width", default=128, show_default=True)
@click.option("--mode", type=click.Choice(["fast", "accurate"]))
@click.option("--seed", type=int)
def train_matcher_cmd(config_path, out, log_path, scenes, samples, height,
                      width, mode, seed):
    """Train the matching-cost network on synthetic patch pairs."""
    cfg = _load_config(config_path, seed, mode=mode)
    scene_list = pipeline.training_scenes(cfg, scenes, height, width)
    rf = (5 if cfg.mode == "accurate" else 4) * 2 + 1
    dataset = pipeline.sample_pairs_from_scenes(scene_list, rf, samples, cfg)
    matcher, log = matchnet.train_matcher(dataset, cfg, seed=cfg.seed)
    matcher.save(out)
    if log_path:
        matchnet.write_training_log(log_path, log)
    _snapshot(cfg, out)
    report = matchnet.lambda_report(matcher, log)
    click.echo(f"final loss {log[-1]['loss']:.6f}")
    click.echo("skip mass per outer block: "
               + " ".join(f"{m:.3f}" for m in report["current"]))


@main.command("train-gdn")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--matcher", "matcher_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--log", "log_path", type=click.Path())
@click.option("--scenes", default=6, show_default=True)
@click.option("--samples", type=int)
@click.option("--height", default=64, show_default=True)
@click.option("--width", default=128, show_default=True)
@click.option("--seed", type=int)
def train_gdn_cmd(config_path, matcher_path, out, log_path, scenes, samples,
                  height, width, seed):
    """Build post-processed cost volumes with a trained matcher and train the
    global disparity network on sampled patches."""
    cfg = _load_config(config_path, seed)
    matcher = matchnet.Matcher.load(matcher_path)
    cfg = cfg.replace(mode=matcher.mode)
    scene_list = pipeline.training_scenes(cfg, scenes, height, width,
                                          seed=cfg.seed + 1000)
    n = samples if samples is not None else cfg.gdn_samples
    per_scene = max(1, n // max(scenes, 1))
    parts = []
    for i, scene in enumerate(scene_list):
        vols = pipeline.scene_volumes(matcher, scene, cfg,
                                      both_references=False)
        parts.append(dataio.sample_gdn_patches(vols["post_left"], scene.gt,
                                               per_scene, seed=cfg.seed + i))
    dataset = dataio.GdnPatchDataset(
        np.concatenate([p.patches for p in parts]),
        np.concatenate([p.targets for p in parts]))
    model, log = gdn.gdn_train(dataset, cfg, seed=cfg.seed)
    model.save(out)
    if log_path:
        gdn.write_training_log(log_path, log)
    _snapshot(cfg, out)
    click.echo(f"final loss {log[-1]['loss']:.6f} "
               f"train accuracy {log[-1]['train_accuracy']:.3f}")


@main.command("predict")
@click.option("--left", "left_path", required=True, type=click.Path(exists=True))
@click.option("--right", "right_path", required=True, type=click.Path(exists=True))
@click.option("--matcher", "matcher_path", required=True,
              type=click.Path(exists=True))
@click.option("--gdn", "gdn_path", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--stage", default="refine", show_default=True,
              type=click.Choice(["volume", "postprocess", "gdn", "refine"]))
@click.option("--seed", type=int)
def predict_cmd(left_path, right_path, matcher_path, gdn_path, config_path,
                out_dir, stage, seed):
    """Predict a disparity map for a rectified pair; --stage stops early and
    dumps that stage's artifact."""
    cfg = _load_config(config_path, seed)
    matcher = matchnet.Matcher.load(matcher_path)
    cfg = cfg.replace(mode=matcher.mode)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    left = dataio.read_image_png(left_path, cfg.channels)
    right = dataio.read_image_png(right_path, cfg.channels)
    _, _, ln, rn = pipeline.prepare_pair(left, right, cfg)
    _snapshot(cfg, out / "run")

    dt = np.float32 if cfg.inference_dtype == "float32" else None
    raw = matchnet.build_cost_volume(matcher, ln, rn, cfg.d_max, cfg.mode,
                                     "left", dt)
    if stage == "volume":
        costproc.write_cvol(out / "volume.cvol", raw)
        click.echo(str(out / "volume.cvol"))
        return
    post = costproc.postprocess(raw, ln, rn, cfg.mode, cfg.sgm_p1, cfg.sgm_p2,
                                cfg.tau_cbca, cfg.cbca_l_max)
    if stage == "postprocess":
        costproc.write_cvol(out / "postprocess.cvol", post)
        dataio.write_disparity_png(out / "disparity.png", costproc.wta(post))
        click.echo(str(out / "disparity.png"))
        return
    if gdn_path is None:
        raise InputError("--gdn checkpoint is required beyond --stage postprocess")
    model = gdn.GdnModel.load(gdn_path)
    d_l, c_l = gdn.gdn_predict_image(model, post, dt)
    dataio.write_image_png(out / "confidence.png", np.clip(c_l, 0, 1))
    np.save(out / "confidence.npy", c_l)
    if stage == "gdn":
        dataio.write_disparity_png(out / "disparity.png", d_l)
        click.echo(str(out / "disparity.png"))
        return
    raw_r = matchnet.build_cost_volume(matcher, ln, rn, cfg.d_max, cfg.mode,
                                       "right", dt)
    post_r = costproc.postprocess(raw_r, rn, ln, cfg.mode, cfg.sgm_p1,
                                  cfg.sgm_p2, cfg.tau_cbca, cfg.cbca_l_max)
    d_r, c_r = gdn.gdn_predict_image(model, post_r, dt)
    rcfg = refine.RefinementConfig(cfg.tau1, cfg.tau2, cfg.tau3, cfg.tau4)
    refined, labels = refine.refine(d_l, d_r, c_l, c_r, post, rcfg,
                                    cfg.median_size, cfg.bilateral_sigma_s,
                                    cfg.bilateral_sigma_r, cfg.d_max)
    dataio.write_disparity_png(out / "disparity.png", refined)
    refine.write_label_png(out / "labels.png", labels)
    click.echo(str(out / "disparity.png"))


@main.command("eval")
@click.option("--pred-dir", required=True, type=click.Path(exists=True))
@click.option("--gt-dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path())
@click.option("--px", default=3.0, show_default=True,
              help="error threshold in pixels (2 for the Middlebury metric)")
def eval_cmd(pred_dir, gt_dir, out_path, px):
    """Per-image bad-pixel rates for matching filenames in two directories."""
    preds = sorted(Path(pred_dir).glob("*.png"))
    if not preds:
        raise InputError(f"no PNG predictions found in {pred_dir}")
    rows = []
    for pred_path in preds:
        gt_path = Path(gt_dir) / pred_path.name
        if not gt_path.exists():
            raise InputError(f"missing ground truth for {pred_path.name}")
        pred = dataio.read_disparity_png(pred_path)
        gt = dataio.read_disparity_png(gt_path)
        rows.append((pred_path.stem, dataio.pixel_error(pred, gt, px)))
    writer = csv.writer(open(out_path, "w", newline="") if out_path
                        else sys.stdout)
    writer.writerow(["image_id", f"error_{px:g}px"])
    for image_id, err in rows:
        writer.writerow([image_id, f"{err:.6f}"])


@main.command("confidence-eval")
@click.option("--matcher", "matcher_path", required=True,
              type=click.Path(exists=True))
@click.option("--gdn", "gdn_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--scenes", default=5, show_default=True)
@click.option("--height", default=64, show_default=True)
@click.option("--width", default=128, show_default=True)
@click.option("--out", "out_path", type=click.Path())
@click.option("--curves-dir", type=click.Path())
@click.option("--seed", type=int)
def confidence_eval_cmd(matcher_path, gdn_path, config_path, scenes, height,
                        width, out_path, curves_dir, seed):
    """Sparsification AUC of the learned confidence against the cost-curve
    baselines, on synthetic validation scenes."""
    from . import confidence as confmod

    cfg = _load_config(config_path, seed)
    matcher = matchnet.Matcher.load(matcher_path)
    cfg = cfg.replace(mode=matcher.mode)
    model = gdn.GdnModel.load(gdn_path)
    scene_list = pipeline.training_scenes(cfg, scenes, height, width,
                                          seed=cfg.seed + 5000)
    rows = []
    for i, scene in enumerate(scene_list):
        res = pipeline.predict_scene(matcher, model, scene, cfg)
        maps = pipeline.confidence_measure_maps(res, model, cfg)
        for measure, cmap in maps.items():
            auc = confmod.auc_sparsification(cmap, res["gdn_left"], scene.gt,
                                             cfg.error_threshold)
            rows.append((f"scene{i:03d}", measure, auc))
        if curves_dir:
            Path(curves_dir).mkdir(parents=True, exist_ok=True)
            _write_curves(Path(curves_dir) / f"scene{i:03d}.csv", maps,
                          res["gdn_left"], scene.gt, cfg.error_threshold)
    writer = csv.writer(open(out_path, "w", newline="") if out_path
                        else sys.stdout)
    writer.writerow(["image_id", "measure", "auc"])
    for image_id, measure, auc in rows:
        writer.writerow([image_id, measure, f"{auc:.6f}"])
    if out_path:
        _snapshot(cfg, out_path)


def _write_curves(path, maps, disp, gt, threshold):
    """Per-image sparsification curves, one density column per measure."""
    sel = gt.valid
    correct = ((np.abs(disp.values - gt.values) <= threshold)
               & disp.valid)[sel].astype(float)
    n = correct.size
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["density"] + list(maps))
        curves = {}
        for name, cmap in maps.items():
            order = np.argsort(-cmap[sel], kind="stable")
            curves[name] = np.cumsum(correct[order]) / np.arange(1, n + 1)
        for k in range(n):
            writer.writerow([f"{(k + 1) / n:.6f}"]
                            + [f"{curves[m][k]:.6f}" for m in maps])


@main.command("bench")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--matcher", "matcher_path", type=click.Path(exists=True))
@click.option("--gdn", "gdn_path", type=click.Path(exists=True))
@click.option("--height", default=64, show_default=True)
@click.option("--width", default=128, show_default=True)
@click.option("--mode", type=click.Choice(["fast", "accurate"]))
@click.option("--seed", type=int)
def bench_cmd(config_path, matcher_path, gdn_path, height, width, mode, seed):
    """Per-stage wall time for one prediction pass (untrained networks are
    used when no checkpoints are given)."""
    cfg = _load_config(config_path, seed, mode=mode)
    if matcher_path:
        matcher = matchnet.Matcher.load(matcher_path)
        cfg = cfg.replace(mode=matcher.mode)
    else:
        matcher = matchnet.Matcher(cfg.channels, cfg.feature_channels, cfg.mode,
                                   cfg.decision_hidden, cfg.decision_layers,
                                   seed=cfg.seed)
    model = (gdn.GdnModel.load(gdn_path) if gdn_path else
             gdn.GdnModel(cfg.d_max, cfg.gdn_conv_channel_list,
                          cfg.gdn_conf_hidden, seed=cfg.seed))
    scene = dataio.generate_scene("scene", height, width, cfg.d_max,
                                  cfg.channels, seed=cfg.seed)
    times = pipeline.bench_pipeline(matcher, model, scene, cfg)
    click.echo(f"{'stage':<14} seconds")
    for stage in pipeline.BENCH_STAGES:
        click.echo(f"{stage:<14} {times[stage]:.4f}")
    click.echo(f"{'total':<14} {sum(times.values()):.4f}")


@main.command("make-scenes")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--count", default=3, show_default=True)
@click.option("--kind", default="scene", show_default=True,
              type=click.Choice(["shift", "slant", "scene"]))
@click.option("--height", default=64, show_default=True)
@click.option("--width", default=128, show_default=True)
@click.option("--d-max", default=32, show_default=True)
@click.option("--seed", default=0, show_default=True)
def make_scenes_cmd(out_dir, count, kind, height, width, d_max, seed):
    """Write synthetic stereo pairs with ground-truth disparity PNGs."""
    out = Path(out_dir)
    for sub in ("left", "right", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for i in range(count):
        scene = dataio.generate_scene(kind, height, width, d_max, seed=seed + i)
        name = f"scene{i:03d}.png"
        dataio.write_image_png(out / "left" / name, scene.left)
        dataio.write_image_png(out / "right" / name, scene.right)
        dataio.write_disparity_png(out / "gt" / name, scene.gt)
    click.echo(str(out))


def run():
    try:
        main(standalone_mode=False)
    except click.UsageError as e:
        click.echo(f"error: {e.format_message()}", err=True)
        sys.exit(2)
    except click.ClickException as e:
        e.show()
        sys.exit(e.exit_code)
    except click.exceptions.Abort:
        sys.exit(1)
    except StereoError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(e.exit_code)


if __name__ == "__main__":
    run()
