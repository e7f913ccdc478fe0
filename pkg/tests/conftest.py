import time

import numpy as np
import pytest

from stereopipe import dataio, gdn, matchnet, pipeline
from stereopipe.config import RunConfig

# Scaled-down settings used for every end-to-end test: fast-mode matcher with
# 16 feature channels, a 32-channel disparity-network trunk, and the
# label-swap-corrected cross-entropy orientation, which trains reliably at
# this scale.
SMALL_RUN = dict(
    mode="fast",
    feature_channels=16,
    matcher_epochs=10,
    matcher_batch_size=64,
    matcher_lr=0.02,
    d_max=32,
    xent_as_printed=False,
    gdn_conv_channels="32,32,32,32",
    gdn_epochs=12,
    gdn_lr_decimate_epoch=10,
    gdn_batch_size=128,
)


def small_config(**overrides):
    merged = dict(SMALL_RUN)
    merged.update(overrides)
    return RunConfig.from_dict(merged)


def validation_scenes(cfg):
    """The fixed-seed validation set used by the end-to-end comparisons."""
    return (pipeline.training_scenes(cfg, 4, 64, 128, seed=100, kind="slant")
            + pipeline.training_scenes(cfg, 4, 64, 128, seed=200, kind="shift")
            + pipeline.training_scenes(cfg, 2, 64, 128, seed=300, kind="scene"))


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Train the full small pipeline once and share it across tests.

    Returns the config, trained matcher and disparity network, training
    logs, the validation scenes, saved checkpoints, and the wall time the
    training took.
    """
    t0 = time.perf_counter()
    cfg = small_config()
    train = (pipeline.training_scenes(cfg, 4, 64, 128, seed=0, kind="scene")
             + pipeline.training_scenes(cfg, 3, 64, 128, seed=40, kind="slant")
             + pipeline.training_scenes(cfg, 1, 64, 128, seed=60, kind="shift"))
    pairs = pipeline.sample_pairs_from_scenes(train, 9, 1600, cfg)
    matcher, matcher_log = matchnet.train_matcher(pairs, cfg, seed=0)
    parts = []
    for i, scene in enumerate(train):
        vols = pipeline.scene_volumes(matcher, scene, cfg, both_references=False)
        parts.append(dataio.sample_gdn_patches(vols["post_left"], scene.gt,
                                               4000, seed=i))
    patches = dataio.GdnPatchDataset(
        np.concatenate([p.patches for p in parts]),
        np.concatenate([p.targets for p in parts]))
    model, gdn_log = gdn.gdn_train(patches, cfg, seed=0)
    ckpt_dir = tmp_path_factory.mktemp("ckpt")
    matcher.save(ckpt_dir / "matcher.ckpt")
    model.save(ckpt_dir / "gdn.ckpt")
    cfg.save(ckpt_dir / "run.config.txt")
    return {
        "config": cfg,
        "matcher": matcher,
        "gdn": model,
        "matcher_log": matcher_log,
        "gdn_log": gdn_log,
        "val": validation_scenes(cfg),
        "ckpt_dir": ckpt_dir,
        "train_seconds": time.perf_counter() - t0,
    }


@pytest.fixture(scope="session")
def chain_eval(trained):
    """Full-pipeline predictions on every validation scene, computed once."""
    t0 = time.perf_counter()
    cfg = trained["config"]
    results = [pipeline.predict_scene(trained["matcher"], trained["gdn"],
                                      scene, cfg)
               for scene in trained["val"]]
    return {
        "results": results,
        "eval_seconds": time.perf_counter() - t0,
    }
