"""Global disparity network: per-disparity scores plus a learned confidence.

Consumes D x 9 x 9 cost patches in [-1, 1] and replaces winner-takes-all:
a small convolutional trunk shrinks 9x9 to 1x1, a score head emits one
logit per disparity and a two-layer sigmoid head scores the confidence of
the current prediction.  The confidence target is recomputed every
forward pass from whether the present argmax is within one pixel of the
ground truth, so the labels move with the network during training.
"""

from __future__ import annotations

import csv

import numpy as np

from . import nncore as nn
from .errors import ConfigurationError, InputError
from .matchnet import Conv2d, FC
from .types import DisparityMap


class GdnOutput:
    def __init__(self, scores, confidence):
        self.scores = np.asarray(scores, dtype=np.float64)
        self.confidence = float(confidence)

    @property
    def disparity(self):
        return int(np.argmax(self.scores))


class GdnModel:
    def __init__(self, d_max, conv_channels=(64, 64, 64, 64), conf_hidden=64,
                 patch=9, seed=0):
        if 2 * len(conv_channels) + 1 != patch:
            raise ConfigurationError(
                f"{len(conv_channels)} unpadded 3x3 convs cannot reduce "
                f"{patch}x{patch} to 1x1")
        rng = np.random.default_rng(seed)
        self.d_max = d_max
        self.patch = patch
        self.arch = {"d_max": d_max, "conv_channels": list(conv_channels),
                     "conf_hidden": conf_hidden, "patch": patch}
        self.convs = []
        c_in = d_max
        for i, c_out in enumerate(conv_channels):
            self.convs.append(Conv2d(c_in, c_out, 3, 0, rng, f"gdn.conv{i}"))
            c_in = c_out
        self.score_fc = FC(c_in, d_max, rng, "gdn.score")
        self.conf_fc1 = FC(d_max, conf_hidden, rng, "gdn.conf1")
        self.conf_fc2 = FC(conf_hidden, 1, rng, "gdn.conf2")

    def trunk_params(self):
        out = []
        for conv in self.convs:
            out += conv.params()
        return out + self.score_fc.params()

    def conf_params(self):
        return self.conf_fc1.params() + self.conf_fc2.params()

    def params(self):
        return self.trunk_params() + self.conf_params()

    def forward_batch(self, patches):
        """Tape forward of (N, D, 9, 9) patches -> (scores (N,D), conf (N,))."""
        x = patches if isinstance(patches, nn.Tensor) else nn.constant(patches)
        if x.data.shape[1] != self.d_max:
            raise ConfigurationError(
                f"patch has {x.data.shape[1]} disparity planes, network expects "
                f"{self.d_max}")
        for conv in self.convs:
            x = nn.relu(conv.forward(x))
        x = nn.reshape(x, (x.data.shape[0], -1))
        scores = self.score_fc.forward(x)
        conf = nn.sigmoid(self.conf_fc2.forward(
            nn.relu(self.conf_fc1.forward(scores))))
        return scores, nn.reshape(conf, (-1,))

    def forward(self, patch):
        """Single-patch inference; returns a GdnOutput."""
        patch = np.asarray(patch, dtype=np.float64)
        scores, conf = self.forward_batch(patch[None])
        return GdnOutput(scores.data[0], conf.data[0])

    def predict_dense(self, volume, dtype=None):
        """Slide the network over a cost volume via dense convolution.

        Replicate-pads the volume spatially by patch//2 so every pixel gets
        an output; returns (scores (D,H,W), confidence (H,W)).
        """
        h, w, d = volume.shape
        if d != self.d_max:
            raise ConfigurationError(
                f"volume has {d} disparities, network expects {self.d_max}")
        r = self.patch // 2
        x = np.pad(volume.costs, ((r, r), (r, r), (0, 0)), mode="edge")
        x = x.transpose(2, 0, 1)[None]  # (1, D, H+2r, W+2r)
        for conv in self.convs:
            x = np.maximum(conv.infer(x, dtype), 0)
        feat = x[0]  # (C, H, W)
        sw, sb = self.score_fc.w.data, self.score_fc.b.data
        scores = np.tensordot(sw, feat, axes=(1, 0)) + sb[:, None, None]
        h1 = np.maximum(
            np.tensordot(self.conf_fc1.w.data, scores, axes=(1, 0))
            + self.conf_fc1.b.data[:, None, None], 0)
        z = np.tensordot(self.conf_fc2.w.data, h1, axes=(1, 0)) \
            + self.conf_fc2.b.data[:, None, None]
        conf = 1.0 / (1.0 + np.exp(-z[0]))
        return scores, conf

    def save(self, path):
        nn.save_checkpoint(path, {"kind": "gdn", "arch": self.arch}, self.params())

    @classmethod
    def load(cls, path):
        meta, values = nn.load_checkpoint(path)
        if meta.get("kind") != "gdn":
            raise InputError(f"{path}: not a disparity-network checkpoint")
        model = cls(**meta["arch"], seed=0)
        for p in model.params():
            if p.name not in values:
                raise InputError(f"{path}: missing weights for {p.name}")
            p.value.data = values[p.name]
        return model


def smooth_target_weights(d_max, y_gt, weights=(0.65, 0.25, 0.1)):
    """Target mass per disparity bin by distance to the (real-valued) truth.

    weight[0] within one pixel, weight[1] in (1, 2], weight[2] in (2, 3],
    zero beyond.
    """
    y_gt = np.asarray(y_gt, dtype=np.float64)
    if np.any(y_gt < 0) or np.any(y_gt > d_max - 1):
        raise InputError(f"ground-truth disparity outside [0, {d_max - 1}]")
    dist = np.abs(np.arange(d_max)[None, :] - np.atleast_1d(y_gt)[:, None])
    p = np.zeros_like(dist)
    p[dist <= 1] = weights[0]
    p[(dist > 1) & (dist <= 2)] = weights[1]
    p[(dist > 2) & (dist <= 3)] = weights[2]
    return p if np.ndim(y_gt) else p[0]


def weighted_xent_loss(scores, y_gt, weights=(0.65, 0.25, 0.1)):
    """Cross-entropy against the smooth target mass; batch mean for 2-d input."""
    if not isinstance(scores, nn.Tensor):
        scores = nn.constant(scores)
    batched = scores.data.ndim == 2
    d_max = scores.data.shape[-1]
    p = smooth_target_weights(d_max, np.atleast_1d(y_gt), weights)
    logsm = nn.log_softmax(scores if batched else nn.reshape(scores, (1, -1)))
    per_sample = nn.neg(nn.sum_(nn.mul(logsm, nn.constant(p)), axis=1))
    return nn.mean_(per_sample) if batched else nn.reshape(per_sample, ())


def reflective_label(scores, y_gt):
    """1 iff the current argmax is within one pixel of the ground truth."""
    scores = np.asarray(scores)
    pred = np.argmax(scores, axis=-1)
    return (np.abs(pred - np.asarray(y_gt)) < 1.0).astype(np.float64)


def binary_xent(conf, labels):
    """Binary cross-entropy of the confidence head against dynamic labels."""
    c = nn.clip(conf, 1e-12, 1.0 - 1e-12)
    t = nn.constant(labels)
    one = nn.constant(1.0)
    ll = nn.add(nn.mul(t, nn.log(c)),
                nn.mul(nn.sub(one, t), nn.log(nn.sub(one, c))))
    return nn.neg(nn.mean_(ll))


def gdn_train(dataset, config, seed=0):
    """Train the disparity network with the combined 85:15 loss.

    The confidence target for each sample is recomputed from the current
    scores on every forward pass.  The learning rate drops by 10x from
    `gdn_lr_decimate_epoch` on.  Returns the model and per-epoch log rows
    (loss, positive-label fraction, training accuracy).
    """
    patches, targets = dataset.patches, dataset.targets
    if len(patches) == 0:
        raise InputError("empty training dataset")
    d_max = patches.shape[1]
    model = GdnModel(d_max, config.gdn_conv_channel_list, config.gdn_conf_hidden,
                     seed=seed)
    w_disp = config.gdn_loss_weight_disparity
    w_conf = config.gdn_loss_weight_confidence
    eq_weights = (config.smooth_target_w1, config.smooth_target_w2,
                  config.smooth_target_w3)
    params = model.params() if w_conf != 0.0 else model.trunk_params()
    rng = np.random.default_rng(seed)
    n = len(patches)
    bs = min(config.gdn_batch_size, n)
    log = []
    for epoch in range(1, config.gdn_epochs + 1):
        lr = config.gdn_lr
        if epoch >= config.gdn_lr_decimate_epoch:
            lr = config.gdn_lr / 10.0
        order = rng.permutation(n)
        total, batches, pos_total, count = 0.0, 0, 0.0, 0
        for start in range(0, n - bs + 1, bs):
            idx = order[start:start + bs]
            scores, conf = model.forward_batch(patches[idx])
            labels = reflective_label(scores.data, targets[idx])
            loss = nn.scale(weighted_xent_loss(scores, targets[idx], eq_weights),
                            w_disp)
            if w_conf != 0.0:
                loss = nn.add(loss, nn.scale(binary_xent(conf, labels), w_conf))
            nn.zero_grad(params)
            nn.backward(loss)
            nn.sgd_step(params, lr, config.momentum)
            total += float(loss.data)
            pos_total += labels.sum()
            count += len(labels)
            batches += 1
        # training accuracy with the end-of-epoch weights
        correct = 0
        for start in range(0, n, 512):
            sl = slice(start, min(start + 512, n))
            sc, _ = model.forward_batch(patches[sl])
            correct += int(reflective_label(sc.data, targets[sl]).sum())
        log.append({"epoch": epoch, "lr": lr, "loss": total / max(batches, 1),
                    "positive_fraction": pos_total / max(count, 1),
                    "train_accuracy": correct / n})
    return model, log


def gdn_predict_image(model, volume, dtype=None):
    """Disparity and confidence maps for a (tanh-normalized) cost volume."""
    scores, conf = model.predict_dense(volume, dtype)
    disp = np.argmax(scores, axis=0).astype(np.float64)
    valid = volume.valid.any(axis=2)
    return DisparityMap(disp, valid), conf


def gdn_scores_prob(scores):
    """Softmax probability of the predicted disparity, per pixel.

    `scores` is (D, H, W) (dense) or (D,) for a single pixel.
    """
    m = scores.max(axis=0, keepdims=True)
    e = np.exp(scores - m)
    return (e / e.sum(axis=0, keepdims=True)).max(axis=0)


def write_training_log(path, log):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "lr", "loss", "positive_fraction",
                         "train_accuracy"])
        for row in log:
            writer.writerow([row["epoch"], row["lr"], row["loss"],
                             row["positive_fraction"], row["train_accuracy"]])
