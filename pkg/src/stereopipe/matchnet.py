"""Matching-cost networks with multilevel constant-highway shortcuts.

A description tower turns each image (or patch) into per-pixel feature
descriptors; costs come either from the negated descriptor dot product
(fast mode) or from a fully-connected decision head on the concatenated
descriptor pair (accurate mode).  Training uses the hybrid hinge +
cross-entropy loss on matching/non-matching patch pairs.
"""

from __future__ import annotations

import csv

import numpy as np

from . import nncore as nn
from .errors import ConfigurationError, InputError, NumericError, StateError
from .types import CostVolume


class Conv2d:
    def __init__(self, c_in, c_out, k, padding, rng, name):
        fan_in = c_in * k * k
        self.w = nn.Param(nn.init_uniform((c_out, c_in, k, k), fan_in, rng), f"{name}.w")
        self.b = nn.Param(nn.init_uniform((c_out,), fan_in, rng), f"{name}.b")
        self.padding = padding

    def forward(self, x):
        return nn.conv2d(x, self.w, self.b, self.padding)

    def infer(self, x, dtype=None):
        return nn.conv2d_raw(x, self.w.data, self.b.data, self.padding, dtype)

    def params(self):
        return [self.w, self.b]


class FC:
    def __init__(self, n_in, n_out, rng, name):
        self.w = nn.Param(nn.init_uniform((n_out, n_in), n_in, rng), f"{name}.w")
        self.b = nn.Param(nn.init_uniform((n_out,), n_in, rng), f"{name}.b")

    def forward(self, x):
        return nn.fc(x, self.w, self.b)

    def infer(self, x, dtype=None):
        return nn.fc_raw(x, self.w.data, self.b.data, dtype)

    def params(self):
        return [self.w, self.b]


class InnerBlock:
    """Two padded 3x3 convolutions plus a learned-scalar skip: f(x) + lam*x."""

    def __init__(self, channels, rng, name):
        self.conv1 = Conv2d(channels, channels, 3, 1, rng, f"{name}.conv1")
        self.conv2 = Conv2d(channels, channels, 3, 1, rng, f"{name}.conv2")
        self.lam = nn.Param(np.array(1.0), f"{name}.lam")

    def residual(self, x):
        return self.conv2.forward(nn.relu(self.conv1.forward(x)))

    def forward(self, x):
        return nn.highway_add(self.residual(x), x, self.lam)

    def residual_infer(self, x, dtype=None):
        return self.conv2.infer(np.maximum(self.conv1.infer(x, dtype), 0), dtype)

    def infer(self, x, dtype=None):
        return self.residual_infer(x, dtype) + self.lam.data * x

    def params(self):
        return self.conv1.params() + self.conv2.params() + [self.lam]


class OuterBlock:
    """Two inner blocks wrapped by a second-level constant-highway skip.

    y1 = lam1*y0 + f1(y0);  y2 = lam0*y0 + lam2*y1 + f2(y1).
    """

    def __init__(self, channels, rng, name):
        self.inner1 = InnerBlock(channels, rng, f"{name}.inner1")
        self.inner2 = InnerBlock(channels, rng, f"{name}.inner2")
        self.lam0 = nn.Param(np.array(1.0), f"{name}.lam0")

    def forward(self, y0):
        y1 = self.inner1.forward(y0)
        return nn.highway_add(self.inner2.forward(y1), y0, self.lam0)

    def infer(self, y0, dtype=None):
        y1 = self.inner1.infer(y0, dtype)
        return self.inner2.infer(y1, dtype) + self.lam0.data * y0

    def lambdas(self):
        """(lam0, lam1, lam2) as floats."""
        return (float(self.lam0.data), float(self.inner1.lam.data),
                float(self.inner2.lam.data))

    def skip_mass(self):
        """Total input fraction skipping the block: lam0 + lam1*lam2."""
        l0, l1, l2 = self.lambdas()
        return l0 + l1 * l2

    def params(self):
        return self.inner1.params() + self.inner2.params() + [self.lam0]


def _l2norm_raw(x, eps=1e-12):
    """Unit-normalize descriptors along the feature axis (0 for (F,H,W),
    1 for batched input)."""
    axis = 0 if x.ndim == 3 else 1
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    return x / np.maximum(n, eps)


def _l2norm_tape(x, eps=1e-12):
    axis = 0 if x.data.ndim == 3 else 1
    sq = nn.sum_(nn.mul(x, x), axis=axis, keepdims=True)
    return nn.div(x, nn.sqrt(nn.add(sq, nn.constant(eps))))


class DescriptionNet:
    """Stack of (unpadded 3x3 scaling conv + ReLU, outer block) pairs.

    Each scaling layer shrinks the spatial extent by 2, so the receptive
    field is 2*n_outer + 1 pixels per side (11x11 with five blocks).
    Output descriptors are unit-normalized per pixel, which bounds dot
    products to [-1, 1] and keeps the downstream Tanh range informative.
    """

    def __init__(self, in_channels, channels, n_outer, rng):
        self.in_channels = in_channels
        self.channels = channels
        self.n_outer = n_outer
        self.scales = []
        self.outers = []
        for i in range(n_outer):
            c_in = in_channels if i == 0 else channels
            self.scales.append(Conv2d(c_in, channels, 3, 0, rng, f"desc.scale{i}"))
            self.outers.append(OuterBlock(channels, rng, f"desc.outer{i}"))

    @property
    def receptive_field(self):
        return 2 * self.n_outer + 1

    def forward(self, x):
        for scale, outer in zip(self.scales, self.outers):
            x = outer.forward(nn.relu(scale.forward(x)))
        return _l2norm_tape(x)

    def describe(self, image, dtype=None, chunk=2048):
        """Per-pixel descriptors; output shrinks by 2*n_outer per side.

        Each descriptor is computed from its own receptive-field patch,
        exactly as during patch training, so pixels outside that window
        cannot influence it.  (The padded convolutions inside the blocks
        see patch borders, not image neighbors, which keeps the locality
        exact at the cost of redundant computation.)
        """
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            image = image[None]
        h, w = image.shape[-2:]
        rf = self.receptive_field
        if h < rf or w < rf:
            raise InputError(f"image {h}x{w} smaller than the {rf}x{rf} receptive field")
        win = np.lib.stride_tricks.sliding_window_view(image, (rf, rf),
                                                       axis=(1, 2))
        hp, wp = h - rf + 1, w - rf + 1
        patches = win.transpose(1, 2, 0, 3, 4).reshape(hp * wp, image.shape[0],
                                                       rf, rf)
        feats = []
        for start in range(0, len(patches), chunk):
            x = np.ascontiguousarray(patches[start:start + chunk])
            for scale, outer in zip(self.scales, self.outers):
                x = outer.infer(np.maximum(scale.infer(x, dtype), 0), dtype)
            feats.append(x.reshape(x.shape[0], x.shape[1]))
        out = np.concatenate(feats).T.reshape(-1, hp, wp)
        return _l2norm_raw(out)

    def params(self):
        out = []
        for scale, outer in zip(self.scales, self.outers):
            out += scale.params() + outer.params()
        return out


class DecisionNet:
    """Fully-connected comparator on the concatenated descriptor pair."""

    def __init__(self, feature_dim, hidden, n_layers, rng):
        self.feature_dim = feature_dim
        self.fcs = []
        n_in = 2 * feature_dim
        for i in range(n_layers - 1):
            self.fcs.append(FC(n_in, hidden, rng, f"dec.fc{i}"))
            n_in = hidden
        self.fcs.append(FC(n_in, 1, rng, f"dec.fc{n_layers - 1}"))

    def forward(self, pair):
        x = pair
        for layer in self.fcs[:-1]:
            x = nn.relu(layer.forward(x))
        return nn.sigmoid(self.fcs[-1].forward(x))

    def infer(self, pair, dtype=None):
        x = pair
        for layer in self.fcs[:-1]:
            x = np.maximum(layer.infer(x, dtype), 0)
        z = self.fcs[-1].infer(x, dtype)
        return 1.0 / (1.0 + np.exp(-z))

    def params(self):
        out = []
        for layer in self.fcs:
            out += layer.params()
        return out


class Matcher:
    """Description + decision networks plus their construction settings."""

    def __init__(self, in_channels=1, channels=64, mode="accurate",
                 decision_hidden=128, decision_layers=3, seed=0):
        if mode not in ("fast", "accurate"):
            raise ConfigurationError(f"unknown matcher mode {mode!r}")
        rng = np.random.default_rng(seed)
        n_outer = 5 if mode == "accurate" else 4
        self.mode = mode
        self.arch = {
            "in_channels": in_channels, "channels": channels, "mode": mode,
            "decision_hidden": decision_hidden, "decision_layers": decision_layers,
        }
        self.desc = DescriptionNet(in_channels, channels, n_outer, rng)
        self.dec = DecisionNet(channels, decision_hidden, decision_layers, rng)

    @property
    def receptive_field(self):
        return self.desc.receptive_field

    def params(self):
        return self.desc.params() + self.dec.params()

    def save(self, path):
        nn.save_checkpoint(path, {"kind": "matcher", "arch": self.arch}, self.params())

    @classmethod
    def load(cls, path):
        meta, values = nn.load_checkpoint(path)
        if meta.get("kind") != "matcher":
            raise InputError(f"{path}: not a matcher checkpoint")
        model = cls(**meta["arch"], seed=0)
        for p in model.params():
            if p.name not in values:
                raise InputError(f"{path}: missing weights for {p.name}")
            p.value.data = values[p.name]
        return model


def match_score_fast(u_l, u_r):
    """Similarity s = u_l . u_r and the negated cost."""
    u_l, u_r = np.asarray(u_l), np.asarray(u_r)
    if u_l.shape != u_r.shape:
        raise ConfigurationError("descriptor length mismatch")
    s = float(u_l @ u_r)
    return s, -s


def match_score_accurate(matcher, u_l, u_r, dtype=None):
    """Decision-head probability v in (0,1) and the negated cost."""
    u_l, u_r = np.asarray(u_l), np.asarray(u_r)
    if u_l.shape != u_r.shape:
        raise ConfigurationError("descriptor length mismatch")
    if matcher.dec is None:
        raise StateError("matcher has no decision network")
    v = float(matcher.dec.infer(np.concatenate([u_l, u_r]), dtype)[0])
    return v, -v


def hybrid_loss(v_pos, v_neg, s_pos, s_neg, alpha=0.8, margin=0.2,
                xent_as_printed=True):
    """alpha * XEnt + (1 - alpha) * Hinge over matching/non-matching pairs.

    Hinge(s+, s-) = max(0, margin + s- - s+).  The cross-entropy term is
    implemented exactly as printed, XEnt = -(log(v-) + log(1 - v+)); pass
    xent_as_printed=False for the label-swapped convention.
    Inputs are Tensors (scalars or batched); the result is the batch mean.
    """
    for v in (v_pos, v_neg):
        if np.any(v.data <= 0.0) or np.any(v.data >= 1.0):
            raise NumericError("decision outputs must lie strictly inside (0,1)")
    one = nn.constant(1.0)
    hinge = nn.relu(nn.add(nn.constant(margin), nn.sub(s_neg, s_pos)))
    if xent_as_printed:
        xent = nn.neg(nn.add(nn.log(v_neg), nn.log(nn.sub(one, v_pos))))
    else:
        xent = nn.neg(nn.add(nn.log(v_pos), nn.log(nn.sub(one, v_neg))))
    return nn.add(nn.scale(nn.mean_(xent), alpha),
                  nn.scale(nn.mean_(hinge), 1.0 - alpha))


def normalize_image(image):
    """Zero-mean unit-variance per plane; constant planes become zero."""
    image = np.asarray(image, dtype=np.float64)
    planes = image[None] if image.ndim == 2 else image
    out = np.empty_like(planes)
    for i, p in enumerate(planes):
        std = p.std()
        out[i] = (p - p.mean()) / (std if std > 1e-12 else 1.0)
    return out


def describe_grid(matcher, image, dtype=None):
    """Full-image descriptor grid aligned with pixels via edge padding."""
    b = matcher.desc.n_outer
    padded = np.pad(image, ((0, 0), (b, b), (b, b)), mode="edge")
    return matcher.desc.describe(padded, dtype)


def build_cost_volume(matcher, left, right, d_max, mode=None, reference="left",
                      dtype=None, descriptors=None):
    """Matching-cost volume C(p, d) from normalized images.

    With the left image as reference, disparity d matches column x - d in
    the other image; with the right image as reference it matches x + d.
    Out-of-image entries are filled with the maximum finite cost and
    flagged invalid.  Accurate mode performs one decision-head pass per
    disparity over the shared descriptor grids.
    """
    if d_max < 1:
        raise ConfigurationError("d_max must be >= 1")
    mode = mode or matcher.mode
    if reference not in ("left", "right"):
        raise ConfigurationError(f"unknown reference {reference!r}")
    sign = 1 if reference == "left" else -1
    if descriptors is not None:
        u_l, u_r = descriptors
    else:
        u_l = describe_grid(matcher, left, dtype)
        u_r = describe_grid(matcher, right, dtype)
    u_ref, u_oth = (u_l, u_r) if reference == "left" else (u_r, u_l)
    f, h, w = u_ref.shape
    costs = np.zeros((h, w, d_max))
    valid = np.zeros((h, w, d_max), dtype=bool)
    decision_passes = 0
    for d in range(d_max):
        if d >= w:
            continue
        if sign > 0:
            cols = slice(d, w)
            shifted = u_oth[:, :, : w - d] if d else u_oth
            anchor = u_ref[:, :, cols]
        else:
            cols = slice(0, w - d) if d else slice(0, w)
            shifted = u_oth[:, :, d:]
            anchor = u_ref[:, :, cols]
        if anchor.shape[2] == 0:
            continue
        if mode == "fast":
            s = np.einsum("fhw,fhw->hw", anchor, shifted)
            costs[:, cols, d] = -s
        else:
            pair = np.concatenate([anchor, shifted], axis=0)  # (2F, H, Wd)
            flat = pair.reshape(2 * f, -1).T
            v = matcher.dec.infer(flat, dtype)[:, 0].reshape(h, -1)
            costs[:, cols, d] = -v
            decision_passes += 1
        valid[:, cols, d] = True
    if valid.any() and (~valid).any():
        costs[~valid] = costs[valid].max()
    return CostVolume(costs, valid, d_max,
                      {"decision_passes": decision_passes, "mode": mode,
                       "reference": reference})


def _describe_batch(matcher, patches):
    """Tape forward of a (N,C,p,p) patch batch into (N,F) descriptors."""
    out = matcher.desc.forward(nn.constant(patches))
    n, f = out.data.shape[0], out.data.shape[1]
    return nn.reshape(out, (n, f))


def train_matcher(dataset, config, seed=0):
    """Train on matching/non-matching patch pairs with the hybrid loss.

    `dataset` holds left/pos/neg patch arrays of receptive-field size (see
    dataio.sample_match_pairs).  Returns the trained Matcher and a list of
    per-epoch log rows (epoch, loss, per-block lambda triples).
    """
    left, pos, neg = dataset.left, dataset.pos, dataset.neg
    if len(left) == 0:
        raise InputError("empty training dataset")
    matcher = Matcher(in_channels=left.shape[1], channels=config.feature_channels,
                      mode=config.mode, decision_hidden=config.decision_hidden,
                      decision_layers=config.decision_layers, seed=seed)
    rf = matcher.receptive_field
    if left.shape[-2:] != (rf, rf):
        raise InputError(f"patches must be {rf}x{rf} for mode {config.mode!r}")
    rng = np.random.default_rng(seed)
    params = matcher.params()
    log = []
    n = len(left)
    bs = min(config.matcher_batch_size, n)
    for epoch in range(1, config.matcher_epochs + 1):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n - bs + 1, bs):
            idx = order[start:start + bs]
            ul = _describe_batch(matcher, left[idx])
            up = _describe_batch(matcher, pos[idx])
            un = _describe_batch(matcher, neg[idx])
            s_pos = nn.sum_(nn.mul(ul, up), axis=1)
            s_neg = nn.sum_(nn.mul(ul, un), axis=1)
            v_pos = nn.reshape(matcher.dec.forward(nn.concat([ul, up], axis=1)), (-1,))
            v_neg = nn.reshape(matcher.dec.forward(nn.concat([ul, un], axis=1)), (-1,))
            loss = hybrid_loss(v_pos, v_neg, s_pos, s_neg, config.alpha,
                               config.margin, config.xent_as_printed)
            nn.zero_grad(params)
            nn.backward(loss)
            nn.sgd_step(params, config.matcher_lr, config.momentum)
            total += float(loss.data)
            batches += 1
        log.append({
            "epoch": epoch,
            "loss": total / max(batches, 1),
            "lambdas": [blk.lambdas() for blk in matcher.desc.outers],
        })
    return matcher, log


def lambda_report(matcher, log=None):
    """Per-outer-block skip mass lam0 + lam1*lam2.

    Returns current values; with a training log, also the per-epoch
    progression as {"epochs": [...], "per_epoch": [[mass per block], ...]}.
    """
    if not getattr(matcher.desc, "outers", None):
        raise InputError("model has no outer blocks with lambda parameters")
    current = [blk.skip_mass() for blk in matcher.desc.outers]
    report = {"current": current}
    if log:
        report["epochs"] = [row["epoch"] for row in log]
        report["per_epoch"] = [
            [l0 + l1 * l2 for (l0, l1, l2) in row["lambdas"]] for row in log
        ]
    return report


def write_training_log(path, log):
    """Training log CSV: epoch, loss, per-block lam0/lam1/lam2."""
    if not log:
        return
    n_blocks = len(log[0]["lambdas"])
    header = ["epoch", "loss"]
    for i in range(n_blocks):
        header += [f"block{i}_lam0", f"block{i}_lam1", f"block{i}_lam2"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in log:
            flat = [row["epoch"], row["loss"]]
            for triple in row["lambdas"]:
                flat += list(triple)
            writer.writerow(flat)
