import csv

import numpy as np
import pytest

from stereopipe import dataio, matchnet, nncore as nn, pipeline
from stereopipe.errors import ConfigurationError, InputError, NumericError
from conftest import small_config


def make_outer(channels=3, seed=0, lam=None):
    rng = np.random.default_rng(seed)
    block = matchnet.OuterBlock(channels, rng, "blk")
    if lam is not None:
        l0, l1, l2 = lam
        block.lam0.value.data = np.array(l0)
        block.inner1.lam.value.data = np.array(l1)
        block.inner2.lam.value.data = np.array(l2)
    return block


def unrolled_outer(block, y0):
    """Independently coded expansion of the two-level skip recursion:
    (l0 + l2*l1)*y0 + l2*f1(y0) + f2(l1*y0 + f1(y0))."""
    l0, l1, l2 = block.lambdas()
    f1 = block.inner1.residual_infer(y0)
    f2 = block.inner2.residual_infer(l1 * y0 + f1)
    return (l0 + l2 * l1) * y0 + l2 * f1 + f2


def zero_params(params):
    for p in params:
        p.value.data = np.zeros_like(p.value.data)


class TestBlocks:
    def test_inner_block_preserves_shape(self):
        rng = np.random.default_rng(0)
        block = matchnet.InnerBlock(4, rng, "b")
        x = rng.normal(size=(4, 6, 7))
        assert block.infer(x).shape == x.shape

    def test_outer_block_preserves_shape(self):
        block = make_outer(channels=2, seed=1)
        x = np.random.default_rng(1).normal(size=(2, 5, 5))
        assert block.infer(x).shape == x.shape

    def test_unrolling_identity_random(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            block = make_outer(3, seed, lam=rng.normal(size=3))
            y0 = rng.normal(size=(3, 6, 6))
            got = block.infer(y0)
            want = unrolled_outer(block, y0)
            assert np.abs(got - want).max() < 1e-9

    def test_zero_residual_scales_input(self):
        block = make_outer(2, 0, lam=(0.3, 0.5, 0.7))
        zero_params(block.inner1.params()[:-1])
        zero_params(block.inner2.params()[:-1])
        y0 = np.random.default_rng(2).normal(size=(2, 4, 4))
        assert np.allclose(block.infer(y0), (0.3 + 0.5 * 0.7) * y0)

    def test_all_lambda_one_zero_residual_doubles_input(self):
        block = make_outer(2, 0)
        zero_params(block.inner1.params()[:-1])
        zero_params(block.inner2.params()[:-1])
        y0 = np.random.default_rng(3).normal(size=(2, 4, 4))
        assert np.allclose(block.infer(y0), 2.0 * y0)

    def test_lambda_one_matches_plain_residual_bitwise(self):
        block = make_outer(3, 4)  # lambdas are initialized to exactly 1
        y0 = np.random.default_rng(4).normal(size=(3, 5, 5))
        y1 = block.inner1.residual_infer(y0) + y0
        vanilla = (block.inner2.residual_infer(y1) + y1) + y0
        assert np.array_equal(block.infer(y0), vanilla)

    def test_skip_mass(self):
        block = make_outer(2, 0, lam=(0.5, 0.2, 0.1))
        assert block.skip_mass() == pytest.approx(0.52)

    def test_tape_forward_matches_infer(self):
        block = make_outer(3, 5, lam=(0.9, 1.1, 0.8))
        y0 = np.random.default_rng(5).normal(size=(3, 6, 6))
        tape = block.forward(nn.constant(y0))
        assert np.abs(tape.data - block.infer(y0)).max() < 1e-12


class TestDescriptionNet:
    def test_receptive_field_sizes(self):
        accurate = matchnet.Matcher(1, 8, "accurate", seed=0)
        fast = matchnet.Matcher(1, 8, "fast", seed=0)
        assert accurate.receptive_field == 11
        assert fast.receptive_field == 9

    def test_accurate_11x11_collapses_to_single_pixel(self):
        m = matchnet.Matcher(1, 8, "accurate", seed=0)
        out = m.desc.describe(np.random.default_rng(0).normal(size=(1, 11, 11)))
        assert out.shape == (8, 1, 1)

    def test_fast_9x9_collapses_to_single_pixel(self):
        m = matchnet.Matcher(1, 8, "fast", seed=0)
        out = m.desc.describe(np.random.default_rng(0).normal(size=(1, 9, 9)))
        assert out.shape == (8, 1, 1)

    def test_zero_net_zero_image_gives_zero_descriptor(self):
        m = matchnet.Matcher(1, 4, "fast", seed=0)
        zero_params(m.desc.params())
        out = m.desc.describe(np.zeros((1, 9, 9)))
        assert np.all(out == 0.0)

    def test_too_small_image_rejected(self):
        m = matchnet.Matcher(1, 4, "fast", seed=0)
        with pytest.raises(InputError):
            m.desc.describe(np.zeros((1, 8, 8)))

    def test_receptive_field_locality_exact(self):
        m = matchnet.Matcher(1, 8, "fast", seed=3)
        rng = np.random.default_rng(7)
        image = rng.normal(size=(1, 13, 13))
        base = m.desc.describe(image)[:, 2, 2].copy()
        # center output (2,2) sees input rows/cols 2..10 only
        for y, x in [(0, 0), (0, 12), (12, 0), (12, 12), (1, 6), (6, 11)]:
            poked = image.copy()
            poked[0, y, x] += 10.0
            assert np.array_equal(m.desc.describe(poked)[:, 2, 2], base)

    def test_descriptors_unit_norm(self):
        m = matchnet.Matcher(1, 8, "fast", seed=1)
        out = m.desc.describe(np.random.default_rng(1).normal(size=(1, 11, 15)))
        norms = np.sqrt((out ** 2).sum(axis=0))
        assert np.allclose(norms, 1.0, atol=1e-9)

    def test_describe_deterministic(self):
        m = matchnet.Matcher(1, 8, "fast", seed=2)
        img = np.random.default_rng(2).normal(size=(1, 9, 12))
        assert np.array_equal(m.desc.describe(img), m.desc.describe(img))


class TestScores:
    def test_fast_identical_unit_vectors(self):
        u = np.array([1.0, 0.0, 0.0])
        s, cost = matchnet.match_score_fast(u, u)
        assert s == 1.0 and cost == -1.0

    def test_fast_orthogonal(self):
        s, _ = matchnet.match_score_fast([1.0, 0.0], [0.0, 1.0])
        assert s == 0.0

    def test_fast_dot_example(self):
        s, cost = matchnet.match_score_fast([1.0, 2.0], [3.0, 4.0])
        assert s == 11.0 and cost == -11.0

    def test_fast_length_mismatch(self):
        with pytest.raises(ConfigurationError):
            matchnet.match_score_fast([1.0], [1.0, 2.0])

    def test_accurate_zero_net_gives_half(self):
        m = matchnet.Matcher(1, 4, "accurate", seed=0)
        zero_params(m.dec.params())
        v, cost = matchnet.match_score_accurate(m, np.ones(4), np.ones(4))
        assert v == pytest.approx(0.5)
        assert cost == pytest.approx(-0.5)

    def test_accurate_deterministic(self):
        m = matchnet.Matcher(1, 4, "accurate", seed=5)
        u = np.random.default_rng(5).normal(size=4)
        a = matchnet.match_score_accurate(m, u, u)
        b = matchnet.match_score_accurate(m, u, u)
        assert a == b


class TestHybridLoss:
    @staticmethod
    def loss(v_pos, v_neg, s_pos, s_neg, **kw):
        t = lambda x: nn.constant(np.atleast_1d(np.asarray(x, float)))
        return float(matchnet.hybrid_loss(t(v_pos), t(v_neg), t(s_pos),
                                          t(s_neg), **kw).data)

    def test_hinge_zero_at_margin(self):
        got = self.loss(0.5, 0.5, 1.0, 0.8, alpha=0.0)
        assert got == pytest.approx(0.0)

    def test_hinge_equal_scores_gives_margin(self):
        got = self.loss(0.5, 0.5, 0.3, 0.3, alpha=0.0)
        assert got == pytest.approx(0.2)

    def test_hinge_positive_below_margin(self):
        got = self.loss(0.5, 0.5, 0.3, 0.25, alpha=0.0, margin=0.2)
        assert got == pytest.approx(0.15)

    def test_alpha_one_is_xent_only(self):
        vp, vn = 0.7, 0.4
        want = -(np.log(vn) + np.log(1 - vp))
        got = self.loss(vp, vn, 5.0, -5.0, alpha=1.0)
        assert got == pytest.approx(want)

    def test_xent_orientation_flag(self):
        vp, vn = 0.9, 0.1
        printed = self.loss(vp, vn, 0.0, 0.0, alpha=1.0, xent_as_printed=True)
        swapped = self.loss(vp, vn, 0.0, 0.0, alpha=1.0, xent_as_printed=False)
        assert printed == pytest.approx(-(np.log(vn) + np.log(1 - vp)))
        assert swapped == pytest.approx(-(np.log(vp) + np.log(1 - vn)))

    def test_default_weighting(self):
        vp, vn, sp, sn = 0.6, 0.3, 0.1, 0.4
        xent = -(np.log(vn) + np.log(1 - vp))
        hinge = max(0.0, 0.2 + sn - sp)
        assert self.loss(vp, vn, sp, sn) == pytest.approx(0.8 * xent + 0.2 * hinge)

    def test_out_of_range_probability_guard(self):
        with pytest.raises(NumericError):
            self.loss(1.0, 0.5, 0.0, 0.0)
        with pytest.raises(NumericError):
            self.loss(0.5, 0.0, 0.0, 0.0)


class TestCostVolume:
    def test_identical_images_zero_disparity(self):
        cfg = small_config(d_max=1)
        m = matchnet.Matcher(1, 8, "fast", seed=0)
        img = matchnet.normalize_image(
            np.random.default_rng(0).normal(size=(1, 16, 20)))
        vol = matchnet.build_cost_volume(m, img, img, 1, "fast")
        disp = np.argmin(vol.costs, axis=2)
        assert np.all(disp == 0)
        assert cfg.d_max == 1

    def test_out_of_image_entries_invalid_and_max_filled(self):
        m = matchnet.Matcher(1, 4, "fast", seed=1)
        rng = np.random.default_rng(1)
        ln = matchnet.normalize_image(rng.normal(size=(1, 12, 16)))
        rn = matchnet.normalize_image(rng.normal(size=(1, 12, 16)))
        vol = matchnet.build_cost_volume(m, ln, rn, 6, "fast")
        for d in range(6):
            assert not vol.valid[:, :d, d].any()
            assert vol.valid[:, d:, d].all()
        assert np.all(vol.costs[~vol.valid] == vol.costs[vol.valid].max())

    def test_right_reference_shifts_other_way(self):
        m = matchnet.Matcher(1, 4, "fast", seed=2)
        rng = np.random.default_rng(2)
        ln = matchnet.normalize_image(rng.normal(size=(1, 12, 16)))
        rn = matchnet.normalize_image(rng.normal(size=(1, 12, 16)))
        vol = matchnet.build_cost_volume(m, ln, rn, 5, "fast", reference="right")
        for d in range(1, 5):
            assert not vol.valid[:, -d:, d].any()
            assert vol.valid[:, :-d, d].all()
        u_l = matchnet.describe_grid(m, ln)
        u_r = matchnet.describe_grid(m, rn)
        y, x, d = 4, 3, 2
        want = -float(u_r[:, y, x] @ u_l[:, y, x + d])
        assert vol.costs[y, x, d] == pytest.approx(want, abs=1e-12)

    def test_descriptor_reuse_matches_per_patch(self):
        m = matchnet.Matcher(1, 6, "fast", seed=3)
        rng = np.random.default_rng(3)
        ln = matchnet.normalize_image(rng.normal(size=(1, 12, 18)))
        rn = matchnet.normalize_image(rng.normal(size=(1, 12, 18)))
        vol = matchnet.build_cost_volume(m, ln, rn, 4, "fast")
        b = m.desc.n_outer
        pl = np.pad(ln, ((0, 0), (b, b), (b, b)), mode="edge")
        pr = np.pad(rn, ((0, 0), (b, b), (b, b)), mode="edge")
        rf = m.receptive_field
        for y, x, d in [(0, 5, 0), (3, 7, 2), (11, 17, 3), (6, 3, 1), (8, 10, 3)]:
            if x - d < 0:
                continue
            u_l = m.desc.describe(pl[:, y:y + rf, x:x + rf])[:, 0, 0]
            u_r = m.desc.describe(pr[:, y:y + rf, x - d:x - d + rf])[:, 0, 0]
            assert vol.costs[y, x, d] == pytest.approx(-float(u_l @ u_r),
                                                       abs=1e-9)

    def test_accurate_mode_one_decision_pass_per_disparity(self):
        m = matchnet.Matcher(1, 4, "accurate", seed=4)
        rng = np.random.default_rng(4)
        ln = matchnet.normalize_image(rng.normal(size=(1, 12, 14)))
        rn = matchnet.normalize_image(rng.normal(size=(1, 12, 14)))
        vol = matchnet.build_cost_volume(m, ln, rn, 5, "accurate")
        assert vol.meta["decision_passes"] == 5

    def test_bad_d_max(self):
        m = matchnet.Matcher(1, 4, "fast", seed=0)
        with pytest.raises(ConfigurationError):
            matchnet.build_cost_volume(m, np.zeros((1, 12, 12)),
                                       np.zeros((1, 12, 12)), 0)


class TestNormalizeImage:
    def test_zero_mean_unit_variance(self):
        img = np.random.default_rng(0).normal(3.0, 2.0, size=(1, 10, 12))
        out = matchnet.normalize_image(img)
        assert abs(out.mean()) < 1e-12
        assert out.std() == pytest.approx(1.0)

    def test_constant_plane_becomes_zero(self):
        out = matchnet.normalize_image(np.full((1, 6, 6), 4.2))
        assert np.allclose(out, 0.0, atol=1e-12)


@pytest.fixture(scope="module")
def toy_run():
    cfg = small_config(feature_channels=8, matcher_epochs=5,
                       matcher_batch_size=32)
    scenes = pipeline.training_scenes(cfg, 2, 48, 96, seed=11)
    ds = pipeline.sample_pairs_from_scenes(scenes, 9, 400, cfg)
    matcher, log = matchnet.train_matcher(ds, cfg, seed=0)
    return cfg, ds, matcher, log


class TestTraining:
    def test_loss_decreases(self, toy_run):
        _, _, _, log = toy_run
        assert log[-1]["loss"] < log[0]["loss"]

    def test_lambdas_at_init_are_one(self):
        m = matchnet.Matcher(1, 4, "fast", seed=0)
        report = matchnet.lambda_report(m)
        assert report["current"] == [2.0] * 4

    def test_lambda_gradients_nonzero(self, toy_run):
        cfg, ds, _, _ = toy_run
        m = matchnet.Matcher(1, 8, "fast", seed=9)
        ul = matchnet._describe_batch(m, ds.left[:16])
        up = matchnet._describe_batch(m, ds.pos[:16])
        un = matchnet._describe_batch(m, ds.neg[:16])
        s_pos = nn.sum_(nn.mul(ul, up), axis=1)
        s_neg = nn.sum_(nn.mul(ul, un), axis=1)
        vp = nn.reshape(m.dec.forward(nn.concat([ul, up], axis=1)), (-1,))
        vn = nn.reshape(m.dec.forward(nn.concat([ul, un], axis=1)), (-1,))
        loss = matchnet.hybrid_loss(vp, vn, s_pos, s_neg, cfg.alpha, cfg.margin,
                                    xent_as_printed=False)
        nn.backward(loss)
        lams = [p for p in m.params() if p.name.endswith("lam")
                or p.name.endswith("lam0")]
        assert lams
        for p in lams:
            assert p.grad is not None and abs(float(p.grad)) > 0.0

    def test_positive_scores_beat_negative_after_training(self, toy_run):
        _, ds, matcher, _ = toy_run
        ul = matchnet._describe_batch(matcher, ds.left).data
        up = matchnet._describe_batch(matcher, ds.pos).data
        un = matchnet._describe_batch(matcher, ds.neg).data
        s_pos = (ul * up).sum(axis=1)
        s_neg = (ul * un).sum(axis=1)
        assert (s_pos > s_neg).mean() > 0.9

    def test_decision_net_separates_toy_descriptors(self):
        rng = np.random.default_rng(0)
        dim, n = 8, 120
        anchors = rng.normal(size=(n, dim))
        anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
        neg = np.roll(anchors, 7, axis=0)
        dec = matchnet.DecisionNet(dim, 16, 2, rng)
        params = dec.params()
        for _ in range(300):
            vp = nn.reshape(dec.forward(nn.constant(
                np.concatenate([anchors, anchors], axis=1))), (-1,))
            vn = nn.reshape(dec.forward(nn.constant(
                np.concatenate([anchors, neg], axis=1))), (-1,))
            one = nn.constant(1.0)
            loss = nn.neg(nn.add(nn.mean_(nn.log(vp)),
                                 nn.mean_(nn.log(nn.sub(one, vn)))))
            nn.zero_grad(params)
            nn.backward(loss)
            nn.sgd_step(params, 0.5, 0.9)
        vp = dec.infer(np.concatenate([anchors, anchors], axis=1))[:, 0]
        vn = dec.infer(np.concatenate([anchors, neg], axis=1))[:, 0]
        assert (vp > vn).mean() >= 0.95

    def test_empty_dataset_rejected(self):
        cfg = small_config()
        empty = dataio.MatchPairDataset(*[np.zeros((0, 1, 9, 9))] * 3)
        with pytest.raises(InputError):
            matchnet.train_matcher(empty, cfg, seed=0)

    def test_wrong_patch_size_rejected(self):
        cfg = small_config()
        bad = dataio.MatchPairDataset(*[np.zeros((4, 1, 7, 7))] * 3)
        with pytest.raises(InputError):
            matchnet.train_matcher(bad, cfg, seed=0)

    def test_training_log_csv(self, toy_run, tmp_path):
        _, _, _, log = toy_run
        path = tmp_path / "log.csv"
        matchnet.write_training_log(path, log)
        with open(path) as f:
            rows = list(csv.reader(f))
        assert rows[0][:2] == ["epoch", "loss"]
        assert len(rows) == len(log) + 1

    def test_lambda_report_with_log(self, toy_run):
        _, _, matcher, log = toy_run
        report = matchnet.lambda_report(matcher, log)
        assert len(report["per_epoch"]) == len(log)
        assert len(report["per_epoch"][0]) == len(matcher.desc.outers)

    def test_checkpoint_roundtrip_identical_descriptors(self, toy_run, tmp_path):
        _, _, matcher, _ = toy_run
        path = tmp_path / "m.ckpt"
        matcher.save(path)
        loaded = matchnet.Matcher.load(path)
        img = np.random.default_rng(1).normal(size=(1, 9, 13))
        assert np.array_equal(matcher.desc.describe(img),
                              loaded.desc.describe(img))

    def test_load_rejects_wrong_kind(self, tmp_path):
        from stereopipe import gdn
        model = gdn.GdnModel(4, (8, 8, 8, 8), 8, seed=0)
        path = tmp_path / "g.ckpt"
        model.save(path)
        with pytest.raises(InputError):
            matchnet.Matcher.load(path)
