import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgessd.anchors import Box, MatchResult, encode, gen_default_boxes, match_anchors
from edgessd.loss import (
    FocalParams,
    focal_conf_loss,
    hnm_conf_loss,
    image_loss,
    localization_loss,
    select_hard_negatives,
    smooth_l1,
    smooth_l1_grad,
    total_loss,
)
from helpers import central_difference, check_gradient, relative_error


def make_match(labels):
    labels = np.asarray(labels, dtype=np.int64)
    return MatchResult(np.where(labels > 0, 0, -1), labels, np.zeros(len(labels)))


def scalar_focal(logits, labels, alpha, gamma):
    total = 0.0
    for z, y in zip(logits, labels):
        e = [math.exp(v - max(z)) for v in z]
        p = max(e[y] / sum(e), 1e-12)
        total += -alpha * (1 - p) ** gamma * math.log(p)
    return total


class TestSmoothL1:
    @pytest.mark.parametrize("x,expect", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5), (1.0, 0.5), (-1.0, 0.5)])
    def test_values(self, x, expect):
        assert smooth_l1(x) == expect

    def test_c1_at_one(self):
        eps = 1e-9
        assert smooth_l1(1 - eps) == pytest.approx(smooth_l1(1 + eps), abs=1e-8)
        np.testing.assert_allclose(smooth_l1_grad([1 - eps, 1 + eps]), [1, 1], atol=1e-8)

    def test_gradient_fd(self, rng):
        x = rng.uniform(-3, 3, 50)
        x = x[np.abs(np.abs(x) - 1) > 1e-3]
        f = lambda: float(np.sum(smooth_l1(x)))  # noqa: E731
        assert check_gradient(f, x, smooth_l1_grad(x), rng, 20) < 1e-4


class TestLocalization:
    def test_perfect_is_zero(self, rng):
        t = rng.normal(size=(5, 4))
        loss, grad = localization_loss(t.copy(), make_match([1, 0, 2, 0, 1]), t)
        assert loss == 0.0 and not grad.any()

    def test_single_residual(self):
        loss, _ = localization_loss(np.array([[0.5, 0, 0, 0]]), make_match([1]), np.zeros((1, 4)))
        assert loss == 0.125

    def test_matches_direct_sum(self, rng):
        labels = rng.integers(0, 3, 20)
        off, tgt = rng.normal(0, 1.5, (20, 4)), rng.normal(size=(20, 4))
        loss, grad = localization_loss(off, make_match(labels), tgt)
        expect = sum(smooth_l1(float(off[i, m] - tgt[i, m])) for i in range(20) if labels[i] > 0 for m in range(4))
        assert loss == pytest.approx(expect, abs=1e-12)
        assert not grad[labels == 0].any()

    def test_invariant_to_negative_offsets(self, rng):
        labels = np.array([1, 0, 0, 2])
        off, tgt = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        a, _ = localization_loss(off, make_match(labels), tgt)
        off[1:3] += 100
        b, _ = localization_loss(off, make_match(labels), tgt)
        assert a == b

    def test_no_positives(self):
        assert localization_loss(np.ones((3, 4)), make_match([0, 0, 0]), np.zeros((3, 4)))[0] == 0.0


class TestFocal:
    def test_confident_true_class(self):
        loss, _ = focal_conf_loss(np.array([[-50.0, 50.0]]), make_match([1]))
        assert loss == pytest.approx(0.0, abs=1e-30)

    def test_half_probability(self):
        loss, _ = focal_conf_loss(np.array([[0.0, 0.0]]), make_match([1]))
        assert loss == pytest.approx(0.75 * 0.25 * math.log(2), abs=1e-12)
        assert loss == pytest.approx(0.129967, abs=1e-5)

    def test_degenerates_to_cross_entropy(self, rng):
        z = rng.normal(0, 2, (30, 4))
        labels = rng.integers(0, 4, 30)
        loss, _ = focal_conf_loss(z, make_match(labels), FocalParams(1.0, 0.0))
        ce = -np.sum(np.log(np.exp(z[np.arange(30), labels]) / np.exp(z).sum(axis=1)))
        assert loss == pytest.approx(ce, abs=1e-12)

    def test_matches_scalar_oracle(self, rng):
        z = rng.normal(0, 3, (25, 5))
        labels = rng.integers(0, 5, 25)
        loss, _ = focal_conf_loss(z, make_match(labels), FocalParams(0.6, 1.5))
        assert loss == pytest.approx(scalar_focal(z, labels, 0.6, 1.5), rel=1e-12)

    def test_below_cross_entropy_termwise(self, rng):
        z = rng.normal(0, 2, (10, 3))
        labels = rng.integers(0, 3, 10)
        for i in range(10):
            m = make_match(labels[i : i + 1])
            f, _ = focal_conf_loss(z[i : i + 1], m, FocalParams(1.0, 2.0))
            ce, _ = focal_conf_loss(z[i : i + 1], m, FocalParams(1.0, 0.0))
            assert f <= ce

    def test_strictly_decreasing_in_true_prob(self):
        vals = [focal_conf_loss(np.array([[0.0, t]]), make_match([1]))[0] for t in np.linspace(-5, 5, 21)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_finite_for_extreme_logits(self):
        loss, grad = focal_conf_loss(np.array([[1e4, -1e4], [-1e4, 1e4]]), make_match([1, 0]))
        assert math.isfinite(loss) and np.isfinite(grad).all()

    @pytest.mark.parametrize("params", [FocalParams(), FocalParams(1.0, 0.0), FocalParams(0.3, 1.0), FocalParams(0.9, 3.5)])
    def test_gradient_fd(self, rng, params):
        z = rng.normal(0, 2, (12, 4))
        labels = rng.integers(0, 4, 12)
        m = make_match(labels)
        _, grad = focal_conf_loss(z, m, params)
        assert check_gradient(lambda: focal_conf_loss(z, m, params)[0], z, grad, rng, 24) < 1e-4

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            FocalParams(alpha=0.0)
        with pytest.raises(ValueError):
            FocalParams(gamma=-1.0)


class TestHardNegatives:
    def test_three_to_one(self, rng):
        labels = np.array([1, 2] + [0] * 10)
        _, _, kept = hnm_conf_loss(rng.normal(size=(12, 3)), make_match(labels), 3.0)
        assert kept.sum() == 6 and not kept[:2].any()

    def test_clamped_to_available(self, rng):
        _, _, kept = hnm_conf_loss(rng.normal(size=(6, 3)), make_match([1, 2, 0, 0, 0, 0]))
        assert kept.tolist() == [False, False, True, True, True, True]

    def test_no_positive_keeps_one(self, rng):
        _, _, kept = hnm_conf_loss(rng.normal(size=(5, 3)), make_match([0] * 5))
        assert kept.sum() == 1

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_sort_oracle(self, seed):
        rng = np.random.default_rng(seed)
        bg_loss = rng.uniform(size=40)
        neg = rng.uniform(size=40) < 0.8
        n_pos = int(rng.integers(0, 8))
        ratio = float(rng.uniform(0.5, 4))
        mask = select_hard_negatives(bg_loss, neg, n_pos, ratio)
        want = min(math.ceil(ratio * n_pos) if n_pos else 1, int(neg.sum()))
        oracle = sorted(np.flatnonzero(neg), key=lambda i: -bg_loss[i])[:want]
        assert sorted(np.flatnonzero(mask).tolist()) == sorted(oracle)

    def test_focal_equals_hnm_with_all_negatives(self, rng):
        z = rng.normal(size=(15, 4))
        m = make_match(rng.integers(0, 4, 15))
        f, fg = focal_conf_loss(z, m, FocalParams(1.0, 0.0))
        h, hg, _ = hnm_conf_loss(z, m, ratio=100.0)
        assert f == pytest.approx(h, abs=1e-12)
        np.testing.assert_allclose(fg, hg, atol=1e-12)

    def test_gradient_fd(self, rng):
        z = rng.normal(size=(12, 3))
        m = make_match([1, 0, 0, 2] + [0] * 8)
        _, grad, kept = hnm_conf_loss(z, m)

        def f():
            # hold the kept set fixed, as the selection is piecewise constant
            loss, _, k = hnm_conf_loss(z, m)
            assert (k == kept).all()
            return loss

        assert check_gradient(f, z, grad, rng, 24) < 1e-4


class TestTotal:
    def test_values(self):
        assert total_loss(0.8, 0.4, 4).total == pytest.approx(0.3)
        assert total_loss(0.0, 0.0, 0).total == 0.0
        assert total_loss(0.7, 0.0, 0).total == 0.7

    def test_negative_count(self):
        with pytest.raises(ValueError):
            total_loss(1.0, 1.0, -1)

    def test_image_loss_recomputed(self, rng):
        anchors = gen_default_boxes([2, 1], 0.3, 0.8)
        gt = np.array([[0.3, 0.35, 0.3, 0.25]])
        z = rng.normal(size=(len(anchors), 3))
        off = rng.normal(0, 0.5, (len(anchors), 4))
        rep, _, _ = image_loss(z, off, anchors.boxes, gt, [2])
        m = match_anchors(anchors.boxes, gt, [2])
        labels = m.labels
        conf = scalar_focal(z, labels, 0.75, 2.0)
        loc = 0.0
        for i in np.flatnonzero(m.positive):
            t = encode(Box(*gt[0]), Box(*anchors.boxes[i]))
            loc += sum(smooth_l1(float(off[i, k] - t[k])) for k in range(4))
        assert rep.n_matched == m.num_positive >= 1
        assert rep.total == pytest.approx((conf + loc) / m.num_positive, rel=1e-12)

    @pytest.mark.parametrize("focal", [FocalParams(), None])
    def test_image_loss_gradient_fd(self, rng, focal):
        anchors = gen_default_boxes([3, 2], 0.2, 0.7)
        gt = np.array([[0.3, 0.3, 0.3, 0.3], [0.7, 0.6, 0.4, 0.2]])
        z = rng.normal(size=(len(anchors), 4))
        off = rng.normal(0, 0.3, (len(anchors), 4))
        _, gz, go = image_loss(z, off, anchors, gt, [1, 3], focal=focal)
        f = lambda: image_loss(z, off, anchors, gt, [1, 3], focal=focal)[0].total  # noqa: E731
        assert check_gradient(f, z, gz, rng, 30) < 1e-4
        # only positive rows carry offset gradient, so probe all of them
        pos = np.flatnonzero(match_anchors(anchors, gt, [1, 3]).positive)
        numeric = [central_difference(f, off.reshape(-1), 4 * i + k) for i in pos for k in range(4)]
        assert relative_error(go[pos].ravel(), numeric) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 1.0), st.floats(0.0, 4.0))
def test_focal_gradient_property(seed, alpha, gamma):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 2, (6, 3))
    m = make_match(rng.integers(0, 3, 6))
    params = FocalParams(alpha, gamma)
    loss, grad = focal_conf_loss(z, m, params)
    assert loss >= 0
    assert check_gradient(lambda: focal_conf_loss(z, m, params)[0], z, grad, rng, 18) < 1e-4
