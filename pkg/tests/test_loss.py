"""Contrastive loss values and gradients, pinned by hand arithmetic."""

import numpy as np
import pytest

from densedesc.correspondence import CorrespondenceSet
from densedesc.errors import NoMatchesError, OutOfBoundsError
from densedesc.geometry import Pixel
from densedesc.loss import (LossConfig, descriptor_at, match_loss,
                            nonmatch_loss, pair_distance, total_loss_and_grad)


def desc_image(values):
    """Build a (H, W, D) descriptor image from a nested list."""
    return np.asarray(values, dtype=np.float64)


def single_pixel_images(vec_a, vec_b):
    """Two 1x1 descriptor images."""
    return (np.asarray(vec_a, dtype=float).reshape(1, 1, -1),
            np.asarray(vec_b, dtype=float).reshape(1, 1, -1))


def corr_set(match_a=(), match_b=(), nonmatch_a=(), nonmatch_b=()):
    def arr(x):
        a = np.asarray(x, dtype=np.float64)
        return a.reshape(-1, 2) if a.size else np.zeros((0, 2))
    return CorrespondenceSet(match_a=arr(match_a), match_b=arr(match_b),
                             nonmatch_a=arr(nonmatch_a), nonmatch_b=arr(nonmatch_b))


class TestDescriptorAt:
    def test_first_pixel(self):
        d = desc_image([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_array_equal(descriptor_at(d, Pixel(0, 0)), [1.0, 2.0])

    def test_rounding(self):
        d = np.arange(12, dtype=float).reshape(2, 3, 2)
        np.testing.assert_array_equal(descriptor_at(d, Pixel(0.4, 0.6)),
                                      d[1, 0])

    def test_out_of_bounds(self):
        d = np.zeros((2, 3, 2))
        with pytest.raises(OutOfBoundsError):
            descriptor_at(d, Pixel(3.0, 0.0))  # u == W


class TestPairDistance:
    def test_identical_zero(self):
        a, b = single_pixel_images([1.0, 2.0], [1.0, 2.0])
        assert pair_distance(a, Pixel(0, 0), b, Pixel(0, 0)) == 0.0

    def test_three_four_five(self):
        a, b = single_pixel_images([0.0, 0.0], [3.0, 4.0])
        assert pair_distance(a, Pixel(0, 0), b, Pixel(0, 0)) == 5.0

    def test_symmetry(self):
        a, b = single_pixel_images([0.3, -1.0], [2.0, 0.5])
        assert pair_distance(a, Pixel(0, 0), b, Pixel(0, 0)) == \
            pair_distance(b, Pixel(0, 0), a, Pixel(0, 0))


class TestMatchLoss:
    def test_single_match_squared(self):
        a, b = single_pixel_images([0.0, 0.0], [3.0, 4.0])
        assert match_loss(a, b, [[0, 0]], [[0, 0]]) == 25.0

    def test_identical_descriptors_zero(self):
        a, b = single_pixel_images([0.7, 0.7], [0.7, 0.7])
        assert match_loss(a, b, [[0, 0]], [[0, 0]]) == 0.0

    def test_duplication_invariance(self):
        a = np.random.default_rng(0).normal(size=(4, 5, 3))
        b = np.random.default_rng(1).normal(size=(4, 5, 3))
        ma = [[1, 2], [3, 0]]
        mb = [[0, 1], [4, 3]]
        once = match_loss(a, b, ma, mb)
        twice = match_loss(a, b, ma * 2, mb * 2)
        assert once == pytest.approx(twice, rel=1e-12)

    def test_empty_raises(self):
        a, b = single_pixel_images([0.0], [0.0])
        with pytest.raises(NoMatchesError):
            match_loss(a, b, [], [])


class TestNonMatchLoss:
    def build(self, distances):
        """1xN images whose column-i pair has the given descriptor distance."""
        n = len(distances)
        a = np.zeros((1, n, 1))
        b = np.asarray(distances, dtype=float).reshape(1, n, 1)
        px = [[i, 0] for i in range(n)]
        return a, b, px

    def test_hand_computed_scaled(self):
        # distances {0.1, 0.6, 0.4}, M = 0.5: hinges {0.4, 0, 0.1},
        # N_hard = 2, loss = (0.16 + 0.01) / 2 = 0.085
        a, b, px = self.build([0.1, 0.6, 0.4])
        loss, n_hard = nonmatch_loss(a, b, px, px, LossConfig(margin=0.5))
        assert n_hard == 2
        assert loss == pytest.approx(0.085)

    def test_hand_computed_unscaled(self):
        # same distances without scaling: (0.16 + 0.01) / 3
        a, b, px = self.build([0.1, 0.6, 0.4])
        loss, n_hard = nonmatch_loss(
            a, b, px, px, LossConfig(margin=0.5, hard_negative_scaling=False))
        assert n_hard == 2
        assert loss == pytest.approx(0.17 / 3)

    def test_saturated_hinge(self):
        a, b, px = self.build([0.5, 0.9, 2.0])
        loss, n_hard = nonmatch_loss(a, b, px, px, LossConfig(margin=0.5))
        assert (loss, n_hard) == (0.0, 0)

    def test_zero_loss_set_same_with_and_without_scaling(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            dists = rng.uniform(0, 1.2, size=6)
            a, b, px = self.build(dists)
            l1, _ = nonmatch_loss(a, b, px, px, LossConfig(margin=0.5))
            l2, _ = nonmatch_loss(a, b, px, px,
                                  LossConfig(margin=0.5,
                                             hard_negative_scaling=False))
            assert (l1 == 0) == (l2 == 0)


class TestTotalLossAndGrad:
    def test_zero_loss_zero_grad(self):
        a = np.full((2, 2, 2), 0.25)
        b = a.copy()
        b[1, 1] = [5.0, 5.0]  # far pair: not a hard negative
        corr = corr_set(match_a=[[0, 0]], match_b=[[0, 0]],
                        nonmatch_a=[[0, 0]], nonmatch_b=[[1, 1]])
        report, ga, gb = total_loss_and_grad(a, b, corr, LossConfig(margin=0.5))
        assert report.l_total == 0.0
        assert (ga == 0).all() and (gb == 0).all()

    def test_single_match_gradient_formula(self):
        a, b = single_pixel_images([1.0, 0.0, 0.0], [0.0, 2.0, 0.0])
        corr = corr_set(match_a=[[0, 0]], match_b=[[0, 0]])
        report, ga, gb = total_loss_and_grad(a, b, corr, LossConfig())
        # d/da of ||a-b||^2 / 1 = 2 (a - b)
        np.testing.assert_allclose(ga[0, 0], [2.0, -4.0, 0.0])
        np.testing.assert_allclose(gb[0, 0], [-2.0, 4.0, 0.0])
        assert report.l_matches == pytest.approx(5.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(6, 8, 3))
        b = rng.normal(size=(6, 8, 3))
        corr = corr_set(
            match_a=rng.integers(0, [8, 6], (5, 2)),
            match_b=rng.integers(0, [8, 6], (5, 2)),
            nonmatch_a=rng.integers(0, [8, 6], (20, 2)),
            nonmatch_b=rng.integers(0, [8, 6], (20, 2)))
        cfg = LossConfig(margin=1.5)
        report, ga, gb = total_loss_and_grad(a, b, corr, cfg)
        h = 1e-6
        for img, grad in ((a, ga), (b, gb)):
            for _ in range(40):
                v, u, c = (int(rng.integers(0, s)) for s in img.shape)
                orig = img[v, u, c]
                img[v, u, c] = orig + h
                lp = total_loss_and_grad(a, b, corr, cfg)[0].l_total
                img[v, u, c] = orig - h
                lm = total_loss_and_grad(a, b, corr, cfg)[0].l_total
                img[v, u, c] = orig
                fd = (lp - lm) / (2 * h)
                an = grad[v, u, c]
                assert abs(fd - an) / max(abs(fd), abs(an), 1e-7) < 1e-5

    def test_duplicate_pixels_accumulate(self):
        a, b = single_pixel_images([1.0, 0.0], [0.0, 0.0])
        corr = corr_set(match_a=[[0, 0], [0, 0]], match_b=[[0, 0], [0, 0]])
        _, ga, _ = total_loss_and_grad(a, b, corr, LossConfig())
        # two matches at the same pixel: each contributes 2 (a-b) / 2
        np.testing.assert_allclose(ga[0, 0], [2.0, 0.0])

    def test_hard_count_bounded(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(4, 4, 2))
        b = rng.normal(size=(4, 4, 2))
        corr = corr_set(nonmatch_a=rng.integers(0, 4, (30, 2)),
                        nonmatch_b=rng.integers(0, 4, (30, 2)))
        report, _, _ = total_loss_and_grad(a, b, corr, LossConfig())
        assert 0 <= report.n_hard_negatives <= report.n_non_matches

    def test_report_sum_invariant(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(4, 4, 2)) * 0.3
        b = rng.normal(size=(4, 4, 2)) * 0.3
        corr = corr_set(match_a=rng.integers(0, 4, (6, 2)),
                        match_b=rng.integers(0, 4, (6, 2)),
                        nonmatch_a=rng.integers(0, 4, (25, 2)),
                        nonmatch_b=rng.integers(0, 4, (25, 2)))
        report, _, _ = total_loss_and_grad(a, b, corr, LossConfig())
        assert report.l_total == pytest.approx(
            report.l_matches + report.l_non_matches, abs=1e-12)

    def test_non_hard_negatives_get_zero_gradient(self):
        a = np.zeros((1, 2, 2))
        b = np.zeros((1, 2, 2))
        b[0, 1] = [3.0, 0.0]  # distance 3 >> margin
        corr = corr_set(nonmatch_a=[[0, 0]], nonmatch_b=[[1, 0]])
        _, ga, gb = total_loss_and_grad(a, b, corr, LossConfig(margin=0.5))
        assert (ga == 0).all() and (gb == 0).all()

    def test_cross_object_sets_have_no_match_term(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(4, 4, 2)) * 0.1
        b = rng.normal(size=(4, 4, 2)) * 0.1
        corr = corr_set(nonmatch_a=rng.integers(0, 4, (10, 2)),
                        nonmatch_b=rng.integers(0, 4, (10, 2)))
        report, _, _ = total_loss_and_grad(a, b, corr, LossConfig())
        assert report.l_matches == 0.0 and report.n_matches == 0
        assert report.l_non_matches > 0

    def test_empty_set_raises(self):
        a, b = single_pixel_images([0.0], [0.0])
        with pytest.raises(ValueError):
            total_loss_and_grad(a, b, corr_set(), LossConfig())

    def test_isometry_invariance(self):
        """Loss is unchanged by a global rotation + translation of both
        descriptor images."""
        rng = np.random.default_rng(9)
        a = rng.normal(size=(5, 6, 3)) * 0.4
        b = rng.normal(size=(5, 6, 3)) * 0.4
        corr = corr_set(match_a=rng.integers(0, [6, 5], (8, 2)),
                        match_b=rng.integers(0, [6, 5], (8, 2)),
                        nonmatch_a=rng.integers(0, [6, 5], (40, 2)),
                        nonmatch_b=rng.integers(0, [6, 5], (40, 2)))
        cfg = LossConfig()
        base, _, _ = total_loss_and_grad(a, b, corr, cfg)
        q, r = np.linalg.qr(rng.normal(size=(3, 3)))
        q *= np.sign(np.diag(r))
        t = rng.normal(size=3)
        moved, _, _ = total_loss_and_grad(a @ q.T + t, b @ q.T + t, corr, cfg)
        assert moved.l_total == pytest.approx(base.l_total, abs=1e-9)
        assert moved.n_hard_negatives == base.n_hard_negatives


class TestLossConfig:
    def test_rejects_nonpositive_margin(self):
        with pytest.raises(ValueError):
            LossConfig(margin=0.0)
