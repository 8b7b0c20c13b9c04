"""Stochastic view corruption for the two-branch encoder."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cflsim.augment import AugmentConfig, binomial_mask, gaussian_noise, make_views
from cflsim.errors import ConfigError
from cflsim.numerics import RngStream


def batch(m=64, d=8, seed=0, low=0.5, high=1.5):
    # values bounded away from zero so masked entries are identifiable
    return np.random.default_rng(seed).uniform(low, high, (m, d))


class TestBinomialMask:
    def test_prob_zero_is_copy(self):
        b = batch()
        out = binomial_mask(b, 0.0, RngStream(seed=0))
        np.testing.assert_array_equal(out, b)
        assert out is not b

    def test_prob_one_zeroes_everything(self):
        out = binomial_mask(batch(), 1.0, RngStream(seed=0))
        np.testing.assert_array_equal(out, 0.0)

    def test_mask_rate_within_three_sigma(self):
        b = batch(m=200, d=50, seed=1)
        p = 0.2
        out = binomial_mask(b, p, RngStream(seed=2))
        n = b.size
        hits = int((out == 0.0).sum())
        sigma = np.sqrt(n * p * (1 - p))
        assert abs(hits - n * p) <= 3 * sigma

    def test_two_draws_independent(self):
        # joint mask probability of two independent draws is p^2
        b = batch(m=300, d=40, seed=3)
        p = 0.3
        s = RngStream(seed=4)
        m1 = binomial_mask(b, p, s.child(tag="m1")) == 0.0
        m2 = binomial_mask(b, p, s.child(tag="m2")) == 0.0
        n = b.size
        joint = int((m1 & m2).sum())
        sigma = np.sqrt(n * p * p * (1 - p * p))
        assert abs(joint - n * p * p) <= 3 * sigma

    def test_no_mutation(self):
        b = batch()
        before = b.copy()
        binomial_mask(b, 0.5, RngStream(seed=0))
        np.testing.assert_array_equal(b, before)

    def test_deterministic(self):
        b = batch()
        a1 = binomial_mask(b, 0.4, RngStream(seed=9))
        a2 = binomial_mask(b, 0.4, RngStream(seed=9))
        np.testing.assert_array_equal(a1, a2)

    def test_swap_mode_uses_same_column(self):
        b = batch(m=30, d=5, seed=5)
        out = binomial_mask(b, 0.5, RngStream(seed=6), mode="swap")
        for j in range(b.shape[1]):
            col_values = set(b[:, j].tolist())
            assert set(out[:, j].tolist()) <= col_values

    def test_bad_prob(self):
        with pytest.raises(ConfigError):
            binomial_mask(batch(), 1.5, RngStream(seed=0))


class TestGaussianNoise:
    def test_zero_level_identity(self):
        b = batch()
        np.testing.assert_array_equal(gaussian_noise(b, 0.0, RngStream(seed=0)), b)

    def test_moments(self):
        b = np.zeros((500, 40))
        out = gaussian_noise(b, 0.25, RngStream(seed=1))
        assert abs(out.mean()) < 0.01
        assert abs(out.std() - 0.25) < 0.01

    def test_no_mutation(self):
        b = batch()
        before = b.copy()
        gaussian_noise(b, 0.3, RngStream(seed=2))
        np.testing.assert_array_equal(b, before)


class TestMakeViews:
    def test_shapes_and_types(self):
        b = batch()
        v1, v2 = make_views(b, AugmentConfig(), RngStream(seed=0))
        assert v1.shape == b.shape
        assert v2.shape == b.shape

    def test_views_differ_from_input_and_each_other(self):
        b = batch()
        v1, v2 = make_views(b, AugmentConfig(mask_prob=0.3, noise_level=0.2),
                            RngStream(seed=1))
        assert not np.array_equal(v1, b)
        assert not np.array_equal(v2, b)
        assert not np.array_equal(v1, v2)

    def test_first_view_is_pure_mask(self):
        b = batch()
        v1, _ = make_views(b, AugmentConfig(mask_prob=0.3, noise_level=0.2),
                           RngStream(seed=2))
        # every entry of view 1 is either kept or zeroed, never perturbed
        kept = v1 == b
        zeroed = v1 == 0.0
        assert np.all(kept | zeroed)

    def test_second_view_gaussian_toggle(self):
        b = batch()
        cfg = AugmentConfig(mask_prob=0.3, noise_level=0.2,
                            second_view_gaussian=False)
        _, v2 = make_views(b, cfg, RngStream(seed=3))
        kept = v2 == b
        zeroed = v2 == 0.0
        assert np.all(kept | zeroed)

    def test_deterministic_and_no_mutation(self):
        b = batch()
        before = b.copy()
        a = make_views(b, AugmentConfig(), RngStream(seed=4))
        c = make_views(b, AugmentConfig(), RngStream(seed=4))
        np.testing.assert_array_equal(b, before)
        np.testing.assert_array_equal(a[0], c[0])
        np.testing.assert_array_equal(a[1], c[1])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_noise_free_config_keeps_views_in_value_set(self, seed):
        b = batch(seed=seed % 100)
        cfg = AugmentConfig(mask_prob=0.5, noise_level=0.0)
        v1, v2 = make_views(b, cfg, RngStream(seed=seed))
        for v in (v1, v2):
            assert np.all((v == b) | (v == 0.0))
