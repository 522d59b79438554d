"""Estimator checks: derangements, closed-form values, gradients, ordering."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ufd.mi import (
    Discriminator,
    bivariate_gaussian_batch,
    disc_score,
    dv_mi,
    dv_mi_grads,
    gaussian_analytic_mi,
    jsd_mi,
    jsd_mi_grads,
    sample_derangement,
    train_mi_estimator,
    validate_pairing,
)
from ufd.nn import ShapeError, finite_diff_check, make_rng, spawn_rng

TWO_LN2 = 2.0 * math.log(2.0)


def tiny_relu_disc() -> Discriminator:
    """T(a, b) = relu(a + b) for scalar inputs; scores are easy to hand-check."""
    disc = Discriminator(1, 1, 1)
    disc.layer1.weight[...] = [[1.0, 1.0]]
    disc.layer2.weight[...] = [[1.0]]
    return disc


class TestDerangement:
    @given(st.integers(min_value=2, max_value=64), st.integers(min_value=0, max_value=2**31))
    @settings(max_examples=200, deadline=None)
    def test_is_fixed_point_free_permutation(self, n, seed):
        neg = sample_derangement(n, make_rng(seed))
        assert sorted(neg) == list(range(n))
        assert not np.any(neg == np.arange(n))

    def test_n2_has_single_option(self):
        np.testing.assert_array_equal(sample_derangement(2, make_rng(0)), [1, 0])

    def test_n1_rejected(self):
        with pytest.raises(ShapeError):
            sample_derangement(1, make_rng(0))

    def test_n3_covers_both_cycles_evenly(self):
        # the only derangements of 3 elements are the two 3-cycles; over 1e5
        # draws each should appear with frequency 0.5 +/- 0.02
        rng = make_rng(2024)
        counts = {(1, 2, 0): 0, (2, 0, 1): 0}
        draws = 100_000
        for _ in range(draws):
            counts[tuple(sample_derangement(3, rng))] += 1
        assert counts[(1, 2, 0)] / draws == pytest.approx(0.5, abs=0.02)
        assert counts[(2, 0, 1)] / draws == pytest.approx(0.5, abs=0.02)

    def test_validate_pairing_rejects_bad_inputs(self):
        with pytest.raises(ShapeError):
            validate_pairing(np.array([0, 1, 2]), 3)  # identity has fixed points
        with pytest.raises(ShapeError):
            validate_pairing(np.array([1, 1, 0]), 3)  # not a permutation
        with pytest.raises(ShapeError):
            validate_pairing(np.array([1, 0]), 3)  # wrong length


class TestClosedFormValues:
    def test_zero_scorer_gives_minus_two_ln_two(self):
        # with T == 0: -softplus(0) - softplus(0) = -2 ln 2 exactly
        disc = Discriminator(3, 3, 4)  # parameters default to zero
        rng = make_rng(1)
        x = rng.standard_normal((6, 3))
        y = rng.standard_normal((6, 3))
        neg = sample_derangement(6, rng)
        assert abs(jsd_mi(disc, x, y, neg) - (-TWO_LN2)) <= 1e-12

    def test_zero_scorer_dv_is_zero(self):
        disc = Discriminator(2, 2, 4)
        rng = make_rng(2)
        x = rng.standard_normal((5, 2))
        y = rng.standard_normal((5, 2))
        neg = sample_derangement(5, rng)
        assert abs(dv_mi(disc, x, y, neg)) <= 1e-12

    def test_jsd_hand_computed_scores(self):
        # T = relu(a+b); x=[1,2], y=[3,5], neg=[1,0]
        # joint scores [4, 7], negative scores [T(2,3), T(1,5)] = [5, 6]
        disc = tiny_relu_disc()
        x = np.array([[1.0], [2.0]])
        y = np.array([[3.0], [5.0]])
        neg = np.array([1, 0])
        sp = lambda v: math.log1p(math.exp(v))
        expected = (-sp(-4.0) - sp(-7.0)) / 2.0 - (sp(5.0) + sp(6.0)) / 2.0
        assert jsd_mi(disc, x, y, neg) == pytest.approx(expected, rel=1e-14)

    def test_dv_hand_computed_scores(self):
        disc = tiny_relu_disc()
        x = np.array([[1.0], [2.0]])
        y = np.array([[3.0], [5.0]])
        neg = np.array([1, 0])
        expected = (4.0 + 7.0) / 2.0 - math.log((math.exp(5.0) + math.exp(6.0)) / 2.0)
        assert dv_mi(disc, x, y, neg) == pytest.approx(expected, rel=1e-14)

    def test_dv_stable_for_huge_scores(self):
        disc = tiny_relu_disc()
        x = np.array([[500.0], [600.0]])
        y = np.array([[500.0], [400.0]])
        val = dv_mi(disc, x, y, np.array([1, 0]))
        assert np.isfinite(val)

    def test_score_shape_checks(self):
        disc = Discriminator(2, 3, 4)
        with pytest.raises(ShapeError):
            disc_score(disc, np.ones((2, 2)), np.ones((3, 3)))
        with pytest.raises(ShapeError):
            disc_score(disc, np.ones((2, 3)), np.ones((2, 3)))

    def test_jsd_is_always_nonpositive(self):
        rng = make_rng(3)
        for seed in range(10):
            disc = Discriminator(4, 4, 6).init_params(spawn_rng(seed, 0))
            x = rng.standard_normal((8, 4)) * 3
            y = rng.standard_normal((8, 4)) * 3
            neg = sample_derangement(8, rng)
            assert jsd_mi(disc, x, y, neg) < 0.0


class TestEstimatorGradients:
    @pytest.mark.parametrize("grads_fn,value_fn", [
        (jsd_mi_grads, jsd_mi),
        (dv_mi_grads, dv_mi),
    ])
    def test_matches_finite_differences(self, grads_fn, value_fn):
        rng = make_rng(12)
        disc = Discriminator(3, 2, 5).init_params(rng)
        x = rng.standard_normal((4, 3))
        y = rng.standard_normal((4, 2))
        neg = sample_derangement(4, rng)

        disc.zero_grads()
        _, dx, dy = grads_fn(disc, x, y, neg)
        params = [x, y] + [p for _, p, _ in disc.parameters()]
        grads = [dx, dy] + [g for _, _, g in disc.parameters()]
        err = finite_diff_check(lambda: value_fn(disc, x, y, neg), params, grads)
        assert err < 1e-6

    def test_scale_multiplies_gradients(self):
        rng = make_rng(13)
        disc = Discriminator(2, 2, 4).init_params(rng)
        x = rng.standard_normal((5, 2))
        y = rng.standard_normal((5, 2))
        neg = sample_derangement(5, rng)

        disc.zero_grads()
        v1, dx1, dy1 = jsd_mi_grads(disc, x, y, neg, scale=1.0)
        g1 = [g.copy() for _, _, g in disc.parameters()]
        disc.zero_grads()
        v2, dx2, dy2 = jsd_mi_grads(disc, x, y, neg, scale=-2.5)
        assert v1 == v2  # the reported estimate ignores the scale
        np.testing.assert_allclose(dx2, -2.5 * dx1, rtol=1e-12)
        np.testing.assert_allclose(dy2, -2.5 * dy1, rtol=1e-12)
        for (_, _, g2), g1_snap in zip(disc.parameters(), g1):
            np.testing.assert_allclose(g2, -2.5 * g1_snap, rtol=1e-12)

    def test_value_matches_forward_only_path(self):
        rng = make_rng(14)
        disc = Discriminator(2, 2, 4).init_params(rng)
        x = rng.standard_normal((6, 2))
        y = rng.standard_normal((6, 2))
        neg = sample_derangement(6, rng)
        v_grad, _, _ = jsd_mi_grads(disc, x, y, neg)
        assert v_grad == pytest.approx(jsd_mi(disc, x, y, neg), rel=1e-14)
        v_grad, _, _ = dv_mi_grads(disc, x, y, neg)
        assert v_grad == pytest.approx(dv_mi(disc, x, y, neg), rel=1e-14)


class TestGaussianBenchmark:
    def test_analytic_values(self):
        assert gaussian_analytic_mi(0.0) == 0.0
        assert gaussian_analytic_mi(0.5) == pytest.approx(-0.5 * math.log(0.75), rel=1e-14)
        assert gaussian_analytic_mi(0.9) == pytest.approx(-0.5 * math.log(0.19), rel=1e-14)
        with pytest.raises(ShapeError):
            gaussian_analytic_mi(1.0)

    def test_sampler_correlation(self):
        rng = make_rng(77)
        x, y = bivariate_gaussian_batch(rng, 200_000, 0.8)
        assert np.corrcoef(x[:, 0], y[:, 0])[0, 1] == pytest.approx(0.8, abs=0.01)
        assert np.std(y) == pytest.approx(1.0, abs=0.01)

    def test_trained_critic_separates_dependence(self):
        # after identical budgets, estimates on correlated data must exceed
        # estimates on independent data by a clear margin
        budget = dict(steps=1200, batch=64, hidden=64)
        gaps = []
        for seed in range(5):
            hi = train_mi_estimator("dv", 0.9, seed=seed, **budget).estimate
            lo = train_mi_estimator("dv", 0.0, seed=seed, **budget).estimate
            gaps.append(hi - lo)
        assert float(np.mean(gaps)) >= 0.2

    def test_training_is_deterministic(self):
        a = train_mi_estimator("dv", 0.5, seed=3, steps=50).estimate
        b = train_mi_estimator("dv", 0.5, seed=3, steps=50).estimate
        assert a == b

    def test_unknown_estimator_rejected(self):
        with pytest.raises(ShapeError):
            train_mi_estimator("nwj", 0.5, seed=0, steps=1)
