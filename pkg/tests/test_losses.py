import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ckdlab import autodiff as ad
from ckdlab import losses
from ckdlab.losses import (LogitPair, PosteriorPair, ckd_loss, classification_loss,
                           decomposed_objective, entropy, f2p_loss, full_loss, pair_gradients,
                           regularizer_R, smooth_label, softmax_with_temperature,
                           theorem1_residual)


def _softmax_scalar(z, tau=1.0):
    e = [math.exp(v / tau) for v in z]
    s = sum(e)
    return [v / s for v in e]


def _kl_scalar(a, b):
    return sum(x * math.log(x / y) for x, y in zip(a, b))


def _lse_scalar(z):
    m = max(z)
    return m + math.log(sum(math.exp(v - m) for v in z))


logit_vectors = arrays(np.float64, st.integers(2, 12),
                       elements=st.floats(-30, 30, allow_nan=False, allow_infinity=False))


class TestSoftmax:
    def test_uniform_for_equal_logits(self):
        for tau in (0.3, 1.0, 7.0):
            np.testing.assert_allclose(softmax_with_temperature(np.zeros(3), tau), np.full(3, 1 / 3),
                                       atol=1e-15)

    def test_two_class_value(self):
        # 1 / (1 + e^-1), evaluated independently.
        np.testing.assert_allclose(softmax_with_temperature([1.0, 0.0]),
                                   [0.7310585786300049, 0.2689414213699951], atol=1e-15)

    def test_high_temperature_tends_to_uniform(self):
        gaps = [np.abs(softmax_with_temperature([1.0, 2.0, 3.0], t) - 1 / 3).max()
                for t in (1, 10, 100, 1000)]
        assert all(b < a for a, b in zip(gaps, gaps[1:]))
        assert gaps[-1] < 1e-3

    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(ValueError):
            softmax_with_temperature([1.0, 2.0], 0.0)

    @given(logit_vectors, st.floats(0.1, 20))
    def test_simplex(self, z, tau):
        p = softmax_with_temperature(z, tau)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.all(p >= 0)


class TestLogitPair:
    def test_rejects_short_vectors(self):
        with pytest.raises(ValueError):
            LogitPair([1.0], [1.0], 0)

    def test_rejects_mismatched_lengths(self):
        with pytest.raises(ValueError):
            LogitPair([1.0, 2.0], [1.0, 2.0, 3.0], 0)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            LogitPair([1.0, np.nan], [0.0, 0.0], 0)

    def test_rejects_bad_label(self):
        with pytest.raises(ValueError):
            LogitPair([1.0, 2.0], [0.0, 0.0], 2)

    def test_posteriors_sum_to_one(self):
        rng = np.random.default_rng(0)
        post = PosteriorPair.from_logits(LogitPair(rng.normal(size=6), rng.normal(size=6), 1, 2.5))
        for v in (post.p, post.p_f, post.p_tau, post.pF_tau):
            assert abs(v.sum() - 1.0) < 1e-12


class TestClassificationLoss:
    def test_uniform_posteriors(self):
        assert classification_loss(LogitPair(np.zeros(4), np.zeros(4), 2)) == pytest.approx(
            2 * math.log(4), abs=1e-14)

    def test_two_class_value(self):
        expected = -math.log(_softmax_scalar([1, 0])[0]) - math.log(_softmax_scalar([0, 1])[0])
        value = classification_loss(LogitPair([1.0, 0.0], [0.0, 1.0], 0))
        assert value == pytest.approx(expected, abs=1e-14)
        assert value == pytest.approx(1.6265233750364456, abs=1e-12)

    def test_confident_prediction_tends_to_zero(self):
        z = np.array([40.0, 0.0, 0.0])
        assert classification_loss(LogitPair(z, z, 0)) < 1e-15

    def test_temperature_does_not_enter(self):
        z, zf = [0.3, -1.0, 2.0], [1.0, 0.0, 0.5]
        assert classification_loss(LogitPair(z, zf, 1, 1.0)) == classification_loss(LogitPair(z, zf, 1, 9.0))


class TestConsistencyLoss:
    def test_equal_logits_give_zero(self):
        z = np.random.default_rng(1).normal(size=7)
        assert ckd_loss(LogitPair(z, z, 0)) == pytest.approx(0.0, abs=1e-15)
        assert f2p_loss(LogitPair(z, z, 0)) == pytest.approx(0.0, abs=1e-15)

    def test_two_class_value_against_scalar_kl(self):
        tau = 2.5
        p = _softmax_scalar([1, 0], tau)
        q = _softmax_scalar([0, 1], tau)
        expected = tau ** 2 * (_kl_scalar(q, p) + _kl_scalar(p, q))
        value = ckd_loss(LogitPair([1.0, 0.0], [0.0, 1.0], 0, tau))
        assert value == pytest.approx(expected, abs=1e-14)
        assert value == pytest.approx(0.9868766011245204, abs=1e-12)

    def test_bidirectional_sum_of_one_way_terms(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            z, zf = rng.normal(0, 3, 5), rng.normal(0, 3, 5)
            tau = rng.uniform(1, 5)
            both = ckd_loss(LogitPair(z, zf, 0, tau))
            split = f2p_loss(LogitPair(z, zf, 0, tau)) + f2p_loss(LogitPair(zf, z, 0, tau))
            assert both == pytest.approx(split, rel=1e-12)

    def test_one_way_term_is_asymmetric(self):
        rng = np.random.default_rng(3)
        z, zf = rng.normal(0, 3, 6), rng.normal(0, 3, 6)
        assert abs(f2p_loss(LogitPair(z, zf, 0)) - f2p_loss(LogitPair(zf, z, 0))) > 1e-6

    def test_shift_invariance(self):
        z = np.array([0.2, 1.5, -0.7])
        assert ckd_loss(LogitPair(z, z + 3.0, 0)) == pytest.approx(0.0, abs=1e-14)

    @given(logit_vectors, st.floats(0.5, 10))
    def test_nonnegative(self, z, tau):
        zf = z[::-1].copy()
        assert ckd_loss(LogitPair(z, zf, 0, tau)) >= -1e-12

    def test_positive_when_posteriors_differ(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            z = rng.normal(0, 2, 4)
            zf = z.copy()
            zf[rng.integers(4)] += rng.uniform(0.1, 2.0)
            assert ckd_loss(LogitPair(z, zf, 0, 2.5)) > 0

    def test_stop_gradient_placement(self):
        pair = LogitPair([0.5, -1.0, 2.0], [1.0, 0.3, -0.2], 0)
        gz, gzf = pair_gradients(losses.f2p_loss_t, pair, tau=pair.tau)
        assert np.linalg.norm(gz) > 0
        assert np.array_equal(gzf, np.zeros(3))


class TestFullLoss:
    def test_uniform_logits(self):
        for tau in (1.0, 2.5, 10.0):
            assert full_loss(LogitPair(np.zeros(4), np.zeros(4), 1, tau)) == pytest.approx(
                2 * math.log(4), abs=1e-14)

    def test_is_sum_of_parts(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            pair = LogitPair(rng.normal(0, 3, 8), rng.normal(0, 3, 8), int(rng.integers(8)), 2.5)
            assert full_loss(pair) == pytest.approx(classification_loss(pair) + ckd_loss(pair), abs=1e-12)

    def test_batch_mean_matches_rows(self):
        rng = np.random.default_rng(6)
        z, zf, y = rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), rng.integers(0, 4, 5)
        batch = losses.full_loss_t(ad.constant(z), ad.constant(zf), y, 2.5).item()
        rows = np.mean([full_loss(LogitPair(z[i], zf[i], y[i], 2.5)) for i in range(5)])
        assert batch == pytest.approx(rows, rel=1e-12)


class TestSmoothLabel:
    def test_zero_temperature_is_one_hot(self):
        np.testing.assert_array_equal(smooth_label(2, np.full(4, 0.25), 0.0), [0, 0, 1, 0])

    def test_rational_example(self):
        # (onehot(0) + 2.5 * (0.5, 0.3, 0.2)) / 3.5 = (9/14, 3/14, 1/7).
        np.testing.assert_allclose(smooth_label(0, [0.5, 0.3, 0.2], 2.5), [9 / 14, 3 / 14, 1 / 7],
                                   atol=1e-15)

    def test_large_temperature_is_near_uniform(self):
        p = softmax_with_temperature([0.1, -0.2, 0.3, 0.0], 1e6)
        assert np.abs(smooth_label(1, p, 1e6) - 0.25).max() < 1e-3

    def test_negative_temperature_rejected(self):
        with pytest.raises(ValueError):
            smooth_label(0, [0.5, 0.5], -1.0)

    def test_target_component_dominates(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            z = rng.normal(0, 2, 6)
            y = int(np.argmax(z))
            tau = rng.uniform(0.5, 10)
            yt = smooth_label(y, softmax_with_temperature(z, tau), tau)
            assert abs(yt.sum() - 1) < 1e-12
            assert np.all(yt[y] > np.delete(yt, y))
            assert yt[y] >= 1 / (1 + tau)


class TestRegularizer:
    def test_zero_at_unit_temperature(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            assert regularizer_R(rng.normal(0, 5, int(rng.integers(2, 20))), 1.0) == 0.0

    def test_closed_form_values(self):
        for tau in (2.0, 5.0):
            expected = tau * _lse_scalar([1 / tau, 0.0]) - _lse_scalar([1.0, 0.0])
            assert float(regularizer_R([1.0, 0.0], tau)) == pytest.approx(expected, abs=1e-14)
        assert float(regularizer_R([1.0, 0.0], 2.0)) == pytest.approx(0.6348922808419906, abs=1e-12)

    def test_sparse_limit(self):
        assert float(regularizer_R([50.0, -50.0], 2.5)) < 1e-10

    def test_sparse_limit_keeps_precision(self):
        # 2.5 * log1p(exp(-40)) to leading order; not rounded away to 0.
        assert float(regularizer_R([50.0, -50.0], 2.5)) == pytest.approx(2.5 * math.exp(-40), rel=1e-12)

    def test_no_overflow(self):
        assert np.isfinite(regularizer_R([700.0, -700.0, 650.0], 3.0))

    def test_batch_shape(self):
        assert regularizer_R(np.zeros((3, 5)), 2.0).shape == (3,)

    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(ValueError):
            regularizer_R([1.0, 2.0], 0.0)

    @given(logit_vectors, st.floats(1.0, 50.0))
    @settings(max_examples=200)
    def test_nonnegative(self, z, tau):
        assert regularizer_R(z, tau) >= -1e-12

    def test_increasing_in_temperature(self):
        z = np.random.default_rng(9).normal(0, 3, 8)
        values = [float(regularizer_R(z, t)) for t in (1.0, 1.5, 2.5, 5.0, 10.0, 50.0)]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_tape_version_matches(self):
        z = np.random.default_rng(10).normal(0, 3, (4, 6))
        np.testing.assert_allclose(losses.regularizer_t(ad.constant(z), 2.5).data.reshape(-1),
                                   regularizer_R(z, 2.5), atol=1e-12)


class TestDecomposition:
    def test_uniform_logits_terms(self):
        k, tau = 5, 2.5
        # Both cross-entropies against the uniform posterior are log K, and
        # R(0) = (tau - 1) log K for each view.
        assert float(regularizer_R(np.zeros(k), tau)) == pytest.approx((tau - 1) * math.log(k), abs=1e-14)
        expected = 2 * math.log(k) + tau / (1 + tau) * 2 * (tau - 1) * math.log(k)
        value = decomposed_objective(LogitPair(np.zeros(k), np.zeros(k), 0, tau))
        assert value == pytest.approx(expected, abs=1e-13)
        # Same number from the identity: (2 log K + tau^2 * 2 log K) / (1 + tau).
        assert value == pytest.approx(2 * math.log(k) * (1 + tau ** 2) / (1 + tau), abs=1e-13)

    def test_identity_on_random_pairs(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            k = int(rng.integers(2, 40))
            pair = LogitPair(rng.normal(0, 3, k), rng.normal(0, 3, k), int(rng.integers(k)),
                             float(rng.uniform(1, 10)))
            assert theorem1_residual(pair) < 1e-9

    def test_unit_temperature_halves(self):
        rng = np.random.default_rng(12)
        pair = LogitPair(rng.normal(size=6), rng.normal(size=6), 3, 1.0)
        post = PosteriorPair.from_logits(pair)
        offsets = entropy(post.p_f) + entropy(post.p)
        assert decomposed_objective(pair) == pytest.approx((full_loss(pair) + offsets) / 2, abs=1e-12)

    def test_zero_logits_residual(self):
        assert theorem1_residual(LogitPair(np.zeros(3), np.zeros(3), 0, 2.5)) < 1e-12

    def test_gradient_scales_by_one_plus_tau(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            k = int(rng.integers(2, 20))
            pair = LogitPair(rng.normal(0, 3, k), rng.normal(0, 3, k), int(rng.integers(k)),
                             float(rng.uniform(1, 10)))
            full = np.concatenate(pair_gradients(losses.full_loss_t, pair, labels=[pair.y], tau=pair.tau))
            dec = np.concatenate(pair_gradients(losses.decomposed_objective_t, pair, labels=[pair.y],
                                                tau=pair.tau))
            np.testing.assert_allclose(full, (1 + pair.tau) * dec, rtol=1e-6, atol=1e-12)


class TestBaselineObjectives:
    def test_distillation_student_loss_bounds_ce(self):
        rng = np.random.default_rng(14)
        z, t, y = rng.normal(size=(6, 5)), rng.normal(size=(6, 5)), rng.integers(0, 5, 6)
        kd = losses.kd_student_loss_t(ad.constant(z), t, y, 2.5).item()
        ce = losses.ce_loss(ad.constant(z), y).item()
        assert kd >= ce

    def test_mutual_learning_unscaled_at_unit_temperature(self):
        rng = np.random.default_rng(15)
        z, zf, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.integers(0, 3, 4)
        ml = losses.mutual_learning_loss_t(ad.constant(z), ad.constant(zf), y).item()
        expected = (losses.classification_loss_t(ad.constant(z), ad.constant(zf), y).item()
                    + losses.ckd_loss_t(ad.constant(z), ad.constant(zf), 1.0).item())
        assert ml == pytest.approx(expected, rel=1e-12)

    def test_no_regularizer_objective_drops_R(self):
        rng = np.random.default_rng(16)
        z, zf, y = rng.normal(size=(4, 5)), rng.normal(size=(4, 5)), rng.integers(0, 5, 4)
        tau = 2.5
        nr = losses.no_regularizer_loss_t(ad.constant(z), ad.constant(zf), y, tau).item()
        dec = losses.decomposed_objective_t(ad.constant(z), ad.constant(zf), y, tau).item()
        r = (regularizer_R(z, tau) + regularizer_R(zf, tau)).mean()
        assert nr == pytest.approx((1 + tau) * (dec - tau / (1 + tau) * r), rel=1e-12)
