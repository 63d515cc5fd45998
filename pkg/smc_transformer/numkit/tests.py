# numkit/tests.py
import math

import numpy as np
from django.test import SimpleTestCase

from .exceptions import DomainError
from .kernels import (
    softmax, gaussian_sample, log_gaussian_density, layer_norm,
    gather_particles, window_push, logsumexp,
)
from .rng import SeededRng, as_streams, batch_normal


class SoftmaxTest(SimpleTestCase):
    """Test the stable softmax"""

    def test_symmetric_logits(self):
        """Test that two equal logits split the mass evenly"""
        np.testing.assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])

    def test_closed_form(self):
        """Test softmax against a hand-computed pair"""
        np.testing.assert_allclose(softmax([math.log(2.0), 0.0]), [2 / 3, 1 / 3], atol=1e-15)

    def test_large_logit_does_not_overflow(self):
        """Test that a logit of 1000 stays finite"""
        result = softmax([1000.0, 0.0])
        self.assertTrue(np.all(np.isfinite(result)))
        np.testing.assert_array_equal(result, [1.0, 0.0])

    def test_sums_to_one_up_to_large_logits(self):
        """Test normalisation for logits up to 10^4"""
        rng = SeededRng(3)
        for _ in range(50):
            logits = rng.uniform(7) * 2e4 - 1e4
            self.assertAlmostEqual(float(np.sum(softmax(logits))), 1.0, delta=1e-12)

    def test_shift_invariance(self):
        """Test that adding a constant to every logit changes nothing"""
        logits = np.array([0.3, -1.2, 2.5])
        np.testing.assert_allclose(softmax(logits), softmax(logits + 17.0), atol=1e-15)

    def test_equal_logits_give_equal_probabilities(self):
        """Test uniform output for constant logits"""
        result = softmax([0.7, 0.7, 0.7])
        self.assertEqual(result[0], result[1])
        self.assertEqual(result[1], result[2])

    def test_empty_input(self):
        """Test rejection of an empty logit vector"""
        with self.assertRaises(DomainError):
            softmax([])


class GaussianSampleTest(SimpleTestCase):
    """Test reparametrised Gaussian sampling"""

    def test_zero_std_returns_mean(self):
        """Test that a zero standard deviation returns the mean exactly"""
        mean = np.array([1.5, -2.0, 0.25])
        sample, eps = gaussian_sample(mean, 0.0, SeededRng(1))
        np.testing.assert_array_equal(sample, mean)
        self.assertEqual(eps.shape, mean.shape)

    def test_moments(self):
        """Test sample mean and variance of standard draws"""
        sample, _ = gaussian_sample(np.zeros((100000, 2)), 1.0, SeededRng(11))
        np.testing.assert_allclose(sample.mean(axis=0), 0.0, atol=0.02)
        np.testing.assert_allclose(sample.var(axis=0), 1.0, atol=0.02)

    def test_same_seed_same_output(self):
        """Test reproducibility under a fixed seed"""
        first, _ = gaussian_sample(np.zeros(5), 2.0, SeededRng(42))
        second, _ = gaussian_sample(np.zeros(5), 2.0, SeededRng(42))
        np.testing.assert_array_equal(first, second)

    def test_reparametrisation_identity(self):
        """Test sample = mean + std·eps for the returned eps"""
        mean = np.array([0.5, 1.0])
        sample, eps = gaussian_sample(mean, 0.5, SeededRng(5))
        np.testing.assert_allclose(sample - mean, 0.5 * eps, atol=1e-15)

    def test_negative_std(self):
        """Test rejection of a negative standard deviation"""
        with self.assertRaises(DomainError):
            gaussian_sample(np.zeros(2), -1.0, SeededRng(0))


class LogGaussianDensityTest(SimpleTestCase):
    """Test isotropic Gaussian log-densities"""

    def test_density_at_mean(self):
        """Test the log-density of a standard normal at zero"""
        self.assertAlmostEqual(float(log_gaussian_density([0.0], [0.0], 1.0)), -0.91893853320467, places=12)

    def test_unit_residual(self):
        """Test the log-density one standard deviation away"""
        expected = -0.5 * math.log(2 * math.pi) - 0.5
        self.assertAlmostEqual(float(log_gaussian_density([1.0], [0.0], 1.0)), expected, places=12)

    def test_variance_scaling(self):
        """Test how the log-density shifts with the variance"""
        base = log_gaussian_density([0.0], [0.0], 1.0)
        wide = log_gaussian_density([0.0], [0.0], 4.0)
        self.assertAlmostEqual(float(base - wide), 0.5 * math.log(4.0), places=12)

    def test_non_positive_variance(self):
        """Test rejection of zero and negative variances"""
        with self.assertRaises(DomainError):
            log_gaussian_density([0.0], [0.0], 0.0)

    def test_batched_reduction(self):
        """Test reduction over the last axis only"""
        x = np.zeros((3, 4, 2))
        self.assertEqual(log_gaussian_density(x, x, 1.0).shape, (3, 4))


class ArrayKernelTest(SimpleTestCase):
    """Test layer norm, particle gather and window maintenance"""

    def test_layer_norm_constant_input_gives_bias(self):
        """Test layer norm of a constant row"""
        bias = np.array([0.1, 0.2, 0.3])
        out = layer_norm(np.full(3, 5.0), np.ones(3), bias, 1e-6)
        np.testing.assert_allclose(out, bias, atol=1e-12)

    def test_gather_particles(self):
        """Test per-sequence particle gathering"""
        values = np.arange(12.0).reshape(2, 3, 2)
        out = gather_particles(values, np.array([[2, 2, 0], [1, 0, 1]]))
        np.testing.assert_array_equal(out[0, 0], values[0, 2])
        np.testing.assert_array_equal(out[1, 1], values[1, 0])

    def test_window_push_keeps_most_recent_first(self):
        """Test window order and truncation"""
        window = window_push(np.array([1.0]), None, 2)
        window = window_push(np.array([2.0]), window, 2)
        window = window_push(np.array([3.0]), window, 2)
        np.testing.assert_array_equal(window[:, 0], [3.0, 2.0])

    def test_logsumexp_matches_direct(self):
        """Test logsumexp against the direct formula"""
        values = np.array([0.1, -0.4, 2.0])
        self.assertAlmostEqual(float(logsumexp(values)), math.log(np.sum(np.exp(values))), places=12)


class SeededRngTest(SimpleTestCase):
    """Test keyed, reproducible streams"""

    def test_children_are_reproducible(self):
        """Test that a key path always yields the same stream"""
        a = SeededRng(7).child(3, 'q').normal(4)
        b = SeededRng(7).child(3, 'q').normal(4)
        np.testing.assert_array_equal(a, b)

    def test_children_are_distinct(self):
        """Test that sibling keys yield different streams"""
        root = SeededRng(7)
        self.assertFalse(np.array_equal(root.child(1).normal(4), root.child(2).normal(4)))

    def test_child_independent_of_parent_consumption(self):
        """Test that drawing from a parent leaves its children unchanged"""
        root = SeededRng(9)
        before = root.child(5).normal(3)
        root.normal(100)
        np.testing.assert_array_equal(root.child(5).normal(3), before)

    def test_batch_normal_stacks_per_sequence(self):
        """Test that batched draws stack one stream per sequence"""
        streams = as_streams(SeededRng(1), 3)
        draws = batch_normal(streams, (0, 'z'), (2, 4))
        self.assertEqual(draws.shape, (3, 2, 4))
        np.testing.assert_array_equal(draws[1], streams[1].child(0, 'z').normal((2, 4)))

    def test_stream_count_checked(self):
        """Test rejection of a stream list of the wrong length"""
        with self.assertRaises(DomainError):
            as_streams([SeededRng(1)], 2)
