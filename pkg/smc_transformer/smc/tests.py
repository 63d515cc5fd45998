# smc/tests.py
import math
from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase

from attention.cell import deterministic_forward
from attention.params import NoiseScales, init_params
from attention.tests import build_head, build_params
from numkit.exceptions import DomainError, NumericalError
from numkit.kernels import LOG_2PI
from numkit.rng import SeededRng

from .diagnostics import ANCESTRY_COLUMNS, effective_sample_size, unique_ancestors
from .filter import (
    compute_weights, filter_sequence, init_cloud, propagate, resample_indices, select,
)


def affine_params(depth=1, noise=None, W=None):
    """G(z) = z, so weights depend on z directly"""
    noise = noise or NoiseScales(var_q=0.0, var_k=0.0, var_v=0.0, var_z=0.0, var_obs=1.0)
    return build_params(depth, depth, noise=noise, W=W, head=build_head(depth, layer_norm=False))


def cloud_with_latents(latents, params):
    latents = np.asarray(latents, dtype=np.float64)
    n_particles = latents.shape[0]
    cloud = init_cloud(np.zeros(params.d_in), params, n_particles, 1, SeededRng(0))
    return replace(cloud, latest=replace(cloud.latest, z=latents[None]))


def zero_noise_params(seed, d=2, depth=4):
    params = init_params(d, d, SeededRng(seed), depth=depth, ff_units=3)
    return params.with_noise(NoiseScales(var_q=0.0, var_k=0.0, var_v=0.0, var_z=0.0, var_obs=1.0))


class ResampleIndicesTest(SimpleTestCase):
    """Test multinomial selection"""

    def test_degenerate_weights(self):
        """Test that all draws hit the only weighted particle"""
        np.testing.assert_array_equal(resample_indices([1.0, 0.0, 0.0], SeededRng(1)), [0, 0, 0])

    def test_uniform_frequencies(self):
        """Test draw frequencies under uniform weights"""
        rng = SeededRng(2)
        weights = np.full(5, 0.2)
        draws = np.concatenate([resample_indices(weights, rng) for _ in range(20000)])
        self.assertEqual(draws.size, 100000)
        frequencies = np.bincount(draws, minlength=5) / draws.size
        np.testing.assert_allclose(frequencies, 0.2, atol=0.01)

    def test_single_particle(self):
        """Test that one particle always selects itself"""
        for seed in range(5):
            np.testing.assert_array_equal(resample_indices([1.0], SeededRng(seed)), [0])

    def test_unnormalised_weights(self):
        """Test rejection of weights that do not sum to one"""
        with self.assertRaises(DomainError):
            resample_indices([0.5, 0.6], SeededRng(0))


class PropagateTest(SimpleTestCase):
    """Test selection and mutation"""

    def test_zero_noise_collapses_particles(self):
        """Test that particles coincide without state noise"""
        params = zero_noise_params(3)
        x = SeededRng(4).normal((3, 2))
        cloud = init_cloud(x[0], params, 6, 2, SeededRng(5))
        for t in (1, 2):
            cloud = propagate(cloud, x[t], params, SeededRng(5))
            cloud = compute_weights(cloud, x[t], params)
            for array in (cloud.window.queries, cloud.window.keys, cloud.window.values, cloud.latest.z):
                np.testing.assert_array_equal(array, np.broadcast_to(array[:, :1], array.shape))

    def test_single_particle_has_trivial_genealogy(self):
        """Test that a single particle is its own ancestor"""
        params = init_params(2, 2, SeededRng(6), depth=3, ff_units=2)
        x = SeededRng(7).normal((4, 2))
        result = filter_sequence(x, params, 1, 2, SeededRng(8))
        self.assertTrue(np.all(result.ancestors == 0))

    def test_selected_windows_equal_ancestor_windows(self):
        """Test that selection copies whole ancestor windows"""
        params = init_params(2, 2, SeededRng(9), depth=3, ff_units=2)
        x = SeededRng(10).normal((2, 4, 2))
        rng = SeededRng(11)
        cloud = init_cloud(x[:, 0], params, 5, 3, rng)
        for t in (1, 2):
            cloud = compute_weights(propagate(cloud, x[:, t], params, rng), x[:, t], params)
        selected = select(cloud, rng)
        ancestors = selected.genealogy[-1]
        for b in range(2):
            for m in range(5):
                for name in ('queries', 'keys', 'values', 'latents'):
                    np.testing.assert_array_equal(
                        getattr(selected.window, name)[b, m],
                        getattr(cloud.window, name)[b, ancestors[b, m]],
                    )
        self.assertEqual(selected.step, cloud.step + 1)

    def test_propagate_needs_a_cloud(self):
        """Test rejection of a missing cloud"""
        with self.assertRaises(DomainError):
            propagate(None, np.zeros(1), affine_params(), SeededRng(0))


class ComputeWeightsTest(SimpleTestCase):
    """Test importance weighting"""

    def test_identical_predictions_give_uniform_weights(self):
        """Test uniform weights for identical particles"""
        params = affine_params()
        cloud = compute_weights(cloud_with_latents([[0.4]] * 4, params), np.array([1.0]), params)
        np.testing.assert_allclose(cloud.weights[0], np.full(4, 0.25), atol=1e-15)

    def test_scalar_example(self):
        """Test weights and normalising constant of a two-particle example"""
        params = affine_params()
        cloud = compute_weights(cloud_with_latents([[0.0], [1.0]], params), np.array([0.0]), params)
        np.testing.assert_allclose(cloud.weights[0], [0.6225, 0.3775], atol=1e-4)
        expected = math.log((1 + math.exp(-0.5)) / 2) - 0.5 * LOG_2PI
        self.assertAlmostEqual(float(cloud.log_norm_const[0]), expected, places=12)

    def test_dominating_particle(self):
        """Test that a far better particle takes all the weight"""
        params = affine_params()
        cloud = compute_weights(cloud_with_latents([[100.0], [0.0], [-100.0]], params), np.array([0.0]), params)
        self.assertAlmostEqual(float(cloud.weights[0, 1]), 1.0, delta=1e-10)

    def test_weights_are_a_probability_vector(self):
        """Test non-negative weights summing to one"""
        params = affine_params()
        latents = SeededRng(13).normal((8, 1)) * 3
        cloud = compute_weights(cloud_with_latents(latents, params), np.array([0.5]), params)
        cloud.validate()

    def test_total_underflow_is_reported(self):
        """Test that all weights underflowing raises NumericalError"""
        params = affine_params()
        with np.errstate(over='ignore'):
            with self.assertRaises(NumericalError):
                compute_weights(cloud_with_latents([[1e200], [-1e200]], params), np.array([0.0]), params)

    def test_needs_positive_observation_variance(self):
        """Test rejection of a zero observation variance"""
        params = affine_params(noise=NoiseScales.constant(0.0))
        with self.assertRaises(DomainError):
            compute_weights(cloud_with_latents([[0.0]], params), np.array([0.0]), params)


class FilterSequenceTest(SimpleTestCase):
    """Test the full filter pass"""

    def test_single_particle_weights(self):
        """Test that one particle always carries weight one"""
        params = init_params(1, 1, SeededRng(14), depth=2, ff_units=2)
        result = filter_sequence(SeededRng(15).normal((6, 1)), params, 1, 3, SeededRng(16))
        np.testing.assert_array_equal(result.weights, np.ones((6, 1, 1)))

    def test_zero_noise_matches_deterministic_forward(self):
        """Test that zero state noise reproduces the deterministic model"""
        params = zero_noise_params(17)
        x = SeededRng(18).normal((7, 2))
        expected = deterministic_forward(x, params, lag=3)
        for n_particles in (1, 7):
            result = filter_sequence(x, params, n_particles, 3, SeededRng(19))
            np.testing.assert_allclose(result.weights, 1.0 / n_particles, atol=1e-15)
            np.testing.assert_allclose(result.predictions[0], expected, atol=1e-12)
            for state in result.states[1:]:
                self.assertEqual(state.z.shape, (1, n_particles, params.depth))

    def test_variances_at_floor_collapse_to_deterministic_forward(self):
        """Test that tiny state noise keeps particles together, weights uniform and predictions deterministic"""
        params = init_params(2, 2, SeededRng(40), depth=4, ff_units=3)
        x = SeededRng(41).normal((6, 2))
        expected = deterministic_forward(x, params, lag=3)
        n_particles = 5
        # tolerances are linear in the state noise std and tightest at std 1e-12
        for variance in (1e-12, 1e-24):
            scale = math.sqrt(variance) / 1e-12
            noise = replace(NoiseScales.constant(variance), var_obs=1.0)
            result = filter_sequence(x, params.with_noise(noise), n_particles, 3, SeededRng(42))
            with self.subTest(variance=variance):
                for state in result.states[1:]:
                    for name in ('q', 'k', 'v', 'z'):
                        cloud = getattr(state, name)
                        spread = np.linalg.norm(cloud[..., :, None, :] - cloud[..., None, :, :], axis=-1)
                        self.assertLess(spread.max(), 1e-8 * scale, msg=name)
                np.testing.assert_allclose(result.weights, 1.0 / n_particles, atol=1e-10 * scale)
                np.testing.assert_allclose(result.predictions[0], expected, atol=1e-8 * scale)

    def test_needs_two_observations(self):
        """Test rejection of single-step sequences"""
        with self.assertRaises(DomainError):
            filter_sequence(np.zeros((1, 1)), affine_params(), 3, 1, SeededRng(0))

    def test_result_shapes(self):
        """Test the shapes of every filter output"""
        params = init_params(2, 2, SeededRng(20), depth=3, ff_units=2)
        result = filter_sequence(SeededRng(21).normal((3, 5, 2)), params, 4, 2, SeededRng(22))
        self.assertEqual(result.ancestors.shape, (4, 3, 4))
        self.assertEqual(result.weights.shape, (5, 3, 4))
        self.assertEqual(result.predictions.shape, (3, 4, 2))
        self.assertEqual(result.sq_residuals['q'].shape, (5, 3, 4))
        self.assertEqual(result.sq_residuals['obs'].shape, (4, 3, 4))
        self.assertEqual(result.lineage().shape, (5, 3, 4))
        self.assertEqual(result.cloud.window.size, 2)

    def test_effective_sample_size_bounds(self):
        """Test 1 <= ESS <= M at every step"""
        params = init_params(2, 2, SeededRng(23), depth=3, ff_units=2)
        result = filter_sequence(SeededRng(24).normal((2, 10, 2)), params, 6, 3, SeededRng(25))
        self.assertTrue(np.all(result.ess >= 1.0 - 1e-12))
        self.assertTrue(np.all(result.ess <= 6.0 + 1e-12))
        np.testing.assert_allclose(result.ess[-1], effective_sample_size(result.final_weights))

    def test_independent_of_batch_composition(self):
        """Test that batching does not change a sequence's filter"""
        params = init_params(2, 2, SeededRng(26), depth=3, ff_units=2)
        x = SeededRng(27).normal((3, 6, 2))
        rng = SeededRng(28)
        together = filter_sequence(x, params, 5, 2, rng)
        alone = filter_sequence(x[1:2], params, 5, 2, [rng.child(1)])
        np.testing.assert_array_equal(together.ancestors[:, 1], alone.ancestors[:, 0])
        np.testing.assert_allclose(together.log_likelihood[1], alone.log_likelihood[0], atol=1e-12)

    def test_lineage_follows_ancestors(self):
        """Test lineage reconstruction from the ancestor indices"""
        params = init_params(1, 1, SeededRng(29), depth=2, ff_units=2)
        result = filter_sequence(SeededRng(30).normal((5, 1)), params, 4, 2, SeededRng(31))
        lineage = result.lineage()
        np.testing.assert_array_equal(lineage[-1, 0], np.arange(4))
        for t in range(1, 5):
            np.testing.assert_array_equal(lineage[t - 1, 0], result.ancestors[t - 1, 0][lineage[t, 0]])

    def test_linear_gaussian_marginal_likelihood(self):
        """Test the likelihood estimate against the closed-form Gaussian marginal"""
        noise = NoiseScales(var_q=0.1, var_k=0.1, var_v=0.3, var_z=0.2, var_obs=0.5)
        params = affine_params(noise=noise, W=np.array([[0.8]]))
        x = np.tile(np.array([[0.5], [0.3]]), (100, 1, 1))
        result = filter_sequence(x, params, 500, 1, SeededRng(32))
        variance = noise.var_v + noise.var_z + noise.var_obs
        exact = -0.5 * (LOG_2PI + math.log(variance)) - (0.3 - 0.8 * 0.5) ** 2 / (2 * variance)
        estimates = result.log_likelihood
        standard_error = estimates.std(ddof=1) / math.sqrt(estimates.size)
        self.assertLess(abs(estimates.mean() - exact), 3 * standard_error + 1e-12)


class UniqueAncestorsTest(SimpleTestCase):
    """Test genealogy diagnostics"""

    def filtered_cloud(self, n_particles=6, length=12, lag=4):
        params = init_params(1, 1, SeededRng(33), depth=2, ff_units=2)
        x = SeededRng(34).normal((3, length, 1))
        return filter_sequence(x, params, n_particles, lag, SeededRng(35)).cloud

    def test_single_particle(self):
        """Test a count of one at every lag for one particle"""
        report = unique_ancestors(self.filtered_cloud(n_particles=1))
        np.testing.assert_array_equal(report.counts, np.ones((3, 4)))

    def test_identity_resampling_keeps_all(self):
        """Test that identity resampling keeps every ancestor"""
        cloud = self.filtered_cloud()
        identity = np.broadcast_to(np.arange(6), (3, 6))
        cloud = replace(cloud, genealogy=tuple(identity for _ in cloud.genealogy))
        np.testing.assert_array_equal(unique_ancestors(cloud).counts, np.full((3, 4), 6))

    def test_collapse_propagates_backwards(self):
        """Test that a collapse stays visible at deeper lags"""
        cloud = self.filtered_cloud()
        genealogy = list(cloud.genealogy)
        genealogy[-2] = np.zeros((3, 6), dtype=np.int64)
        counts = unique_ancestors(replace(cloud, genealogy=tuple(genealogy))).counts
        np.testing.assert_array_equal(counts[:, 1:], np.ones((3, 3)))

    def test_counts_never_increase_with_lag(self):
        """Test counts that are non-increasing in the lag"""
        counts = unique_ancestors(self.filtered_cloud(n_particles=10, lag=8)).counts
        self.assertTrue(np.all(np.diff(counts, axis=1) <= 0))
        self.assertTrue(np.all((counts >= 1) & (counts <= 10)))

    def test_max_lag_capped_by_history(self):
        """Test that lags stop at the recorded history"""
        cloud = self.filtered_cloud(length=3)
        self.assertEqual(unique_ancestors(cloud, max_lag=10).n_lags, 2)

    def test_report_frame(self):
        """Test the columns and ranges of the report frame"""
        frame = unique_ancestors(self.filtered_cloud()).to_frame()
        self.assertEqual(list(frame.columns), ANCESTRY_COLUMNS)
        self.assertEqual(frame['lag'].tolist(), [1, 2, 3, 4])
        self.assertTrue(np.all(frame['ci_low'] <= frame['mean_unique']))
        self.assertTrue(np.all(frame['mean_unique'] <= frame['ci_high']))
