# attention/tests.py
import math

import numpy as np
from django.test import SimpleTestCase

from numkit.exceptions import DomainError
from numkit.kernels import LOG_2PI, log_gaussian_density
from numkit.rng import SeededRng

from .cell import (
    AttentionWindow, LatentState, attention_vector, attention_weights,
    deterministic_forward, observation_logdensity, observation_mean,
    project_qkv, transition_logdensity,
)
from .params import ModelParams, NoiseScales, ObservationHead, init_params
from .simulate import sample_sequences


def build_head(depth, d_obs=None, out_proj=None, gain=None, bias=None, d_ff=2, layer_norm=True):
    """Head with a zero feed-forward block, so G(z) = out_proj · LN(z) (or out_proj · z)"""
    d_obs = depth if d_obs is None else d_obs
    return ObservationHead(
        ffn_in=np.zeros((d_ff, depth)),
        ffn_in_bias=np.zeros(d_ff),
        ffn_out=np.zeros((depth, d_ff)),
        ffn_out_bias=np.zeros(depth),
        ln_gain=np.ones(depth) if gain is None else np.asarray(gain, dtype=np.float64),
        ln_bias=np.zeros(depth) if bias is None else np.asarray(bias, dtype=np.float64),
        out_proj=np.eye(d_obs, depth) if out_proj is None else np.asarray(out_proj, dtype=np.float64),
        out_bias=np.zeros(d_obs),
        layer_norm=layer_norm,
    )


def build_params(depth, d_in, noise=None, W=None, head=None):
    W = np.eye(depth, d_in) if W is None else np.asarray(W, dtype=np.float64)
    return ModelParams(
        W_q=W, W_k=W.copy(), W_v=W.copy(),
        head=build_head(depth) if head is None else head,
        noise=NoiseScales.constant(0.0) if noise is None else noise,
    )


class ProjectQkvTest(SimpleTestCase):
    """Test the Gaussian (q, κ, v) projections"""

    def test_zero_noise_returns_means(self):
        """Test that zero variances return W·x exactly"""
        params = init_params(3, 3, SeededRng(1), depth=4, ff_units=2, initial_variance=0.0)
        x = np.array([0.5, -1.0, 2.0])
        projection = project_qkv(x, params, rng=SeededRng(2))
        np.testing.assert_allclose(projection.q, params.W_q @ x, rtol=0, atol=1e-14)
        np.testing.assert_allclose(projection.v, params.W_v @ x, rtol=0, atol=1e-14)

    def test_identity_projection(self):
        """Test an identity projection without noise"""
        params = build_params(2, 2)
        projection = project_qkv(np.array([1.0, 2.0]), params, rng=SeededRng(0))
        np.testing.assert_array_equal(projection.q, [1.0, 2.0])

    def test_reparametrisation_identity(self):
        """Test q = W_q·x + sqrt(var_q)·eps_q for the recorded eps"""
        params = build_params(2, 2, noise=NoiseScales(var_q=1.0, var_k=0.0, var_v=0.0, var_z=0.0, var_obs=1.0))
        eps = np.array([0.3, -0.7])
        x = np.array([1.0, 2.0])
        projection = project_qkv(x, params, noise=(eps, np.zeros(2), np.zeros(2)))
        np.testing.assert_array_equal(projection.q - params.W_q @ x, eps)

    def test_noises_are_independent_per_source(self):
        """Test that q, κ and v draw different noise"""
        params = build_params(3, 3, noise=NoiseScales.constant(1.0))
        projection = project_qkv(np.zeros(3), params, rng=SeededRng(8))
        self.assertFalse(np.array_equal(projection.eps_q, projection.eps_k))

    def test_dimension_mismatch(self):
        """Test rejection of an input of the wrong width"""
        with self.assertRaises(DomainError):
            project_qkv(np.zeros(3), build_params(2, 2), rng=SeededRng(0))


class AttentionWeightsTest(SimpleTestCase):
    """Test windowed attention scores"""

    def test_zero_query_gives_uniform_weights(self):
        """Test uniform attention for a zero query"""
        keys = SeededRng(3).normal((3, 4))
        np.testing.assert_allclose(attention_weights(np.zeros(4), keys), np.full(3, 1 / 3), atol=1e-15)

    def test_closed_form(self):
        """Test attention weights against a hand-computed pair"""
        pi = attention_weights(np.array([1.0]), np.array([[1.0], [0.0]]))
        np.testing.assert_allclose(pi, [math.e / (math.e + 1), 1 / (math.e + 1)], atol=1e-12)
        self.assertAlmostEqual(pi[0], 0.7311, places=4)

    def test_duplicate_key_splits_probability(self):
        """Test that a repeated key shares its probability"""
        single = attention_weights(np.array([0.5, 1.0]), np.array([[1.0, 0.0], [0.0, 1.0]]))
        doubled = attention_weights(np.array([0.5, 1.0]), np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]))
        self.assertAlmostEqual(doubled[1], doubled[2], places=15)
        self.assertAlmostEqual(doubled[0] / (doubled[1] + doubled[2]), single[0] / (2 * single[1]), places=12)

    def test_sums_to_one_with_window_length(self):
        """Test one weight per slot summing to one"""
        rng = SeededRng(6)
        for size in range(1, 6):
            pi = attention_weights(rng.normal(3), rng.normal((size, 3)))
            self.assertEqual(pi.shape, (size,))
            self.assertAlmostEqual(float(pi.sum()), 1.0, places=12)

    def test_empty_window(self):
        """Test rejection of attention over no slots"""
        with self.assertRaises(DomainError):
            attention_weights(np.zeros(2), AttentionWindow(lag=3))


class AttentionVectorTest(SimpleTestCase):
    """Test the stochastic attention vector"""

    values = np.array([[1.0, 0.0], [0.0, 1.0]])

    def test_one_hot_attention(self):
        """Test that one-hot weights select a single value"""
        z, mu, _ = attention_vector(np.array([1.0, 0.0]), self.values, build_params(2, 2), rng=SeededRng(0))
        np.testing.assert_array_equal(z, [1.0, 0.0])
        np.testing.assert_array_equal(mu, z)

    def test_uniform_attention_averages(self):
        """Test that uniform weights average the values"""
        z, _, _ = attention_vector(np.array([0.5, 0.5]), self.values, build_params(2, 2), rng=SeededRng(0))
        np.testing.assert_array_equal(z, [0.5, 0.5])

    def test_reparametrisation_identity(self):
        """Test z = mu + sqrt(var_z)·eps_z for the recorded eps"""
        params = build_params(2, 2, noise=NoiseScales(var_q=0.0, var_k=0.0, var_v=0.0, var_z=0.25, var_obs=1.0))
        eps = np.array([1.0, -2.0])
        z, mu, _ = attention_vector(np.array([0.3, 0.7]), self.values, params, eps=eps)
        np.testing.assert_allclose(z - mu, 0.5 * eps, atol=1e-15)

    def test_mismatched_lengths(self):
        """Test rejection of weights and values of different lengths"""
        with self.assertRaises(DomainError):
            attention_vector(np.array([0.2, 0.3, 0.5]), self.values, build_params(2, 2), rng=SeededRng(0))


class ObservationMeanTest(SimpleTestCase):
    """Test the observation head G"""

    def test_normalised_input_passes_through(self):
        """Test that an already normalised latent passes through"""
        output = observation_mean(np.array([1.0, -1.0]), build_head(2))
        np.testing.assert_allclose(output, [1.0, -1.0], atol=1e-6)

    def test_constant_input_gives_bias(self):
        """Test that a constant latent maps to the projected bias"""
        head = build_head(3, d_obs=2, out_proj=[[1.0, 0.0, 2.0], [0.0, 1.0, 0.0]], bias=[0.1, 0.2, 0.3])
        np.testing.assert_allclose(observation_mean(np.full(3, 4.0), head), [0.7, 0.2], atol=1e-12)

    def test_zero_gain_ignores_latent(self):
        """Test that zero gain makes the output independent of z"""
        head = build_head(2, d_obs=1, out_proj=[[2.0, -1.0]], gain=[0.0, 0.0], bias=[0.5, 1.5])
        rng = SeededRng(12)
        for _ in range(5):
            np.testing.assert_allclose(observation_mean(rng.normal(2), head), [-0.5], atol=1e-12)

    def test_consumes_no_randomness(self):
        """Test that the head is deterministic"""
        params = init_params(2, 2, SeededRng(0), depth=4, ff_units=3)
        z = SeededRng(1).normal(4)
        np.testing.assert_array_equal(observation_mean(z, params.head), observation_mean(z, params.head))

    def test_depth_mismatch(self):
        """Test rejection of a latent of the wrong depth"""
        with self.assertRaises(DomainError):
            observation_mean(np.zeros(3), build_head(2))


class ObservationLogdensityTest(SimpleTestCase):
    """Test log N(X_t; G(z), var_obs)"""

    def affine_params(self, depth, var_obs):
        noise = NoiseScales(var_q=0.0, var_k=0.0, var_v=0.0, var_z=0.0, var_obs=var_obs)
        return build_params(depth, depth, noise=noise, head=build_head(depth, layer_norm=False))

    def test_zero_residual(self):
        """Test the log-density when G(z) equals the observation"""
        value = observation_logdensity(np.array([0.7]), np.array([0.7]), self.affine_params(1, 1.0))
        self.assertAlmostEqual(float(value), -0.5 * LOG_2PI, places=12)

    def test_two_dimensional_residual(self):
        """Test the log-density of a two-dimensional residual"""
        z = np.array([0.2, -0.4])
        value = observation_logdensity(z + 1.0, z, self.affine_params(2, 1.0))
        self.assertAlmostEqual(float(value), -LOG_2PI - 1.0, places=12)

    def test_density_decreases_with_variance_at_zero_residual(self):
        """Test that a wider variance lowers the peak density"""
        z = np.array([0.3])
        values = [float(observation_logdensity(z, z, self.affine_params(1, var))) for var in (0.5, 1.0, 2.0)]
        self.assertGreater(values[0], values[1])
        self.assertGreater(values[1], values[2])

    def test_non_positive_variance(self):
        """Test rejection of a zero observation variance"""
        with self.assertRaises(DomainError):
            observation_logdensity(np.zeros(1), np.zeros(1), self.affine_params(1, 0.0))


class TransitionLogdensityTest(SimpleTestCase):
    """Test log p(ζ_t | window, X_t)"""

    def setUp(self):
        self.params = build_params(3, 2, noise=NoiseScales.constant(1.0), W=SeededRng(5).normal((3, 2)))
        self.x = np.array([0.4, -0.9])

    def state_at_means(self, mu_z):
        mean = self.params.W_q @ self.x
        return LatentState(
            q=mean, k=self.params.W_k @ self.x, v=self.params.W_v @ self.x,
            eps_q=np.zeros(3), eps_k=np.zeros(3), eps_v=np.zeros(3), z=mu_z,
        )

    def test_state_at_means(self):
        """Test the transition density of a state at its means"""
        mu_z = np.array([0.1, 0.2, 0.3])
        value = transition_logdensity(self.state_at_means(mu_z), mu_z, self.x, self.params)
        self.assertAlmostEqual(float(value), -(4 * 3 / 2) * LOG_2PI, places=12)

    def test_query_shift(self):
        """Test the penalty of a query moved off its mean"""
        mu_z = np.zeros(3)
        state = self.state_at_means(mu_z)
        residual = np.array([0.5, -1.0, 0.25])
        shifted = LatentState(
            q=state.q + residual, k=state.k, v=state.v,
            eps_q=residual, eps_k=state.eps_k, eps_v=state.eps_v, z=mu_z,
        )
        difference = transition_logdensity(shifted, mu_z, self.x, self.params) - transition_logdensity(state, mu_z, self.x, self.params)
        self.assertAlmostEqual(float(difference), -float(residual @ residual) / 2.0, places=12)

    def test_sum_of_four_densities(self):
        """Test that the density adds the q, κ, v and z terms"""
        rng = SeededRng(17)
        params = build_params(3, 2, noise=NoiseScales(0.3, 0.6, 0.9, 1.2, 1.0), W=rng.normal((3, 2)))
        state = LatentState(
            q=rng.normal(3), k=rng.normal(3), v=rng.normal(3),
            eps_q=np.zeros(3), eps_k=np.zeros(3), eps_v=np.zeros(3), z=rng.normal(3),
        )
        mu_z = rng.normal(3)
        expected = (
            log_gaussian_density(state.q, params.W_q @ self.x, 0.3)
            + log_gaussian_density(state.k, params.W_k @ self.x, 0.6)
            + log_gaussian_density(state.v, params.W_v @ self.x, 0.9)
            + log_gaussian_density(state.z, mu_z, 1.2)
        )
        self.assertAlmostEqual(float(transition_logdensity(state, mu_z, self.x, params)), float(expected), places=12)

    def test_zero_variance(self):
        """Test rejection of zero state variances"""
        params = build_params(3, 2)
        with self.assertRaises(DomainError):
            transition_logdensity(self.state_at_means(np.zeros(3)), np.zeros(3), self.x, params)

    def test_complete_data_likelihood_on_three_steps(self):
        """Test the complete-data likelihood of a short path"""
        noise = NoiseScales(0.2, 0.3, 0.4, 0.5, 0.6)
        params = init_params(2, 2, SeededRng(21), depth=3, ff_units=4).with_noise(noise)
        x = SeededRng(22).normal((3, 2))
        rng = SeededRng(23)
        window = AttentionWindow(lag=2)
        total = 0.0
        expected = 0.0
        for t in range(3):
            if t > 0:
                pi = attention_weights(window.q_prev, window)
                z, mu, eps_z = attention_vector(pi, window, params, rng=rng.child(t))
            else:
                z = mu = eps_z = None
            projection = project_qkv(x[t], params, rng=rng.child(t))
            state = LatentState(
                q=projection.q, k=projection.k, v=projection.v,
                eps_q=projection.eps_q, eps_k=projection.eps_k, eps_v=projection.eps_v,
                z=z, mu_z=mu, eps_z=eps_z,
            )
            sources = [('var_q', projection.eps_q), ('var_k', projection.eps_k), ('var_v', projection.eps_v)]
            if t > 0:
                total += float(transition_logdensity(state, mu, x[t], params))
                total += float(observation_logdensity(x[t], z, params))
                sources.append(('var_z', eps_z))
                expected += float(log_gaussian_density(x[t], observation_mean(z, params.head), noise.var_obs))
            else:
                total += sum(
                    float(log_gaussian_density(getattr(projection, name), getattr(projection, 'mean_' + name), getattr(noise, 'var_' + name)))
                    for name in ('q', 'k', 'v')
                )
            for name, eps in sources:
                variance = getattr(noise, name)
                expected += -1.5 * (LOG_2PI + math.log(variance)) - 0.5 * float(eps @ eps)
            window = window.push(state)
        self.assertAlmostEqual(total, expected, places=10)


class DeterministicForwardTest(SimpleTestCase):
    """Test the noise-free transformer recursion"""

    def test_matches_zero_noise_stochastic_path(self):
        """Test equality with the stochastic path at zero noise"""
        params = init_params(2, 2, SeededRng(31), depth=4, ff_units=3, initial_variance=0.0)
        x = SeededRng(32).normal((6, 2))
        expected = deterministic_forward(x, params, lag=3)
        for seed in (1, 2):
            rng = SeededRng(seed)
            window = AttentionWindow(lag=3)
            for t in range(6):
                z = mu = None
                if t > 0:
                    z, mu, _ = attention_vector(attention_weights(window.q_prev, window), window, params, rng=rng.child(t))
                    np.testing.assert_allclose(observation_mean(z, params.head), expected[t - 1], atol=1e-12)
                projection = project_qkv(x[t], params, rng=rng.child(t))
                window = window.push(LatentState(
                    q=projection.q, k=projection.k, v=projection.v,
                    eps_q=projection.eps_q, eps_k=projection.eps_k, eps_v=projection.eps_v, z=z, mu_z=mu,
                ))

    def test_zero_weights_give_constant_prediction(self):
        """Test a constant prediction when every projection is zero"""
        head = build_head(2, d_obs=1, out_proj=[[1.0, 3.0]], bias=[0.5, -0.25])
        params = build_params(2, 1, W=np.zeros((2, 1)), head=head)
        predictions = deterministic_forward(SeededRng(4).normal((5, 1)), params, lag=2)
        self.assertEqual(predictions.shape, (4, 1))
        np.testing.assert_allclose(predictions, np.full((4, 1), -0.25), atol=1e-12)

    def test_independent_of_batch_composition(self):
        """Test that each sequence is predicted on its own"""
        params = init_params(3, 3, SeededRng(41), depth=4, ff_units=5)
        batch = SeededRng(42).normal((4, 7, 3))
        together = deterministic_forward(batch, params, lag=2)
        alone = deterministic_forward(batch[2], params, lag=2)
        np.testing.assert_allclose(together[2], alone, atol=1e-12)

    def test_needs_two_observations(self):
        """Test rejection of single-step sequences"""
        with self.assertRaises(DomainError):
            deterministic_forward(np.zeros((1, 2)), build_params(2, 2), lag=1)


class SampleSequencesTest(SimpleTestCase):
    """Test simulation from the generative model"""

    def test_shape_and_reproducibility(self):
        """Test sequence shape and seed reproducibility"""
        params = init_params(2, 2, SeededRng(51), depth=4, ff_units=3)
        first = sample_sequences(params, 3, 8, lag=3, rng=SeededRng(52))
        second = sample_sequences(params, 3, 8, lag=3, rng=SeededRng(52))
        self.assertEqual(first.shape, (3, 8, 2))
        np.testing.assert_array_equal(first, second)

    def test_zero_observation_noise_follows_head(self):
        """Test that noiseless observations equal G(z)"""
        params = init_params(1, 1, SeededRng(53), depth=2, ff_units=2, initial_variance=0.0)
        x = sample_sequences(params, 1, 5, lag=2, rng=SeededRng(54))[0]
        np.testing.assert_allclose(x[1:], deterministic_forward(x, params, lag=2), atol=1e-12)

    def test_needs_matching_dimensions(self):
        """Test rejection of a model whose input and output widths differ"""
        params = init_params(2, 1, SeededRng(55), depth=2, ff_units=2)
        with self.assertRaises(DomainError):
            sample_sequences(params, 1, 5, lag=2, rng=SeededRng(56))
