# evalkit/tests.py
import os
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase

from attention.cell import deterministic_forward, observation_mean
from attention.params import NoiseScales, init_params
from attention.tests import build_head, build_params
from dataio.datasets import SYNTHETIC_SPLIT_RATIOS, TEST, split_normalize
from dataio.synthetic import SyntheticSpec, gen_model_I, gen_model_II
from numkit.exceptions import DomainError
from numkit.rng import SeededRng
from smc.filter import filter_sequence, init_cloud
from trainer.config import TrainConfig

from .metrics import IntervalBounds, dist_mse, intervals_from_samples, min_samples, mse, picp_mpiw
from .predictive import (
    PredictiveSamples, evaluate_unistep, forecast, map_chunks, multistep_forecast, sample_predictive, unistep,
)
from .reports import (
    METRIC_COLUMNS, PICP_COLUMNS, MetricsReport, forecast_report, samples_frame, unistep_report,
)

ZERO_NOISE = NoiseScales(var_q=0.0, var_k=0.0, var_v=0.0, var_z=0.0, var_obs=0.0)
SLOW_TESTS = os.getenv('SMCT_SLOW_TESTS') == '1'


def model_params(seed=3, d=1, depth=4, noise=None):
    params = init_params(d, d, SeededRng(seed), depth=depth, ff_units=3, initial_variance=0.2)
    return params if noise is None else params.with_noise(noise)


def eval_config(**overrides):
    values = dict(particles=4, lag=3, depth=4, ff_units=3)
    values.update(overrides)
    return TrainConfig.from_settings(5, **values)


def model_one_dataset(n_series=30, length=8, seed=2):
    spec = SyntheticSpec.for_model('I', n_series=n_series, length=length, seed=seed)
    return split_normalize(gen_model_I(spec), SYNTHETIC_SPLIT_RATIOS, seed=seed)


class SamplePredictiveTest(SimpleTestCase):
    """Test one-step predictive draws"""

    def test_collapse_to_the_deterministic_prediction(self):
        """Test that noiseless draws equal the deterministic prediction"""
        params = model_params(noise=ZERO_NOISE)
        x = SeededRng(1).normal((2, 2, 1))
        cloud = init_cloud(x[:, 0], params, 1, 3, SeededRng(2))
        draws = sample_predictive(cloud, params, 5, SeededRng(3))
        expected = deterministic_forward(x, params, 3)[:, 0]
        np.testing.assert_allclose(draws, np.broadcast_to(expected[:, None], draws.shape), atol=1e-12)

    def test_zero_weight_particle_is_never_used(self):
        """Test that a particle without weight never seeds a draw"""
        params = model_params(noise=NoiseScales(var_q=0.5, var_k=0.5, var_v=0.5, var_z=0.0, var_obs=0.0))
        cloud = init_cloud(np.array([[0.4]]), params, 2, 3, SeededRng(4))
        with np.errstate(divide='ignore'):
            cloud = replace(cloud, log_weights=np.log([[0.0, 1.0]]))
        draws = sample_predictive(cloud, params, 50, SeededRng(5))
        expected = observation_mean(cloud.window.values[0, 1, 0], params.head)
        np.testing.assert_allclose(draws[0], np.broadcast_to(expected, (50, 1)), atol=1e-12)

    def test_mean_matches_a_long_run(self):
        """Test the sample mean against a longer run"""
        params = model_params()
        x = SeededRng(6).normal((1, 6, 1))
        cloud = filter_sequence(x, params, 5, 3, SeededRng(7)).cloud
        short = sample_predictive(cloud, params, 10000, SeededRng(8))
        long = sample_predictive(cloud, params, 100000, SeededRng(9))
        standard_error = short.std() / np.sqrt(short.size)
        self.assertLess(abs(short.mean() - long.mean()), 4 * standard_error)

    def test_fixed_seed_is_reproducible(self):
        """Test reproducibility under a fixed seed"""
        params = model_params()
        cloud = init_cloud(np.array([[0.1], [0.2]]), params, 3, 3, SeededRng(1))
        np.testing.assert_array_equal(
            sample_predictive(cloud, params, 20, SeededRng(2)),
            sample_predictive(cloud, params, 20, SeededRng(2)),
        )

    def test_at_least_one_sample(self):
        """Test rejection of zero samples"""
        params = model_params()
        cloud = init_cloud(np.array([[0.1]]), params, 3, 3, SeededRng(1))
        with self.assertRaises(DomainError):
            sample_predictive(cloud, params, 0, SeededRng(2))


class MultistepForecastTest(SimpleTestCase):
    """Test autoregressive rollouts"""

    def test_collapse_to_repeated_deterministic_extension(self):
        """Test that noiseless paths repeat the deterministic extension"""
        params = model_params(noise=ZERO_NOISE)
        x = SeededRng(2).normal((2, 1, 1))
        paths = forecast(x, params, 1, 3, history=1, horizon=4, n_samples=3, rng=SeededRng(3))
        sequence = x
        for step in range(4):
            padded = np.concatenate([sequence, np.zeros((2, 1, 1))], axis=1)
            prediction = deterministic_forward(padded, params, 3)[:, -1:]
            np.testing.assert_allclose(paths[:, step], np.broadcast_to(prediction, (2, 3, 1)), atol=1e-10)
            sequence = np.concatenate([sequence, prediction], axis=1)

    def test_shape(self):
        """Test the forecast shape"""
        params = model_params()
        x = SeededRng(4).normal((3, 6, 1))
        self.assertEqual(forecast(x, params, 4, 3, history=3, horizon=5, n_samples=7, rng=SeededRng(5)).shape, (3, 5, 7, 1))

    def test_horizon_must_be_positive(self):
        """Test rejection of a zero horizon"""
        params = model_params()
        cloud = init_cloud(np.array([[0.1]]), params, 3, 3, SeededRng(1))
        with self.assertRaises(DomainError):
            multistep_forecast(cloud, params, 0, 10, SeededRng(2))

    @unittest.skipUnless(SLOW_TESTS, 'set SMCT_SLOW_TESTS=1 to run')
    def test_spread_grows_with_the_horizon(self):
        """Test that the mean predictive variance never shrinks from k=1 to k=5 on Model I"""
        spec = SyntheticSpec.for_model('I', n_series=100, length=24, seed=11)
        x = gen_model_I(spec).observations
        # lag 1 with G(z) = z is Model I itself: X_t = alpha·X_{t-1} + noise of variance sigma2
        noise = NoiseScales(var_q=0.1, var_k=0.1, var_v=0.2, var_z=0.1, var_obs=0.2)
        params = build_params(1, 1, noise=noise, W=[[spec.alpha]], head=build_head(1, layer_norm=False))
        paths = forecast(x, params, 20, 1, history=20, horizon=5, n_samples=400, rng=SeededRng(12))
        spread = paths.var(axis=2).mean(axis=(0, 2))
        self.assertEqual(spread.shape, (5,))
        self.assertTrue(np.all(np.diff(spread) >= 0), msg=str(spread))
        self.assertAlmostEqual(spread[0], spec.sigma2, delta=0.05)

    def test_history_within_the_sequence(self):
        """Test rejection of a history longer than the sequence"""
        with self.assertRaises(DomainError):
            forecast(np.zeros((1, 4, 1)), model_params(), 2, 3, history=5, horizon=1, n_samples=2, rng=SeededRng(0))


class UnistepTest(SimpleTestCase):
    """Test one-step evaluation"""

    def test_shapes(self):
        """Test the shapes of point predictions and draws"""
        params = model_params()
        predictions, draws = unistep(SeededRng(1).normal((2, 5, 1)), params, 3, 2, 6, SeededRng(2))
        self.assertEqual(predictions.shape, (2, 4, 1))
        self.assertEqual(draws.shape, (2, 4, 6, 1))

    def test_chunking_does_not_change_results(self):
        """Test that chunking and threads leave results unchanged"""
        params = model_params()
        observations = SeededRng(3).normal((7, 5, 1))
        rng = SeededRng(4)

        def run(chunk):
            return unistep(observations[chunk], params, 3, 2, 4, [rng.child(int(index)) for index in chunk])

        together = map_chunks(run, np.arange(7), threads=1, chunk_size=7)
        split = map_chunks(run, np.arange(7), threads=3, chunk_size=2)
        for whole, parts in zip(together, split):
            np.testing.assert_array_equal(whole, parts)

    def test_deterministic_model_has_no_draws(self):
        """Test that the deterministic model returns no samples"""
        dataset = model_one_dataset()
        config = eval_config(model_type='deterministic')
        params = model_params()
        indices, predictions, samples = evaluate_unistep(dataset, TEST, params, config, 10, SeededRng(1))
        self.assertIsNone(samples)
        np.testing.assert_allclose(predictions, deterministic_forward(dataset.observations[indices], params, 3))


class MetricsTest(SimpleTestCase):
    """Test mse, dist-mse and interval metrics"""

    def test_mse(self):
        """Test mse against numpy"""
        truth = SeededRng(1).normal((3, 4, 2))
        self.assertEqual(mse(truth, truth), 0.0)
        self.assertAlmostEqual(mse(truth + 0.3, truth), 0.09, places=12)
        with self.assertRaises(DomainError):
            mse(truth, truth[:, :3])

    def test_dist_mse_of_exact_and_offset_draws(self):
        """Test dist-mse for draws at and off the true mean"""
        spec = SyntheticSpec.for_model('I')
        previous = SeededRng(2).normal((4, 5, 1))
        exact = np.repeat((spec.alpha * previous)[:, :, None, :], 10, axis=2)
        self.assertAlmostEqual(dist_mse(exact, previous, spec), 0.0, places=12)
        self.assertAlmostEqual(dist_mse(exact + 0.4, previous, spec), 0.16, places=12)

    def test_dist_mse_mixture(self):
        """Test dist-mse under the Model II mixture"""
        spec = SyntheticSpec.for_model('II')
        previous = np.ones((1, 1, 1))
        draws = np.full((1, 1, 4, 1), spec.alpha)
        expected = (1 - spec.p) * (spec.alpha - spec.beta) ** 2
        self.assertAlmostEqual(dist_mse(draws, previous, spec), expected, places=12)

    def test_dist_mse_needs_ground_truth(self):
        """Test rejection without a synthetic generator"""
        with self.assertRaises(DomainError):
            dist_mse(np.zeros((1, 1, 2, 1)), np.zeros((1, 1, 1)), None)

    def test_true_model_one_draws(self):
        """Test dist-mse of true Model I draws"""
        spec = SyntheticSpec.for_model('I', n_series=200, length=24, seed=11)
        previous = gen_model_I(spec).observations[:, :-1]
        noise = SeededRng(12).normal(previous.shape[:2] + (1000, 1))
        draws = spec.alpha * previous[:, :, None, :] + spec.sigma * noise
        self.assertLess(abs(dist_mse(draws, previous, spec) - 0.50), 0.03)

    def test_true_model_two_draws(self):
        """Test dist-mse of true Model II draws"""
        spec = SyntheticSpec.for_model('II', n_series=200, length=24, seed=13)
        previous = gen_model_II(spec).observations[:, :-1]
        shape = previous.shape[:2] + (1000, 1)
        regime = SeededRng(14).bernoulli(spec.p, shape)
        coefficient = spec.alpha * regime + spec.beta * (1 - regime)
        draws = coefficient * previous[:, :, None, :] + spec.sigma * SeededRng(15).normal(shape)
        self.assertLess(abs(dist_mse(draws, previous, spec) - 0.35), 0.07)

    def test_quantile_rule(self):
        """Test the empirical quantile rule for interval bounds"""
        draws = np.arange(1.0, 101.0)[:, None]
        bounds = intervals_from_samples(draws, 0.95)
        self.assertAlmostEqual(float(bounds.lower[0]), 3.475, places=10)
        self.assertAlmostEqual(float(bounds.upper[0]), 97.525, places=10)

    def test_constant_samples_give_zero_width(self):
        """Test zero width for constant samples"""
        bounds = intervals_from_samples(np.full((2, 3, 40, 1), 1.5))
        np.testing.assert_array_equal(bounds.lower, 1.5)
        np.testing.assert_array_equal(bounds.width, 0.0)

    def test_too_few_samples(self):
        """Test the minimum sample count per level"""
        self.assertEqual(min_samples(0.95), 20)
        with self.assertRaises(DomainError):
            intervals_from_samples(np.zeros((19, 1)), 0.95)
        with self.assertRaises(DomainError):
            intervals_from_samples(np.zeros((50, 1)), 1.0)

    def test_wider_noise_gives_wider_intervals(self):
        """Test that noisier samples widen the interval"""
        noise = SeededRng(3).normal((500, 1))
        narrow = intervals_from_samples(noise)
        wide = intervals_from_samples(2 * noise)
        self.assertGreater(float(wide.width[0]), float(narrow.width[0]))

    def test_full_coverage(self):
        """Test PICP of one for all-covering bounds"""
        truth = SeededRng(4).normal((3, 5, 2))
        bounds = IntervalBounds(lower=truth - 1, upper=truth + 1)
        picp, mpiw, per_step, counts = picp_mpiw(bounds, truth)
        self.assertEqual(picp, 1.0)
        self.assertAlmostEqual(mpiw, 2.0, places=12)
        np.testing.assert_array_equal(per_step, 1.0)
        np.testing.assert_array_equal(counts, 6)

    def test_closed_interval_and_half_coverage(self):
        """Test closed bounds and a half-covered case"""
        bounds = IntervalBounds(lower=np.zeros((2, 2, 1)), upper=np.full((2, 2, 1), 2.0))
        truth = np.array([[[0.0], [3.0]], [[2.0], [-1.0]]])
        picp, mpiw, per_step, _ = picp_mpiw(bounds, truth)
        self.assertEqual(picp, 0.5)
        self.assertEqual(mpiw, 2.0)
        np.testing.assert_array_equal(per_step, [1.0, 0.0])

    def test_overall_picp_is_the_count_weighted_step_mean(self):
        """Test pooled PICP against the per-step mean"""
        rng = SeededRng(5)
        truth = rng.child('truth').normal((6, 4, 2))
        lower = rng.child('lower').normal((6, 4, 2)) - 0.5
        bounds = IntervalBounds(lower=lower, upper=lower + 1.0)
        picp, _, per_step, counts = picp_mpiw(bounds, truth)
        self.assertAlmostEqual(picp, float(np.sum(per_step * counts) / np.sum(counts)), places=12)

    def test_shape_mismatch(self):
        """Test rejection of bounds and truth of different shapes"""
        bounds = IntervalBounds(lower=np.zeros((2, 2, 1)), upper=np.ones((2, 2, 1)))
        with self.assertRaises(DomainError):
            picp_mpiw(bounds, np.zeros((2, 3, 1)))


class ReportsTest(SimpleTestCase):
    """Test metric reports and CSV layouts"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.output = Path(self.tmp.name)

    def test_write_metrics(self):
        """Test the metrics CSV columns"""
        report = MetricsReport(
            mse=0.5, picp=0.9, mpiw=1.2, picp_per_timestep=np.array([1.0, 0.8]),
            counts=np.array([5, 5]), steps=(2, 3), n_series=5,
        )
        paths = report.write(self.output)
        metrics = pd.read_csv(paths[0])
        self.assertEqual(list(metrics.columns), METRIC_COLUMNS)
        self.assertEqual(metrics['metric'].tolist(), ['mse', 'picp', 'mpiw', 'n_series'])
        per_step = pd.read_csv(paths[1])
        self.assertEqual(list(per_step.columns), PICP_COLUMNS)
        self.assertEqual(per_step['t'].tolist(), [2, 3])

    def test_invalid_picp(self):
        """Test rejection of a PICP outside [0, 1]"""
        with self.assertRaises(DomainError):
            MetricsReport(mse=0.1, picp=1.5)

    def test_samples_frame(self):
        """Test the long-format samples frame"""
        samples = PredictiveSamples(draws=np.arange(24.0).reshape(2, 3, 2, 2), steps=(4, 5, 6))
        frame = samples_frame(samples, ('a', 'b'), ('f0', 'f1'))
        self.assertEqual(list(frame.columns), ['series_id', 't', 'draw_id', 'f0', 'f1'])
        self.assertEqual(len(frame), 12)
        self.assertEqual(frame.iloc[1].tolist(), ['a', 4, 1, 2.0, 3.0])

    def test_unistep_report_on_synthetic_data(self):
        """Test a full one-step report on Model I data"""
        dataset = model_one_dataset()
        report, indices, samples = unistep_report(
            dataset, TEST, model_params(), eval_config(), 40, 0.95, SeededRng(1),
        )
        self.assertEqual(set(report.as_dict()), {'mse', 'dist_mse', 'picp', 'mpiw'})
        self.assertEqual(samples.draws.shape, (len(indices), dataset.length - 1, 40, 1))
        self.assertEqual(report.steps, tuple(range(2, dataset.length + 1)))

    def test_deterministic_report_has_mse_only(self):
        """Test that the deterministic report holds mse only"""
        report, _, samples = unistep_report(
            model_one_dataset(), TEST, model_params(), eval_config(model_type='deterministic'), 40, 0.95, SeededRng(1),
        )
        self.assertEqual(set(report.as_dict()), {'mse'})
        self.assertIsNone(report.picp_frame())

    def test_forecast_beyond_the_data_is_not_scored(self):
        """Test that steps past the data are left unscored"""
        dataset = model_one_dataset()
        output = forecast_report(dataset, TEST, model_params(), eval_config(), 6, 4, 20, 0.9, SeededRng(2))
        self.assertIsNone(output.report)
        self.assertEqual(output.samples.steps, (7, 8, 9, 10))
        scored = forecast_report(dataset, TEST, model_params(), eval_config(), 4, 4, 20, 0.9, SeededRng(2))
        self.assertEqual(len(scored.report.picp_per_timestep), 4)
