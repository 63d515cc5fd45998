# trainer/tests.py
import os
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from attention.cell import LatentState, deterministic_forward
from attention.params import NoiseScales, init_params
from attention.tests import build_head, build_params
from dataio.datasets import SYNTHETIC_SPLIT_RATIOS, TEST, TRAIN, VALIDATION, SeriesDataset, split_normalize
from dataio.synthetic import SyntheticSpec, gen_from_model, gen_model_I, gen_model_II
from diffcore.tests import GradientCheckMixin
from diffcore.tape import backward, forward_record
from evalkit.reports import unistep_report
from numkit.exceptions import ConfigError, DomainError, NumericalError, SchemaError, TrainingDivergedError
from numkit.kernels import LOG_2PI
from numkit.rng import SeededRng
from smc.filter import FilterResult, filter_sequence

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, parse_targets
from .em import em_target_variance, em_targets, em_update_variances
from .fit import CROSSVAL_COLUMNS, LOG_COLUMNS, cross_validate, fit
from .loss import deterministic_loss, smc_loss
from .optim import Adam, OptState, constant_schedule, em_step_size, warmup_schedule

SLOW_TESTS = os.getenv('SMCT_SLOW_TESTS') == '1'


def small_config(seed=7, **overrides):
    values = dict(
        particles=3, lag=3, epochs=2, batch_size=4, depth=3, ff_units=3,
        learning_rate=0.01, lr_schedule='constant', patience=None,
    )
    values.update(overrides)
    return TrainConfig.from_settings(seed, **values)


def small_dataset(n_series=20, length=6, seed=1):
    spec = SyntheticSpec.for_model('I', n_series=n_series, length=length, seed=seed)
    return split_normalize(gen_model_I(spec), SYNTHETIC_SPLIT_RATIOS, seed=seed)


def zero_noise_result(x, params):
    """Hand-built single-particle filter result whose noise draws are all zero"""
    batch_size, length, _ = x.shape
    zeros = np.zeros((batch_size, 1, params.depth))
    first = LatentState(q=zeros, k=zeros, v=zeros, eps_q=zeros, eps_k=zeros, eps_v=zeros)
    later = LatentState(
        q=zeros, k=zeros, v=zeros, eps_q=zeros, eps_k=zeros, eps_v=zeros,
        z=zeros, mu_z=zeros, eps_z=zeros,
    )
    return FilterResult(
        cloud=None,
        ancestors=np.zeros((length - 1, batch_size, 1), dtype=int),
        states=(first,) + (later,) * (length - 1),
        weights=np.ones((length, batch_size, 1)),
        obs_logdensity=None,
        sq_residuals={},
        predictions=None,
        log_likelihood=None,
        ess=None,
        lag=1,
    )


class SmcLossTest(GradientCheckMixin, SimpleTestCase):
    """Test the replayed training loss"""

    def setUp(self):
        self.params = init_params(2, 2, SeededRng(5), depth=3, ff_units=2, initial_variance=0.3)
        self.x = SeededRng(6).normal((2, 4, 2))
        self.result = filter_sequence(self.x, self.params, 2, 2, SeededRng(8))

    def test_closed_form_at_the_means(self):
        """Test the loss of a noise-free path against its closed form"""
        head = build_head(2, d_obs=1, out_proj=[[0.5, -0.3]], layer_norm=False)
        params = build_params(2, 1, noise=NoiseScales.constant(1.0), W=[[1.0], [2.0]], head=head)
        x = np.array([[[0.7], [0.0]]])
        x[0, 1] = deterministic_forward(x, params, 1)[0, 0]
        loss = smc_loss(zero_noise_result(x, params), x, params)
        self.assertAlmostEqual(float(loss), (4 * 2 + 1) / 2 * LOG_2PI, places=12)

    def test_weights_are_renormalised(self):
        """Test that scaling the final weights leaves the loss unchanged"""
        weights = SeededRng(3).uniform((2, 2)) + 0.1
        scaled = smc_loss(self.result, self.x, self.params, final_weights=weights * 7.5)
        plain = smc_loss(self.result, self.x, self.params, final_weights=weights)
        self.assertAlmostEqual(float(scaled), float(plain), places=12)

    def test_gradient_matches_finite_differences(self):
        """Test taped gradients against central differences over 20 random configurations"""
        for index in range(20):
            rng = SeededRng(15).child('gradient', index)
            params = init_params(2, 2, rng.child('init'), depth=3, ff_units=2, initial_variance=0.4)
            x = rng.child('x').normal((1, 4, 2))
            result = filter_sequence(x, params, 2, 2, rng.child('filter'))
            with self.subTest(configuration=index):
                self.assertGradientsMatch(
                    lambda ops, weights: smc_loss(result, x, params.with_weights(weights), ops),
                    params.weights(),
                )

    def test_taped_value_equals_untaped(self):
        """Test that recording the loss does not change its value"""
        value, _ = forward_record(
            lambda ops, weights: smc_loss(self.result, self.x, self.params.with_weights(weights), ops),
            self.params.weights(),
        )
        self.assertAlmostEqual(float(value), float(smc_loss(self.result, self.x, self.params)), places=10)

    def test_zero_variance_rejected(self):
        """Test rejection of a zero state variance"""
        params = self.params.with_noise(NoiseScales(var_q=0.0))
        with self.assertRaises(DomainError):
            smc_loss(self.result, self.x, params)

    def test_length_mismatch(self):
        """Test rejection of observations shorter than the filter pass"""
        with self.assertRaises(DomainError):
            smc_loss(self.result, self.x[:, :3], self.params)


class DeterministicLossTest(SimpleTestCase):
    """Test the noise-free mean squared error"""

    def test_matches_forward_predictions(self):
        """Test the loss against the mean squared forward error"""
        params = init_params(2, 2, SeededRng(2), depth=3, ff_units=2)
        x = SeededRng(3).normal((3, 5, 2))
        expected = np.mean((deterministic_forward(x, params, 2) - x[:, 1:]) ** 2)
        self.assertAlmostEqual(float(deterministic_loss(x, params, 2)), expected, places=12)

    def test_gradient_flows_to_every_weight(self):
        """Test that every weight array receives a gradient"""
        params = init_params(2, 2, SeededRng(4), depth=3, ff_units=2)
        x = SeededRng(5).normal((2, 4, 2))
        _, tape = forward_record(
            lambda ops, weights: deterministic_loss(x, params.with_weights(weights), 2, ops),
            params.weights(),
        )
        grads = backward(tape)
        self.assertEqual(set(grads), set(params.weights()))
        self.assertGreater(np.abs(grads['W_v']).sum(), 0.0)


class EmTest(SimpleTestCase):
    """Test the stochastic-approximation variance updates"""

    def setUp(self):
        self.params = init_params(2, 2, SeededRng(9), depth=3, ff_units=2, initial_variance=0.4)
        self.x = SeededRng(10).normal((3, 5, 2))
        self.result = filter_sequence(self.x, self.params, 4, 2, SeededRng(11))

    def test_target_variance_average(self):
        """Test the weighted average of squared residuals"""
        self.assertEqual(float(em_target_variance([[1.0], [3.0]], [1.0])), 2.0)

    def test_target_variance_shape_mismatch(self):
        """Test rejection of residuals and weights of different shapes"""
        with self.assertRaises(DomainError):
            em_target_variance(np.ones((2, 3)), np.ones(2))

    def test_first_step_jumps_to_the_target(self):
        """Test that step one replaces the variance with its target"""
        targets = em_targets(self.result, self.params)
        updated = em_update_variances(self.result, self.params, 1)
        for name, value in targets.items():
            self.assertAlmostEqual(getattr(updated, name), max(value, 1e-6), places=12)

    def test_step_size_blends(self):
        """Test the blend of old variance and target at step two"""
        targets = em_targets(self.result, self.params)
        eta = 4 ** -0.6
        updated = em_update_variances(self.result, self.params, 4, exponent=0.6)
        expected = (1 - eta) * self.params.noise.var_obs + eta * targets['var_obs']
        self.assertAlmostEqual(updated.var_obs, expected, places=12)

    def test_zero_residuals_hit_the_floor(self):
        """Test that zero residuals stop at the variance floor"""
        params = self.params.with_noise(NoiseScales(var_q=0.0, var_k=0.0, var_v=0.0, var_z=0.0, var_obs=1.0))
        result = filter_sequence(self.x, params, 4, 2, SeededRng(12))
        updated = em_update_variances(result, params, 1, floor=1e-6, targets=('q', 'k', 'v', 'z'))
        for name in ('var_q', 'var_k', 'var_v', 'var_z'):
            self.assertEqual(getattr(updated, name), 1e-6)
        self.assertEqual(updated.var_obs, 1.0)

    def test_untargeted_sources_are_kept(self):
        """Test that only targeted variances move"""
        updated = em_update_variances(self.result, self.params, 1, targets=('obs',))
        self.assertEqual(updated.var_q, self.params.noise.var_q)
        self.assertEqual(updated.var_z, self.params.noise.var_z)

    def test_step_counter_must_be_positive(self):
        """Test rejection of a step counter below one"""
        with self.assertRaises(DomainError):
            em_step_size(0, 0.6)
        with self.assertRaises(DomainError):
            em_update_variances(self.result, self.params, 0)

    @unittest.skipUnless(SLOW_TESTS, 'set SMCT_SLOW_TESTS=1 to run')
    def test_observation_variance_converges(self):
        """Test convergence of var_obs to its true value on model-generated data"""
        truth = init_params(1, 1, SeededRng(21), depth=4, ff_units=4, initial_variance=0.1)
        truth = truth.with_noise(NoiseScales(var_q=0.1, var_k=0.1, var_v=0.1, var_z=0.1, var_obs=0.25))
        dataset = gen_from_model(truth, n_series=3200, length=12, lag=4, seed=22)
        params = truth.with_noise(NoiseScales(var_q=0.1, var_k=0.1, var_v=0.1, var_z=0.1, var_obs=1.0))
        rng = SeededRng(23)
        for batch in range(200):
            rows = slice(16 * batch, 16 * (batch + 1))
            result = filter_sequence(dataset.observations[rows], params, 20, 4, rng.child(batch))
            params = params.with_noise(em_update_variances(result, params, batch + 1, targets=('obs',)))
        self.assertLess(abs(params.noise.var_obs - 0.25), 0.05)


class OptimTest(SimpleTestCase):
    """Test Adam and the learning-rate schedules"""

    def test_first_step_moves_by_the_learning_rate(self):
        """Test that the first Adam step moves each weight by the learning rate"""
        params = init_params(2, 2, SeededRng(1), depth=3, ff_units=2)
        grads = {name: np.full(np.shape(value), 2.0) for name, value in params.weights().items()}
        updated, state = Adam(constant_schedule(0.01)).step(params, grads, OptState.for_params(params))
        np.testing.assert_allclose(updated.W_q, params.W_q - 0.01, atol=1e-8)
        self.assertEqual(state.step, 1)

    def test_step_leaves_noise_alone(self):
        """Test that Adam never touches the variances"""
        params = init_params(2, 2, SeededRng(1), depth=3, ff_units=2, initial_variance=0.3)
        grads = {'W_k': np.ones((3, 2))}
        updated, _ = Adam(constant_schedule(0.1)).step(params, grads, OptState.for_params(params))
        self.assertIs(updated.noise, params.noise)
        np.testing.assert_array_equal(updated.W_q, params.W_q)

    def test_unknown_gradient(self):
        """Test rejection of a gradient for an unknown weight"""
        params = init_params(2, 2, SeededRng(1), depth=3, ff_units=2)
        with self.assertRaises(DomainError):
            Adam(constant_schedule(0.1)).step(params, {'var_obs': np.ones(1)}, OptState.for_params(params))

    def test_warmup_peaks_at_the_warmup_step(self):
        """Test the warmup schedule maximum"""
        rate = warmup_schedule(depth=16, warmup_steps=100)
        self.assertAlmostEqual(rate(100), 16 ** -0.5 * 100 ** -0.5, places=12)
        self.assertLess(rate(50), rate(100))
        self.assertLess(rate(400), rate(100))
        self.assertAlmostEqual(rate(400), 16 ** -0.5 * 400 ** -0.5, places=12)


class TrainConfigTest(SimpleTestCase):
    """Test configuration defaults and validation"""

    def test_defaults_from_settings(self):
        """Test defaults taken from the settings"""
        config = TrainConfig.from_settings(3)
        self.assertEqual(config.seed, 3)
        self.assertEqual(config.em_targets, ('q', 'k', 'v', 'z', 'obs'))

    def test_none_overrides_are_ignored(self):
        """Test that None overrides keep the defaults"""
        config = TrainConfig.from_settings(3, particles=None, lag=5)
        self.assertEqual(config.lag, 5)
        self.assertEqual(config.particles, TrainConfig.from_settings(3).particles)

    def test_targets_parsing(self):
        """Test parsing a comma-separated EM target list"""
        self.assertEqual(parse_targets('q, obs'), ('q', 'obs'))
        self.assertEqual(TrainConfig.from_settings(1, em_targets='obs').as_dict()['em_targets'], 'obs')

    def test_invalid_values(self):
        """Test rejection of invalid hyperparameters"""
        for overrides in ({'particles': 0}, {'lag': 0}, {'em_exponent': 0.5}, {'em_targets': 'q,w'},
                          {'model_type': 'lstm'}, {'lr_schedule': 'cosine'}):
            with self.subTest(overrides=overrides), self.assertRaises(ConfigError):
                TrainConfig.from_settings(1, **overrides)

    def test_seed_required(self):
        """Test that a missing seed is an error"""
        with self.assertRaises(ConfigError):
            TrainConfig(seed=None).validate()


class CheckpointTest(SimpleTestCase):
    """Test checkpoint archives"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / 'model.npz'

    def test_round_trip(self):
        """Test saving and loading params, optimiser state and normalisation"""
        dataset = split_normalize(small_dataset(), SYNTHETIC_SPLIT_RATIOS, seed=2, normalize=True)
        params = init_params(1, 1, SeededRng(4), depth=3, ff_units=2, initial_variance=0.2)
        state = OptState.for_params(params)
        state.step, state.em_step = 12, 12
        save_checkpoint(self.path, params, opt_state=state, dataset=dataset, config={'seed': 4})
        loaded = load_checkpoint(self.path)
        for name, value in params.weights().items():
            np.testing.assert_array_equal(loaded.params.weights()[name], value)
        self.assertEqual(loaded.params.noise, params.noise)
        self.assertEqual(loaded.opt_state.step, 12)
        self.assertEqual(loaded.series_ids, dataset.series_ids)
        np.testing.assert_array_equal(loaded.split, dataset.split)
        self.assertEqual(loaded.norm_stats, dataset.norm_stats)
        self.assertEqual(loaded.config, {'seed': 4})
        self.assertEqual(loaded.model_type, 'smc')

    def test_without_optional_parts(self):
        """Test a checkpoint that holds only the params"""
        params = init_params(2, 2, SeededRng(4), depth=3, ff_units=2)
        save_checkpoint(self.path, params, model_type='deterministic')
        loaded = load_checkpoint(self.path)
        self.assertIsNone(loaded.opt_state)
        self.assertIsNone(loaded.norm_stats)
        self.assertEqual(loaded.model_type, 'deterministic')

    def test_unsupported_version(self):
        """Test rejection of an unknown format version"""
        with open(self.path, 'wb') as handle:
            np.savez(handle, format_version=np.array(99))
        with self.assertRaises(SchemaError):
            load_checkpoint(self.path)

    def test_not_an_archive(self):
        """Test rejection of a file that is not a checkpoint"""
        self.path.write_text('series_id,t,f0\n')
        with self.assertRaises(SchemaError):
            load_checkpoint(self.path)


class FitTest(SimpleTestCase):
    """Test the training loop"""

    def test_zero_epochs_returns_initial_params(self):
        """Test that zero epochs return the floored initial params"""
        dataset = small_dataset()
        params = init_params(1, 1, SeededRng(1), depth=3, ff_units=3, initial_variance=1e-9)
        result = fit(dataset, small_config(epochs=0), params=params)
        self.assertIs(result.params, params)
        self.assertEqual(result.log.rows, [])

    def test_log_has_a_row_per_epoch_and_split(self):
        """Test one log row per epoch and split"""
        result = fit(small_dataset(), small_config(epochs=2))
        frame = result.log.to_frame()
        self.assertEqual(list(frame.columns), LOG_COLUMNS)
        self.assertEqual(frame['split'].tolist(), [TRAIN, VALIDATION, TRAIN, VALIDATION])
        self.assertEqual(result.monitored_split, VALIDATION)
        self.assertTrue(np.all(frame['var_obs'] >= 1e-6))

    def test_reruns_are_bit_identical(self):
        """Test that the same seed trains the same weights"""
        dataset = small_dataset()
        first = fit(dataset, small_config(seed=11))
        second = fit(dataset, small_config(seed=11))
        for name, value in first.params.weights().items():
            np.testing.assert_array_equal(second.params.weights()[name], value)
        self.assertEqual(first.params.noise, second.params.noise)
        self.assertTrue(first.log.to_frame().equals(second.log.to_frame()))

    def test_deterministic_model_learns(self):
        """Test that the deterministic model lowers its validation mse"""
        dataset = small_dataset(n_series=40)
        result = fit(dataset, small_config(model_type='deterministic', epochs=10, learning_rate=0.02))
        frame = result.log.to_frame()
        train = frame[frame['split'] == TRAIN]
        self.assertLess(train['loss'].iloc[-1], train['loss'].iloc[0])
        self.assertEqual(result.params.noise, NoiseScales.constant(small_config().initial_variance))

    def test_patience_stops_after_the_best_epoch(self):
        """Test early stopping after the best validation epoch"""
        result = fit(small_dataset(), small_config(epochs=6, patience=1))
        frame = result.log.to_frame()
        validation = frame[frame['split'] == VALIDATION]
        self.assertEqual(result.best_epoch, int(validation.loc[validation['loss'].idxmin(), 'epoch']))
        self.assertLessEqual(frame['epoch'].max(), result.best_epoch + 1)

    def test_divergence_names_the_series(self):
        """Test that a diverged step names its series"""
        dataset = SeriesDataset(
            observations=SeededRng(1).normal((3, 5, 1)),
            series_ids=('a', 'b', 'c'),
            feature_names=('f0',),
            split=np.array([TEST, TRAIN, TEST]),
        )
        error = NumericalError('underflow')
        error.rows = [0]
        with mock.patch('trainer.fit.filter_sequence', side_effect=error):
            with self.assertRaises(TrainingDivergedError) as caught:
                fit(dataset, small_config(epochs=1))
        self.assertEqual(caught.exception.series_id, 'b')
        self.assertEqual(caught.exception.step, 1)

    def test_no_training_series(self):
        """Test rejection of a dataset without training rows"""
        dataset = small_dataset().with_split(np.full(20, TEST))
        with self.assertRaises(DomainError):
            fit(dataset, small_config())

    def test_cross_validation_rows(self):
        """Test one cross-validation row per fold"""
        frame = cross_validate(small_dataset(), small_config(model_type='deterministic', epochs=1), n_folds=3)
        self.assertEqual(list(frame.columns), CROSSVAL_COLUMNS)
        self.assertEqual(frame['fold'].tolist(), [1, 2, 3])
        self.assertTrue(np.all(np.isfinite(frame['mse'])))

    def reproduce(self, model_id):
        """Train M=10, r=32 for 50 epochs on 1000 synthetic sequences and score the test split"""
        generate = gen_model_I if model_id == 'I' else gen_model_II
        dataset = split_normalize(
            generate(SyntheticSpec.for_model(model_id, n_series=1000, length=24, seed=0)),
            SYNTHETIC_SPLIT_RATIOS, seed=0,
        )
        config = TrainConfig.from_settings(0, particles=10, depth=32, epochs=50, batch_size=32)
        result = fit(dataset, config)
        report, _, _ = unistep_report(dataset, TEST, result.params, config, 1000, 0.95, SeededRng(1))
        return result, report

    @unittest.skipUnless(SLOW_TESTS, 'set SMCT_SLOW_TESTS=1 to run')
    def test_model_one_reproduction(self):
        """Test validation and test scores after training on Model I"""
        result, report = self.reproduce('I')
        frame = result.log.to_frame()
        validation = frame[frame['split'] == VALIDATION]
        self.assertTrue(0.45 <= validation['mse'].min() <= 0.55)
        self.assertTrue(0.44 <= report.mse <= 0.58, msg=str(report.as_dict()))
        self.assertTrue(0.42 <= report.dist_mse <= 0.58, msg=str(report.as_dict()))

    @unittest.skipUnless(SLOW_TESTS, 'set SMCT_SLOW_TESTS=1 to run')
    def test_model_two_reproduction(self):
        """Test the test scores after training on the two-regime Model II"""
        _, report = self.reproduce('II')
        self.assertLessEqual(report.mse, 0.40, msg=str(report.as_dict()))
        self.assertTrue(0.28 <= report.dist_mse <= 0.42, msg=str(report.as_dict()))
