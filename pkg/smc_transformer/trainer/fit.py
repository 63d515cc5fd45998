# trainer/fit.py
"""
Training loop: per batch, filter every sequence, differentiate the replayed
loss, take an Adam step on the weights, then one EM step on the variances.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from attention.cell import deterministic_forward
from attention.params import NOISE_FIELDS, ModelParams, init_params
from dataio.datasets import TRAIN, VALIDATION, fold_assignment, iter_batches
from diffcore.tape import backward, forward_record, gradient_is_finite
from numkit.exceptions import DomainError, NumericalError, TrainingDivergedError
from numkit.kernels import ARRAY_OPS
from numkit.rng import SeededRng
from smc.filter import filter_sequence

from .em import em_update_variances
from .loss import deterministic_loss, smc_loss
from .optim import Adam, OptState

logger = logging.getLogger(__name__)

LOG_COLUMNS = ['epoch', 'split', 'loss', 'mse'] + list(NOISE_FIELDS)
CROSSVAL_COLUMNS = ['fold', 'loss', 'mse']


@dataclass
class TrainingLog:
    """Per-epoch loss, mse and current variances for each split"""
    rows: list = field(default_factory=list)

    def record(self, epoch, split, summary, noise):
        row = {'epoch': epoch, 'split': split, 'loss': summary.loss, 'mse': summary.mse}
        row.update(noise.as_dict())
        self.rows.append(row)
        return row

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=LOG_COLUMNS)

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False)
        return path


@dataclass(frozen=True)
class EvalSummary:
    loss: float
    mse: float


@dataclass
class FitResult:
    """Best parameters (by monitored loss), the log, the final optimiser state"""
    params: ModelParams
    log: TrainingLog
    opt_state: OptState
    best_epoch: int = 0
    monitored_split: Optional[str] = None


def sequence_streams(rng, indices):
    """One stream per sequence keyed by its dataset index"""
    return [rng.child(int(index)) for index in indices]


def _diverged_series(dataset, batch, rows=None):
    if rows:
        return dataset.series_ids[batch[rows[0]]]
    return ','.join(dataset.series_ids[index] for index in batch)


def batch_gradients(x, params, config, streams):
    """
    Loss value and weight gradients for one batch.

    Returns:
        (loss, grads, filter result or None for the deterministic model)
    """
    if config.model_type == 'deterministic':
        value, tape = forward_record(
            lambda ops, weights: deterministic_loss(x, params.with_weights(weights), config.lag, ops),
            params.weights(),
        )
        return float(value), backward(tape), None
    result = filter_sequence(x, params, config.particles, config.lag, streams)
    value, tape = forward_record(
        lambda ops, weights: smc_loss(result, x, params.with_weights(weights), ops),
        params.weights(),
    )
    return float(value), backward(tape), result


def _squared_error(params, x, config, result):
    predictions = deterministic_forward(x, params, config.lag) if result is None else result.predictions
    return float(np.sum((predictions - x[:, 1:]) ** 2)), predictions.size


def evaluate(params, dataset, split, config, rng):
    """
    Loss and point-prediction mse on one split, without gradients.

    Returns:
        EvalSummary, or None when the split is empty
    """
    indices = dataset.indices(split)
    if indices.size == 0:
        return None
    loss_total = squared_total = 0.0
    count = 0
    for batch in iter_batches(indices, config.batch_size):
        x = dataset.observations[batch]
        if config.model_type == 'deterministic':
            result = None
            loss = float(deterministic_loss(x, params, config.lag))
        else:
            result = filter_sequence(x, params, config.particles, config.lag, sequence_streams(rng, batch))
            loss = float(smc_loss(result, x, params, ARRAY_OPS))
        squared, size = _squared_error(params, x, config, result)
        loss_total += loss * len(batch)
        squared_total += squared
        count += size
    return EvalSummary(loss=loss_total / indices.size, mse=squared_total / count)


def fit(dataset, config, params=None):
    """
    Train on the train split, monitor the validation split (train when empty).

    Args:
        dataset: SeriesDataset with a split assignment
        config: TrainConfig
        params: starting parameters, freshly initialised from the seed when None

    Returns:
        FitResult holding the parameters of the best monitored epoch

    Raises:
        TrainingDivergedError: non-finite loss or gradient
    """
    config.validate()
    train_indices = dataset.indices(TRAIN)
    if train_indices.size == 0:
        raise DomainError('The dataset has no training series')
    rng = SeededRng(config.seed)
    if params is None:
        params = init_params(
            dataset.n_features, dataset.n_features, rng.child('init'),
            depth=config.depth, ff_units=config.ff_units, initial_variance=config.initial_variance,
        )
    log = TrainingLog()
    state = OptState.for_params(params)
    monitored = VALIDATION if dataset.indices(VALIDATION).size else TRAIN
    if config.epochs == 0:
        return FitResult(params=params, log=log, opt_state=state, monitored_split=monitored)
    if config.model_type == 'smc':
        params = params.with_noise(params.noise.floored(config.variance_floor))

    adam = Adam.from_config(config)
    best_loss, best_params, best_epoch = math.inf, params, 0
    stale = 0
    for epoch in range(1, config.epochs + 1):
        epoch_rng = rng.child('epoch', epoch)
        loss_total = squared_total = 0.0
        count = 0
        for batch in iter_batches(train_indices, config.batch_size, epoch_rng.child('shuffle')):
            x = dataset.observations[batch]
            try:
                loss, grads, result = batch_gradients(x, params, config, sequence_streams(epoch_rng, batch))
            except NumericalError as exc:
                raise TrainingDivergedError(state.step + 1, _diverged_series(dataset, batch, getattr(exc, 'rows', None))) from exc
            if not math.isfinite(loss) or not gradient_is_finite(grads):
                rows = None
                if result is not None:
                    rows = np.flatnonzero(~np.isfinite(result.log_likelihood)).tolist()
                raise TrainingDivergedError(state.step + 1, _diverged_series(dataset, batch, rows), loss)
            squared, size = _squared_error(params, x, config, result)
            loss_total += loss * len(batch)
            squared_total += squared
            count += size
            params, state = adam.step(params, grads, state)
            if result is not None:
                state.em_step += 1
                params = params.with_noise(em_update_variances(
                    result, params, state.em_step,
                    exponent=config.em_exponent, floor=config.variance_floor, targets=config.em_targets,
                ))
        train_summary = EvalSummary(loss=loss_total / train_indices.size, mse=squared_total / count)
        log.record(epoch, TRAIN, train_summary, params.noise)
        summary = train_summary
        if monitored == VALIDATION:
            summary = evaluate(params, dataset, VALIDATION, config, rng.child('evaluation'))
            log.record(epoch, VALIDATION, summary, params.noise)
        logger.info(
            'Epoch %d/%d: train loss %.4f mse %.4f, %s loss %.4f mse %.4f, var_obs %.4f',
            epoch, config.epochs, train_summary.loss, train_summary.mse,
            monitored, summary.loss, summary.mse, params.noise.var_obs,
        )
        if summary.loss < best_loss:
            best_loss, best_params, best_epoch = summary.loss, params, epoch
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                logger.info('Stopping early after %d epochs without improvement', stale)
                break
    return FitResult(params=best_params, log=log, opt_state=state, best_epoch=best_epoch, monitored_split=monitored)


def cross_validate(dataset, config, n_folds=5):
    """
    Rotate the validation fold over the non-test series.

    Returns:
        DataFrame with columns fold, loss, mse (validation scores of each fold)
    """
    pool = np.sort(np.concatenate([dataset.indices(TRAIN), dataset.indices(VALIDATION)]))
    folds = fold_assignment(pool, n_folds, SeededRng(config.seed).child('folds'))
    rows = []
    for number, fold in enumerate(folds, start=1):
        split = dataset.split.copy()
        split[pool] = TRAIN
        split[fold] = VALIDATION
        rotated = dataset.with_split(split)
        fitted = fit(rotated, config)
        summary = evaluate(fitted.params, rotated, VALIDATION, config, SeededRng(config.seed).child('evaluation'))
        logger.info('Fold %d/%d: loss %.4f mse %.4f', number, n_folds, summary.loss, summary.mse)
        rows.append({'fold': number, 'loss': summary.loss, 'mse': summary.mse})
    return pd.DataFrame(rows, columns=CROSSVAL_COLUMNS)
