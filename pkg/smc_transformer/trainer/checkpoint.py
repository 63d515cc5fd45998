# trainer/checkpoint.py
"""
Checkpoints as numpy `.npz` archives.

Layout (format version 1):
    format_version                      int
    model_type                          'smc' or 'deterministic'
    weight/<name>                       every learnable array
    noise                               var_q, var_k, var_v, var_z, var_obs
    ln_epsilon, layer_norm              head settings
    adam_m/<name>, adam_v/<name>        Adam moments (optional)
    opt_step, em_step                   counters
    split, series_ids                   split assignment of the training data
    norm_mean, norm_std                 normalisation statistics (empty when raw)
    config                              JSON of the TrainConfig
"""
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from attention.params import NOISE_FIELDS, HEAD_WEIGHTS, PROJECTION_WEIGHTS, ModelParams, NoiseScales, ObservationHead
from dataio.datasets import NormStats
from numkit.exceptions import SchemaError

from .optim import OptState

FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: ModelParams
    model_type: str = 'smc'
    opt_state: Optional[OptState] = None
    split: Optional[np.ndarray] = None
    series_ids: tuple = ()
    norm_stats: Optional[NormStats] = None
    config: Optional[dict] = None


def save_checkpoint(path, params, model_type='smc', opt_state=None, dataset=None, config=None):
    arrays = {
        'format_version': np.array(FORMAT_VERSION),
        'model_type': np.array(model_type),
        'noise': np.array([getattr(params.noise, name) for name in NOISE_FIELDS]),
        'ln_epsilon': np.array(params.head.ln_epsilon),
        'layer_norm': np.array(params.head.layer_norm),
        'config': np.array(json.dumps(config or {}, sort_keys=True)),
    }
    arrays.update({f'weight/{name}': value for name, value in params.weights().items()})
    if opt_state is not None:
        arrays.update({f'adam_m/{name}': value for name, value in opt_state.first_moment.items()})
        arrays.update({f'adam_v/{name}': value for name, value in opt_state.second_moment.items()})
        arrays['opt_step'] = np.array(opt_state.step)
        arrays['em_step'] = np.array(opt_state.em_step)
    if dataset is not None:
        arrays['split'] = np.asarray(dataset.split, dtype=str)
        arrays['series_ids'] = np.asarray(dataset.series_ids, dtype=str)
        stats = dataset.norm_stats
        arrays['norm_mean'] = np.asarray(stats.mean if stats else [], dtype=np.float64)
        arrays['norm_std'] = np.asarray(stats.std if stats else [], dtype=np.float64)
    with open(path, 'wb') as handle:
        np.savez(handle, **arrays)
    return path


def load_checkpoint(path):
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise SchemaError(f'{path} is not a checkpoint archive: {exc}') from exc
    with archive:
        if 'format_version' not in archive.files or int(archive['format_version']) != FORMAT_VERSION:
            raise SchemaError(f'{path} has an unsupported checkpoint format version')
        weight = {name: archive[f'weight/{name}'] for name in PROJECTION_WEIGHTS + HEAD_WEIGHTS}
        head = ObservationHead(
            **{name: weight[name] for name in HEAD_WEIGHTS},
            ln_epsilon=float(archive['ln_epsilon']),
            layer_norm=bool(archive['layer_norm']),
        )
        params = ModelParams(
            W_q=weight['W_q'], W_k=weight['W_k'], W_v=weight['W_v'], head=head,
            noise=NoiseScales(**dict(zip(NOISE_FIELDS, archive['noise'].tolist()))),
        ).validate()
        opt_state = None
        if 'opt_step' in archive.files:
            opt_state = OptState(
                first_moment={name: archive[f'adam_m/{name}'] for name in weight},
                second_moment={name: archive[f'adam_v/{name}'] for name in weight},
                step=int(archive['opt_step']),
                em_step=int(archive['em_step']),
            )
        norm_stats = None
        if 'norm_mean' in archive.files and archive['norm_mean'].size:
            norm_stats = NormStats(mean=tuple(archive['norm_mean'].tolist()), std=tuple(archive['norm_std'].tolist()))
        return Checkpoint(
            params=params,
            model_type=str(archive['model_type']),
            opt_state=opt_state,
            split=archive['split'] if 'split' in archive.files else None,
            series_ids=tuple(archive['series_ids'].tolist()) if 'series_ids' in archive.files else (),
            norm_stats=norm_stats,
            config=json.loads(str(archive['config'])),
        )
