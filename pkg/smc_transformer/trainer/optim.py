# trainer/optim.py
"""Adam over the weight partition of ModelParams, with learning-rate schedules"""
import math
from dataclasses import dataclass, field

import numpy as np

from numkit.exceptions import DomainError


def constant_schedule(learning_rate):
    def rate(step):
        return learning_rate
    return rate


def warmup_schedule(depth, warmup_steps):
    """depth^-0.5 · min(step^-0.5, step · warmup^-1.5)"""
    def rate(step):
        step = max(step, 1)
        return depth ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)
    return rate


def make_schedule(config):
    if config.lr_schedule == 'warmup':
        return warmup_schedule(config.depth, config.warmup_steps)
    return constant_schedule(config.learning_rate)


@dataclass
class OptState:
    """
    Adam moments per weight, the optimisation step count and the EM step count p.

    p increases once per processed batch, independently of the Adam step.
    """
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step: int = 0
    em_step: int = 0

    @classmethod
    def for_params(cls, params):
        weights = params.weights()
        return cls(
            first_moment={name: np.zeros_like(value) for name, value in weights.items()},
            second_moment={name: np.zeros_like(value) for name, value in weights.items()},
        )


class Adam:
    """
    Adam (Kingma & Ba) on the learnable weights.

    The noise variances are not in the weight partition, so a step never
    touches them.
    """

    def __init__(self, schedule, beta1=0.9, beta2=0.98, epsilon=1e-9):
        self.schedule = schedule
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon

    @classmethod
    def from_config(cls, config):
        return cls(make_schedule(config), config.adam_beta1, config.adam_beta2, config.adam_epsilon)

    def step(self, params, grads, state):
        """
        One update of every weight that has a gradient.

        Returns:
            (new params, state); state is updated in place
        """
        weights = params.weights()
        unknown = set(grads) - set(weights)
        if unknown:
            raise DomainError(f'Gradients for unknown weights {sorted(unknown)}')
        state.step += 1
        rate = self.schedule(state.step)
        correction1 = 1.0 - self.beta1 ** state.step
        correction2 = 1.0 - self.beta2 ** state.step
        updated = {}
        for name, grad in grads.items():
            m = self.beta1 * state.first_moment[name] + (1.0 - self.beta1) * grad
            v = self.beta2 * state.second_moment[name] + (1.0 - self.beta2) * grad * grad
            state.first_moment[name] = m
            state.second_moment[name] = v
            updated[name] = weights[name] - rate * (m / correction1) / (np.sqrt(v / correction2) + self.epsilon)
        return params.with_weights(updated), state


def em_step_size(p, exponent):
    """η_p = p^-exponent"""
    if p < 1:
        raise DomainError(f'EM step counter must be at least 1, got {p}')
    return math.pow(p, -exponent)
