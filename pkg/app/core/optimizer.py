"""
Adam optimizer over parameter pytrees

m_t = b1 m + (1 - b1) g
v_t = b2 v + (1 - b2) g²
θ  <- θ + lr · m̂ / (sqrt(v̂) + eps)     (ascent: the ELBO is maximized)

The update is a pure function of (params, grads, state) so it can run
inside a jitted training step.
"""

import logging
from dataclasses import dataclass
from typing import Any, NamedTuple

import jax
import jax.numpy as jnp

from app.core.errors import ConfigError

logger = logging.getLogger(__name__)

jax.config.update("jax_enable_x64", True)


class AdamState(NamedTuple):
    step: jnp.ndarray
    first_moment: Any
    second_moment: Any


@dataclass(frozen=True)
class Adam:
    """Adaptive moment estimation with bias correction"""

    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive", {"learning_rate": self.learning_rate})
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam decay rates must lie in [0, 1)", {"beta1": self.beta1, "beta2": self.beta2})

    def init(self, params) -> AdamState:
        zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
        return AdamState(step=jnp.zeros((), dtype=jnp.int32), first_moment=zeros, second_moment=zeros)

    def update(self, params, grads, state: AdamState):
        """One ascent step; returns (new params, new state)"""
        step = state.step + 1
        first = jax.tree_util.tree_map(lambda m, g: self.beta1 * m + (1.0 - self.beta1) * g, state.first_moment, grads)
        second = jax.tree_util.tree_map(lambda v, g: self.beta2 * v + (1.0 - self.beta2) * (g * g), state.second_moment, grads)

        correction1 = 1.0 - self.beta1 ** step
        correction2 = 1.0 - self.beta2 ** step

        def _apply(param, m, v):
            return param + self.learning_rate * (m / correction1) / (jnp.sqrt(v / correction2) + self.eps)

        new_params = jax.tree_util.tree_map(_apply, params, first, second)
        return new_params, AdamState(step=step, first_moment=first, second_moment=second)


__all__ = ["Adam", "AdamState"]
