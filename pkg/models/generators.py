import math
from typing import Tuple

import flax.linen as nn
import jax
import jax.numpy as jnp

from utils.types import TriggerGenerator


class TriggerAutoencoder(nn.Module):
    # number of units of the bottleneck
    hidden: int
    # the decoder output is tanh-squashed into [-raw_bound, raw_bound]
    raw_bound: float

    @nn.compact
    def __call__(self, x: jax.Array) -> jax.Array:
        """
        Inputs:
            x `[B, *sample_shape]`: clean samples in [0, 1]

        Returns:
            noise `[B, *sample_shape]`: raw (unprojected) trigger noise
        """
        B, sample_shape = x.shape[0], x.shape[1:]
        dim = math.prod(sample_shape)

        x = x.reshape(B, dim)
        x = nn.Dense(
            self.hidden,
            name="encoder",
            param_dtype=jnp.float64,
            dtype=jnp.float64,
        )(x)
        x = nn.relu(x)
        x = nn.Dense(
            dim,
            name="decoder",
            param_dtype=jnp.float64,
            dtype=jnp.float64,
        )(x)
        x = self.raw_bound * nn.tanh(x)

        return x.reshape(B, *sample_shape)


def make_generator(
    KEY: jax.Array,
    input_shape: Tuple[int, ...],
    hidden: int,
    epsilon: float,
) -> TriggerGenerator:
    if epsilon < 0:
        raise ValueError("trigger norm bound must be non-negative, got {}".format(epsilon))
    model = TriggerAutoencoder(hidden=hidden, raw_bound=float(epsilon))
    variables = model.init(KEY, jnp.zeros((1, *input_shape), dtype=jnp.float64))
    return TriggerGenerator(
        params=variables["params"],
        apply_fn=model.apply,
        epsilon=float(epsilon),
    )
