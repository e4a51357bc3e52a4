import math
from typing import Tuple

import chex
import flax.linen as nn
import jax
import jax.numpy as jnp
import jax.random as jran

from models.substrate import make_optimizer
from utils.common import mkValueError
from utils.types import LayerKind, LayerSpec, ModelConfig, Network


def fan_in_uniform(fan_in: int):
    """U(-sqrt(1/fan_in), +sqrt(1/fan_in)), used for both kernels and biases."""
    bound = math.sqrt(1 / fan_in)
    def init(key, shape, dtype=jnp.float64):
        return jran.uniform(key, shape, dtype, -bound, bound)
    return init


class Classifier(nn.Module):
    "Layered classifier f_θ, a stack of `LayerSpec`s followed by a dense classification head."

    layers: Tuple[LayerSpec, ...]
    n_classes: int

    @nn.compact
    def __call__(self, x: jax.Array, return_features: bool=False) -> jax.Array | Tuple[jax.Array, jax.Array]:
        """
        Inputs:
            x `[B, *input_shape]`: samples in [0, 1]
            return_features: also return the activations that feed the classification head

        Returns:
            logits `[B, n_classes]`
            features `[B, D]` (only if `return_features`)
        """
        for i, layer in enumerate(self.layers):
            kind: LayerKind = layer.kind
            if kind == "dense":
                fan_in = x.shape[-1]
                x = nn.Dense(
                    layer.features,
                    name="dense{}".format(i),
                    kernel_init=fan_in_uniform(fan_in),
                    bias_init=fan_in_uniform(fan_in),
                    param_dtype=jnp.float64,
                    dtype=jnp.float64,
                )(x)
            elif kind == "conv2d":
                chex.assert_rank(x, 4)
                fan_in = x.shape[-1] * layer.kernel[0] * layer.kernel[1]
                x = nn.Conv(
                    layer.features,
                    kernel_size=layer.kernel,
                    strides=1,
                    padding="VALID",
                    name="conv{}".format(i),
                    kernel_init=fan_in_uniform(fan_in),
                    bias_init=fan_in_uniform(fan_in),
                    param_dtype=jnp.float64,
                    dtype=jnp.float64,
                )(x)
            elif kind == "relu":
                x = nn.relu(x)
            elif kind == "flatten":
                x = x.reshape(x.shape[0], -1)
            else:
                raise mkValueError(desc="layer kind", value=kind, type=LayerKind)

        # the head always sees a flat input
        features = x.reshape(x.shape[0], -1)
        fan_in = features.shape[-1]
        logits = nn.Dense(
            self.n_classes,
            name="head",
            kernel_init=fan_in_uniform(fan_in),
            bias_init=fan_in_uniform(fan_in),
            param_dtype=jnp.float64,
            dtype=jnp.float64,
        )(features)

        if return_features:
            return logits, features
        return logits


def make_classifier(
    KEY: jax.Array,
    layers: Tuple[LayerSpec, ...],
    input_shape: Tuple[int, ...],
    n_classes: int,
    tx=None,
) -> Network:
    """Initialize a classifier network.  `tx` defaults to SGD with zero learning rate, local training
    sessions replace it through `Network.with_optimizer`.
    """
    model = Classifier(layers=tuple(layers), n_classes=n_classes)
    init_input = jnp.zeros((1, *input_shape), dtype=jnp.float64)
    variables = model.init(KEY, init_input)
    tx = tx if tx is not None else make_optimizer(0., momentum=0., weight_decay=0.)
    return Network.create(
        apply_fn=model.apply,
        params=variables["params"],
        tx=tx,
        input_shape=tuple(input_shape),
        n_classes=n_classes,
    )


def _describe(layers: Tuple[LayerSpec, ...]) -> str:
    return "->".join(
        layer.kind if layer.features is None else "{}({})".format(layer.kind, layer.features)
        for layer in layers
    )


def make_classifier_from_config(
    KEY: jax.Array,
    cfg: ModelConfig,
    input_shape: Tuple[int, ...],
    n_classes: int,
) -> Tuple[Network, str]:
    layers = cfg.resolved_layers()
    return make_classifier(KEY, layers, input_shape, n_classes), _describe(layers) + "->head({})".format(n_classes)
