"""Flexible trigger: per-sample l2-bounded noise from a generator network, and the Stage I update
of the generator against a frozen classifier."""

from typing import Tuple

import chex
import jax
import jax.numpy as jnp
import jax.random as jran
import numpy as np
import optax

from models.substrate import check_input, cross_entropy, make_optimizer
from utils.common import NumericFailure, jit_jaxfn_with
from utils.data import minibatch_indices
from utils.types import AttackTargeting, Network, TriggerGenerator


def project_noise(noise: jax.Array, epsilon: float) -> jax.Array:
    """noise / max(1, ‖noise‖₂ / ε), per sample (leading axis is the batch).

    At ‖noise‖₂ = ε the inactive branch is taken.  The gradient of the active branch goes through
    the norm.
    """
    if epsilon == 0:
        return jnp.zeros_like(noise)
    axes = tuple(range(1, noise.ndim))
    sq = jnp.sum(noise**2, axis=axes, keepdims=True)
    # keeps the gradient finite at zero noise
    active = sq > epsilon**2
    norm = jnp.sqrt(jnp.where(active, sq, epsilon**2))
    scale = jnp.where(active, norm / epsilon, 1.)
    return noise / scale


def _raw_noise(gen: TriggerGenerator, params, x: jax.Array) -> jax.Array:
    return gen.apply_fn({"params": params}, x)


def _generate(gen: TriggerGenerator, params, x: jax.Array) -> jax.Array:
    return project_noise(_raw_noise(gen, params, x), gen.epsilon)


def _apply(gen: TriggerGenerator, params, x: jax.Array) -> jax.Array:
    return jnp.clip(x + _generate(gen, params, x), 0., 1.)


@jax.jit
def generate(gen: TriggerGenerator, x: jax.Array) -> jax.Array:
    "projected trigger noise g_ξ(x) for a batch `[B, *sample_shape]`"
    return _generate(gen, gen.params, x)


@jax.jit
def apply(gen: TriggerGenerator, x: jax.Array) -> jax.Array:
    "T_ξ(x) = clip(x + g_ξ(x), 0, 1); the norm bound holds before clipping"
    return _apply(gen, gen.params, x)


def apply_batched(gen: TriggerGenerator, x: jax.Array, batch_size: int=1024) -> jax.Array:
    if x.shape[0] == 0:
        return x
    return jnp.concatenate([apply(gen, x[i:i+batch_size]) for i in range(0, x.shape[0], batch_size)])


def _backdoor_loss(params, gen: TriggerGenerator, frozen: Network, x: jax.Array, target: jax.Array) -> jax.Array:
    poisoned = _apply(gen, params, x)
    logits = frozen.apply_fn({"params": frozen.params}, poisoned)
    return cross_entropy(logits, target)


@jit_jaxfn_with(static_argnames=["tx"])
def _generator_step(
    gen: TriggerGenerator,
    opt_state: optax.OptState,
    frozen: Network,
    x: jax.Array,
    target: jax.Array,
    tx: optax.GradientTransformation,
) -> Tuple[TriggerGenerator, optax.OptState, jax.Array]:
    # classifier parameters are closed over, only ξ receives gradients
    loss, grads = jax.value_and_grad(_backdoor_loss)(gen.params, gen, frozen, x, target)
    updates, opt_state = tx.update(grads, opt_state, gen.params)
    return gen.replace(params=optax.apply_updates(gen.params, updates)), opt_state, loss


@jax.jit
def generator_loss(gen: TriggerGenerator, frozen: Network, x: jax.Array, target_label: int) -> jax.Array:
    "mean backdoor loss L(f(T_ξ(x)), η(y)) over the given samples"
    target = jnp.full((x.shape[0],), target_label, dtype=jnp.int64)
    return _backdoor_loss(gen.params, gen, frozen, x, target)


def train_generator(
    KEY: jax.Array,
    gen: TriggerGenerator,
    frozen: Network,
    images: jax.Array,
    targeting: AttackTargeting,
    epochs: int,
    lr: float,
    momentum: float=0.9,
    batch_size: int=64,
) -> TriggerGenerator:
    """Stage I: ξ ← ξ − γ_T ∇_ξ L(f_θ(T_ξ(x)), η(y)) with f_θ fixed.

    SGD with momentum and no weight decay on ξ; a fresh momentum buffer per call, the parameters
    carry over from the previous call.

    Inputs:
        images `[N, *sample_shape]`: the poisoned subset D_bd (or the colluders' pooled subsets)
    """
    if epochs < 0:
        raise ValueError("generator epochs must be non-negative, got {}".format(epochs))
    if epochs == 0 or images.shape[0] == 0:
        return gen
    check_input(frozen, images)
    chex.assert_equal(frozen.n_classes, targeting.n_classes)

    tx = make_optimizer(lr, momentum=momentum, weight_decay=0.)
    opt_state = tx.init(gen.params)
    n = images.shape[0]
    for epoch in range(epochs):
        KEY, key_perm = jran.split(KEY, 2)
        loss = jnp.zeros((), dtype=jnp.float64)
        for idcs in minibatch_indices(key_perm, n, batch_size):
            x = images[idcs]
            target = targeting.relabel(jnp.zeros((x.shape[0],), dtype=jnp.int64))
            gen, opt_state, loss = _generator_step(gen, opt_state, frozen, x, target, tx=tx)
        if not np.isfinite(float(loss)):
            raise NumericFailure(stage="trigger", epoch=epoch)
    return gen
