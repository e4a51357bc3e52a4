"""Forward pass, loss, gradients and SGD over `Network`s, plus flat ParamVector views."""

import functools
from typing import Callable, Tuple

import chex
import jax
from jax.flatten_util import ravel_pytree
import jax.numpy as jnp
import optax

from utils.common import NumericFailure, jit_jaxfn_with
from utils.types import Network, ParamVector


def flatten(params) -> Tuple[ParamVector, Callable]:
    "returns the flat view of a parameter pytree and the function that restores the pytree"
    return ravel_pytree(params)


def unflatten(net: Network, vec: ParamVector):
    return net.unravel(vec)


@functools.lru_cache(maxsize=None)
def make_optimizer(lr: float, momentum: float=0.9, weight_decay: float=1e-4) -> optax.GradientTransformation:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient before momentum.

    Cached so that networks trained with the same hyperparameters share one `tx` and therefore one
    compiled training step.  The learning rate is an injected hyperparameter, `sgd_step` can
    override it per step.
    """
    @optax.inject_hyperparams
    def _sgd(learning_rate, momentum, weight_decay):
        return optax.chain(
            optax.add_decayed_weights(weight_decay),
            optax.sgd(learning_rate=learning_rate, momentum=momentum),
        )
    return _sgd(learning_rate=lr, momentum=momentum, weight_decay=weight_decay)


def check_input(net: Network, batch: jax.Array) -> None:
    if tuple(batch.shape[1:]) != net.input_shape:
        raise ValueError("batch of shape {} does not match the network input shape {}".format(
            tuple(batch.shape), net.input_shape,
        ))


def cross_entropy(logits: jax.Array, labels: jax.Array) -> jax.Array:
    return optax.softmax_cross_entropy_with_integer_labels(logits, labels).mean()


@jax.jit
def _logits(net: Network, batch: jax.Array) -> jax.Array:
    return net.apply_fn({"params": net.params}, batch)


def logits(net: Network, batch: jax.Array) -> jax.Array:
    check_input(net, batch)
    return _logits(net, batch)


def forward(net: Network, batch: jax.Array) -> jax.Array:
    "[B, *input_shape] -> [B, C] class probabilities"
    return jax.nn.softmax(logits(net, batch), axis=-1)


@jax.jit
def _features(net: Network, batch: jax.Array) -> jax.Array:
    _, features = net.apply_fn({"params": net.params}, batch, return_features=True)
    return features


def penultimate_features(net: Network, batch: jax.Array) -> jax.Array:
    "activations of the last hidden layer, i.e. the input of the classification head"
    check_input(net, batch)
    return _features(net, batch)


@jax.jit
def _loss_and_grad(net: Network, batch: jax.Array, labels: jax.Array):
    def loss_fn(params):
        return cross_entropy(net.apply_fn({"params": params}, batch), labels)
    loss, grads = jax.value_and_grad(loss_fn)(net.params)
    return loss, ravel_pytree(grads)[0]


def loss_and_grad(net: Network, batch: jax.Array, labels: jax.Array) -> Tuple[float, ParamVector]:
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. the flat parameters."""
    check_input(net, batch)
    chex.assert_shape(labels, (batch.shape[0],))
    if (labels < 0).any() or (labels >= net.n_classes).any():
        raise ValueError("labels must be in [0, {})".format(net.n_classes))
    loss, grad = _loss_and_grad(net, batch, labels)
    if not (jnp.isfinite(loss) and jnp.isfinite(grad).all()):
        raise NumericFailure(stage="loss_and_grad", epoch=0, detail="non-finite loss or gradient")
    return float(loss), grad


def sgd_step(net: Network, gradient: ParamVector, lr: float | None=None) -> Network:
    """One optimizer step with a flat gradient.  The optimizer (momentum, weight decay) is the one
    attached to `net`; if given, `lr` overrides its learning rate for this and later steps.
    """
    if lr is not None:
        if lr < 0:
            raise ValueError("learning rate must be non-negative, got {}".format(lr))
        opt_state = net.opt_state
        net = net.replace(opt_state=opt_state._replace(
            hyperparams={**opt_state.hyperparams, "learning_rate": jnp.asarray(lr, dtype=jnp.float64)},
        ))
    return net.apply_gradients(grads=net.unravel(gradient))


@jax.jit
def train_step(net: Network, batch: jax.Array, labels: jax.Array) -> Tuple[Network, jax.Array]:
    def loss_fn(params):
        return cross_entropy(net.apply_fn({"params": params}, batch), labels)
    loss, grads = jax.value_and_grad(loss_fn)(net.params)
    return net.apply_gradients(grads=grads), loss


@jax.jit
def poisoned_train_step(
    net: Network,
    batch: jax.Array,
    labels: jax.Array,
    poisoned_batch: jax.Array,
    poisoned_labels: jax.Array,
) -> Tuple[Network, jax.Array]:
    "clean and poisoned terms are summed unweighted"
    def loss_fn(params):
        clean = cross_entropy(net.apply_fn({"params": params}, batch), labels)
        backdoor = cross_entropy(net.apply_fn({"params": params}, poisoned_batch), poisoned_labels)
        return clean + backdoor
    loss, grads = jax.value_and_grad(loss_fn)(net.params)
    return net.apply_gradients(grads=grads), loss


@jit_jaxfn_with(static_argnames=["batch_size"])
def predict(net: Network, images: jax.Array, batch_size: int=1024) -> jax.Array:
    "argmax predictions, evaluated in chunks"
    n = images.shape[0]
    preds = [
        jnp.argmax(net.apply_fn({"params": net.params}, images[i:i+batch_size]), axis=-1)
        for i in range(0, n, batch_size)
    ]
    return jnp.concatenate(preds) if len(preds) > 0 else jnp.zeros((0,), dtype=jnp.int64)
