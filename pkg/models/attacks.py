"""Agent behaviors: benign local training, the FTA malicious agent, and the patch-trigger baseline."""

import dataclasses
from typing import Tuple

import chex
import jax
import jax.numpy as jnp
import jax.random as jran
import numpy as np

from models import trigger
from models.substrate import make_optimizer, poisoned_train_step, train_step
from utils.common import NumericFailure
from utils.data import minibatch_indices
from utils.types import (
    AgentUpdate,
    AttackTargeting,
    Dataset,
    ExperimentConfig,
    Network,
    PatchSpec,
    PoisonSplit,
    TriggerGenerator,
)


@dataclasses.dataclass(frozen=True)
class LocalHyperparams:
    batch_size: int=64
    momentum: float=0.9
    weight_decay: float=1e-4
    benign_epochs: int=2
    benign_lr: float=0.1
    # e_f, γ_f
    backdoor_epochs: int=10
    backdoor_lr: float=0.1
    # e_T, γ_T
    generator_epochs: int=20
    generator_lr: float=0.01
    generator_momentum: float=0.9
    generator_batch_size: int=64

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "LocalHyperparams":
        local, gen = cfg.attack.local, cfg.attack.generator
        return cls(
            batch_size=cfg.fl.batch_size,
            momentum=cfg.fl.momentum,
            weight_decay=cfg.fl.weight_decay,
            benign_epochs=local.benign_epochs,
            benign_lr=local.benign_lr,
            backdoor_epochs=local.backdoor_epochs,
            backdoor_lr=local.backdoor_lr,
            generator_epochs=gen.epochs,
            generator_lr=gen.lr,
            generator_momentum=gen.momentum,
            generator_batch_size=gen.batch_size,
        )


def _local_sgd(
    KEY: jax.Array,
    global_net: Network,
    data: Dataset,
    poisoned: jax.Array | None,
    targeting: AttackTargeting | None,
    epochs: int,
    lr: float,
    hp: LocalHyperparams,
    stage: str,
) -> Network:
    """Shuffled clean minibatches over all of `data`.  When `poisoned` holds samples, every step also
    draws a fresh poisoned minibatch, relabeled to the target, and minimizes the unweighted sum of
    both losses.
    """
    net = global_net.with_optimizer(make_optimizer(lr, momentum=hp.momentum, weight_decay=hp.weight_decay))
    with_backdoor = poisoned is not None and poisoned.shape[0] > 0
    for epoch in range(epochs):
        KEY, key_perm = jran.split(KEY, 2)
        loss = jnp.zeros((), dtype=jnp.float64)
        for step, idcs in enumerate(minibatch_indices(key_perm, data.size, hp.batch_size)):
            if with_backdoor:
                n_bd = min(len(idcs), poisoned.shape[0])
                bd_idcs = jran.choice(jran.fold_in(key_perm, step), poisoned.shape[0], (n_bd,), replace=False)
                x_bd = poisoned[bd_idcs]
                net, loss = poisoned_train_step(
                    net,
                    data.images[idcs],
                    data.labels[idcs],
                    x_bd,
                    targeting.relabel(jnp.zeros((n_bd,), dtype=jnp.int64)),
                )
            else:
                net, loss = train_step(net, data.images[idcs], data.labels[idcs])
        if not np.isfinite(float(loss)):
            raise NumericFailure(stage=stage, epoch=epoch)
    return net


def _delta(global_net: Network, local_net: Network) -> jax.Array:
    return local_net.flat_params - global_net.flat_params


def benign_local_train(
    KEY: jax.Array,
    global_net: Network,
    data: Dataset,
    epochs: int,
    lr: float,
    hp: LocalHyperparams=LocalHyperparams(),
    agent_id: int=0,
) -> AgentUpdate:
    if epochs < 1:
        raise ValueError("benign training needs at least one epoch, got {}".format(epochs))
    if data.size == 0:
        raise ValueError("agent {} has no local samples".format(agent_id))
    local = _local_sgd(KEY, global_net, data, None, None, epochs, lr, hp, stage="benign")
    return AgentUpdate(delta=_delta(global_net, local), agent_id=agent_id)


def _check_split(train: Dataset, split: PoisonSplit, agent_id: int) -> Tuple[Dataset, jax.Array]:
    if len(split.clean_indices) == 0:
        raise ValueError("agent {} has no local samples".format(agent_id))
    if not set(split.bd_indices) <= set(split.clean_indices):
        raise ValueError("poisoned indices of agent {} are not a subset of its local indices".format(agent_id))
    local = train.take(split.clean_indices)
    bd_images = train.images[jnp.asarray(split.bd_indices, dtype=jnp.int64)]
    return local, bd_images


def fta_local_train(
    KEY: jax.Array,
    global_net: Network,
    gen: TriggerGenerator,
    train: Dataset,
    split: PoisonSplit,
    targeting: AttackTargeting,
    hp: LocalHyperparams=LocalHyperparams(),
    agent_id: int=0,
    generator_images: jax.Array | None=None,
) -> Tuple[AgentUpdate, TriggerGenerator]:
    """Stage I trains the generator against the received global model, Stage II trains the
    malicious model on clean and triggered minibatches.

    Inputs:
        train: the training set `split` indexes into, only the split's indices are read
        generator_images: Stage I samples, defaults to the agent's own poisoned subset (colluding
            agents pass their pooled subsets)

    Returns:
        the update δ = θ* − θ^t and the updated generator
    """
    local, bd_images = _check_split(train, split, agent_id)
    chex.assert_equal(local.sample_shape, global_net.input_shape)
    stage1_images = bd_images if generator_images is None else generator_images

    gen = trigger.train_generator(
        jran.fold_in(KEY, 1),
        gen,
        global_net,
        stage1_images,
        targeting,
        epochs=hp.generator_epochs,
        lr=hp.generator_lr,
        momentum=hp.generator_momentum,
        batch_size=hp.generator_batch_size,
    )

    poisoned = trigger.apply_batched(gen, bd_images)
    local_net = _local_sgd(
        KEY,
        global_net,
        local,
        poisoned,
        targeting,
        hp.backdoor_epochs,
        hp.backdoor_lr,
        hp,
        stage="backdoor",
    )
    return AgentUpdate(delta=_delta(global_net, local_net), agent_id=agent_id, is_malicious=True), gen


def patch_fits(patch: PatchSpec, sample_shape: Tuple[int, ...]) -> bool:
    if len(sample_shape) != 3:
        return False
    return patch.row + patch.height <= sample_shape[0] and patch.col + patch.width <= sample_shape[1]


def check_patch(patch: PatchSpec, sample_shape: Tuple[int, ...]) -> None:
    if len(sample_shape) != 3:
        raise ValueError("a patch trigger needs [H, W, C] samples, got sample shape {}".format(sample_shape))
    H, W, _ = sample_shape
    if patch.row + patch.height > H or patch.col + patch.width > W:
        raise ValueError("{}x{} patch at ({}, {}) does not fit into {}x{} images".format(
            patch.height, patch.width, patch.row, patch.col, H, W,
        ))


def apply_patch(x: jax.Array, patch: PatchSpec) -> jax.Array:
    "x `[..., H, W, C]`: pixels inside the patch are set to `patch.value`, others are untouched"
    check_patch(patch, tuple(x.shape[-3:]))
    return x.at[
        ...,
        patch.row:patch.row+patch.height,
        patch.col:patch.col+patch.width,
        :,
    ].set(patch.value)


def patch_local_train(
    KEY: jax.Array,
    global_net: Network,
    train: Dataset,
    split: PoisonSplit,
    patch: PatchSpec,
    targeting: AttackTargeting,
    hp: LocalHyperparams=LocalHyperparams(),
    agent_id: int=0,
) -> AgentUpdate:
    "the Stage II loop of `fta_local_train` with a fixed square pattern in place of the generator"
    check_patch(patch, global_net.input_shape)
    local, bd_images = _check_split(train, split, agent_id)
    poisoned = apply_patch(bd_images, patch) if bd_images.shape[0] > 0 else bd_images
    local_net = _local_sgd(
        KEY,
        global_net,
        local,
        poisoned,
        targeting,
        hp.backdoor_epochs,
        hp.backdoor_lr,
        hp,
        stage="backdoor",
    )
    return AgentUpdate(delta=_delta(global_net, local_net), agent_id=agent_id, is_malicious=True)
