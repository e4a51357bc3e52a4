import dataclasses
import math
from pathlib import Path
from typing import Annotated, Callable, Dict, Literal, Tuple, Type

import chex
from flax import struct
from flax.struct import dataclass
from flax.training.train_state import TrainState
import jax
from jax.flatten_util import ravel_pytree
import jax.numpy as jnp
import numpy as np
import pydantic

from .common import ConfigError


LogLevel = Literal["DEBUG", "INFO", "WARN", "WARNING", "ERROR", "CRITICAL"]
LayerKind = Literal["dense", "conv2d", "relu", "flatten"]
ModelPreset = Literal["mlp", "cnn", "custom"]
DatasetKind = Literal["synthetic", "idx"]
AttackType = Literal["none", "fta", "patch"]
ScheduleMode = Literal["fixed-frequency", "few-shot"]
AggregationRule = Literal[
    "fedavg",
    "norm-clip",
    "adaptive-clip",
    "krum",
    "multi-krum",
    "trimmed-mean",
    "median",
    "signsgd",
    "rfa",
    "flame",
    "sparsefed",
]

# flat real vector of model parameters or of an update, float64, dimension fixed per experiment
ParamVector = jax.Array


def replace_impl(clz):
    if "__dataclass_fields__" not in clz.__dict__:
        raise TypeError("class `{}` is not a dataclass".format(clz.__name__))

    fields = clz.__dict__["__dataclass_fields__"]

    def replace_fn(self, /, **kwargs) -> Type[clz]:
        for k in kwargs.keys():
            if k not in fields:
                raise RuntimeError("class `{}` does not have a field with name '{}'".format(clz.__name__, k))
        ret = dataclasses.replace(self, **kwargs)
        return ret

    setattr(clz, "replace", replace_fn)
    return clz


_strict = pydantic.ConfigDict(extra="forbid")

Probability = Annotated[float, pydantic.Field(ge=0, le=1)]
PositiveInt = Annotated[int, pydantic.Field(gt=0)]
NonNegativeInt = Annotated[int, pydantic.Field(ge=0)]
PositiveFloat = Annotated[float, pydantic.Field(gt=0)]
NonNegativeFloat = Annotated[float, pydantic.Field(ge=0)]


@dataclass
class Dataset:
    # float64 [N, *sample_shape], every entry in [0, 1]
    images: jax.Array
    # int [N], every entry in [0, n_classes)
    labels: jax.Array

    n_classes: int=struct.field(pytree_node=False)

    def __post_init__(self):
        chex.assert_rank(self.labels, 1)
        chex.assert_equal_shape_prefix([self.images, self.labels], 1)

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    @property
    def is_image(self) -> bool:
        "images are stored as [N, H, W, C]"
        return len(self.sample_shape) == 3

    def take(self, indices: jax.Array | np.ndarray | Tuple[int, ...]) -> "Dataset":
        indices = jnp.asarray(indices, dtype=jnp.int64)
        return Dataset(images=self.images[indices], labels=self.labels[indices], n_classes=self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(np.asarray(self.labels), minlength=self.n_classes)

    def by_class(self) -> Dict[int, jax.Array]:
        labels = np.asarray(self.labels)
        return {
            c: self.images[np.flatnonzero(labels == c)]
            for c in range(self.n_classes)
            if (labels == c).any()
        }


@dataclass
class PartitionPlan:
    # per-agent sorted sample indices into the training set
    assignments: Tuple[Tuple[int, ...], ...]=struct.field(pytree_node=False)
    alpha: float=struct.field(pytree_node=False)
    # seed of the draw that produced this plan (differs from the requested seed after a repair)
    seed: int=struct.field(pytree_node=False)

    @property
    def n_agents(self) -> int:
        return len(self.assignments)

    def class_histogram(self, labels: jax.Array | np.ndarray, n_classes: int) -> np.ndarray:
        "[n_agents, n_classes] sample counts"
        labels = np.asarray(labels)
        return np.stack([
            np.bincount(labels[np.asarray(idcs, dtype=np.int64)], minlength=n_classes)
            for idcs in self.assignments
        ])


@dataclass
class PoisonSplit:
    # the clean stream covers every local sample, poisoned samples keep their true labels there
    clean_indices: Tuple[int, ...]=struct.field(pytree_node=False)
    bd_indices: Tuple[int, ...]=struct.field(pytree_node=False)
    fraction: float=struct.field(pytree_node=False)


@dataclass
class AttackTargeting:
    target_label: int=struct.field(pytree_node=False)
    n_classes: int=struct.field(pytree_node=False)

    def __post_init__(self):
        if not 0 <= self.target_label < self.n_classes:
            raise ValueError("target label {} is not in [0, {})".format(self.target_label, self.n_classes))

    def relabel(self, labels: jax.Array) -> jax.Array:
        "all-to-one labeling rule"
        return jnp.full_like(labels, self.target_label)


class Network(TrainState):
    """A classifier f_θ: the flax module's `apply` plus its parameters and optimizer state.

    `step`, `params`, `tx` and `opt_state` come from `TrainState`; the parameters only ever change
    through `apply_gradients` (local SGD) or `with_flat_params` (server aggregation).
    """
    input_shape: Tuple[int, ...]=struct.field(pytree_node=False)
    n_classes: int=struct.field(pytree_node=False)

    @property
    def flat_params(self) -> ParamVector:
        return ravel_pytree(self.params)[0]

    @property
    def n_params(self) -> int:
        return self.flat_params.shape[0]

    def unravel(self, vec: ParamVector):
        return ravel_pytree(self.params)[1](vec)

    def with_flat_params(self, vec: ParamVector) -> "Network":
        chex.assert_shape(vec, (self.n_params,))
        return self.replace(params=self.unravel(vec))

    def with_optimizer(self, tx) -> "Network":
        "a fresh optimizer (new momentum buffers) for a local training session"
        return self.replace(step=0, tx=tx, opt_state=tx.init(self.params))


@dataclass
class TriggerGenerator:
    # ξ
    params: Dict
    apply_fn: Callable=struct.field(pytree_node=False)
    # l2 bound of the per-sample trigger noise
    epsilon: float=struct.field(pytree_node=False)

    @property
    def flat_params(self) -> ParamVector:
        return ravel_pytree(self.params)[0]

    def with_flat_params(self, vec: ParamVector) -> "TriggerGenerator":
        return self.replace(params=ravel_pytree(self.params)[1](vec))


@dataclass
class AgentUpdate:
    # θ* - θ^t
    delta: ParamVector
    agent_id: int=struct.field(pytree_node=False)
    # ground truth for diagnostics, aggregators only ever see `delta`
    is_malicious: bool=struct.field(pytree_node=False, default=False)


@dataclasses.dataclass(frozen=True)
class AgentAnnotation:
    agent_id: int
    clip_factor: float=1.0
    krum_score: float=math.nan
    cluster: int=-1


@dataclass
class AggregationOutcome:
    global_delta: ParamVector
    accepted: Tuple[int, ...]=struct.field(pytree_node=False)
    annotations: Tuple[AgentAnnotation, ...]=struct.field(pytree_node=False, default=())
    # set when a rule could not apply its filter and accepted every update instead
    fallback: bool=struct.field(pytree_node=False, default=False)
    # carried to the next round by rules with server-side memory (SparseFed error feedback)
    residual: ParamVector | None=None


@dataclasses.dataclass(frozen=True)
class SimilarityDiagnostic:
    euclid: float
    cosine: float
    # one of the compared vectors has zero norm, `cosine` is reported as 0
    degenerate: bool=False


@dataclass
class FeatureDiagnostic:
    # [N, D] penultimate activations of the benign panel followed by the poisoned panel
    features: jax.Array
    # [N] class of each row (true label for both benign and poisoned rows)
    labels: jax.Array
    # [N] True for poisoned rows
    poisoned: jax.Array
    # [N, 2]
    pca: jax.Array
    # [2] variance along each principal axis, non-increasing
    explained_variance: jax.Array
    target_label: int=struct.field(pytree_node=False)
    poisoned_to_target: float=struct.field(pytree_node=False)
    poisoned_to_own_class: float=struct.field(pytree_node=False)


@dataclasses.dataclass(frozen=True)
class RoundReport:
    round: int
    roster: Tuple[int, ...]
    malicious_id: int | None
    benign_acc: float
    # nan when no attack is configured
    backdoor_acc: float
    update_norms: Tuple[Tuple[int, float], ...]
    # nan on rounds without a malicious update
    malicious_norm: float
    mean_benign_norm: float
    cosine_sim: float
    euclid_dist: float
    accepted: Tuple[int, ...]
    wall_ms: float

    def csv_row(self, with_wall_time: bool) -> Tuple[str, ...]:
        def fmt(value: float) -> str:
            return "" if math.isnan(value) else "{:.6f}".format(value)
        return (
            str(self.round),
            ";".join(map(str, self.roster)),
            fmt(self.benign_acc),
            fmt(self.backdoor_acc),
            fmt(self.malicious_norm),
            fmt(self.mean_benign_norm),
            fmt(self.cosine_sim),
            fmt(self.euclid_dist),
            ";".join(map(str, self.accepted)),
            "{:.1f}".format(self.wall_ms) if with_wall_time else "",
        )


@replace_impl
@pydantic.dataclasses.dataclass(frozen=True, config=_strict)
class LayerSpec:
    kind: LayerKind
    # output width of dense layers, output channels of conv2d layers
    features: PositiveInt | None=None
    # conv2d only, stride 1 and no padding
    kernel: Tuple[PositiveInt, PositiveInt] | None=None

    def __post_init__(self):
        if self.kind in ("dense", "conv2d") and self.features is None:
            raise ConfigError("model.layers.features", "{} layers need `features`".format(self.kind))
        if self.kind == "conv2d" and self.kernel is None:
            raise ConfigError("model.layers.kernel", "conv2d layers need `kernel`")


@replace_impl
@pydantic.dataclasses.dataclass(frozen=True, config=_strict)
class PatchSpec:
    # top-left corner
    row: NonNegativeInt=0
    col: NonNegativeInt=0
    height: PositiveInt=3
    width: PositiveInt=3
    value: Probability=1.0


@replace_impl
@pydantic.dataclasses.dataclass(frozen=True, config=_strict)
class DatasetConfig:
    kind: DatasetKind="synthetic"

    # synthetic data: Gaussian clusters clipped to the unit cube
    n_classes: Annotated[int, pydantic.Field(ge=2)]=10
    n_samples: PositiveInt=2000
    n_test: PositiveInt=500
    dim: PositiveInt=784
    # reshape synthetic samples into single-channel images, prod(image_shape) must equal dim
    image_shape: Tuple[PositiveInt, PositiveInt] | None=(28, 28)
    spread: PositiveFloat=0.1

    # IDX data
    train_images: Path | None=None
    train_labels: Path | None=None
    test_images: Path | None=None
    test_labels: Path | None=None
    # keep only the first `limit` training samples
    limit: PositiveInt | None=None

    def __post_init__(self):
        if self.kind == "synthetic":
            if self.n_samples < self.n_classes:
                raise ConfigError("dataset.n_samples", "need at least one sample per class")
            if self.image_shape is not None and self.image_shape[0] * self.image_shape[1] != self.dim:
                raise ConfigError(
                    "dataset.image_shape",
                    "{}x{} does not match dim={}".format(*self.image_shape, self.dim),
                )
        else:
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                if getattr(self, name) is None:
                    raise ConfigError("dataset.{}".format(name), "required when kind is 'idx'")


@replace_impl
@pydantic.dataclasses.dataclass(frozen=True, config=_strict)
class FLConfig:
    total_agents: PositiveInt=20
    agents_per_round: PositiveInt=10
    rounds: NonNegativeInt=60
    seed: int=1_000_000_007
    # γ
    server_lr: NonNegativeFloat=1.0
    dirichlet_alpha: PositiveFloat=0.7
    batch_size: PositiveInt=64
    momentum: Annotated[float, pydantic.Field(ge=0, lt=1)]=0.9
    weight_decay: NonNegativeFloat=1e-4
    # wall time breaks byte-identical reports, so it is only written on request
    record_wall_time: bool=False


@replace_impl
@pydantic.dataclasses.dataclass(frozen=True, config=_strict)
class ModelConfig:
    preset: ModelPreset="mlp"
    hidden: PositiveInt=64
    conv_features: PositiveInt=8
    # hidden layers of a custom model, the classification head is always appended
    layers: Tuple[LayerSpec, ...]=()

    def __post_init__(self):
        if self.preset == "custom" and len(self.layers) == 0:
            raise ConfigError("model.layers", "a custom model needs at least one layer")
        if self.preset != "custom" and len(self.layers) > 0:
            raise ConfigError("model.layers", "only allowed with preset 'custom'")

    def resolved_layers(self) -> Tuple[LayerSpec, ...]:
        if self.preset == "mlp":
            return (
                LayerSpec(kind="flatten"),
                LayerSpec(kind="dense", features=self.hidden),
                LayerSpec(kind="relu"),
            )
        elif self.preset == "cnn":
            return (
                LayerSpec(kind="conv2d", features=self.conv_features, kernel=(3, 3)),
                LayerSpec(kind="relu"),
                LayerSpec(kind="flatten"),
                LayerSpec(kind="dense", features=self.hidden),
                LayerSpec(kind="relu"),
            )
        return self.layers


@replace_impl
@pydantic.dataclasses.dataclass(frozen=True, config=_strict)
class GeneratorConfig:
    # e_T
    epochs: NonNegativeInt=20
    # γ_T
    lr: PositiveFloat=0.01
    momentum: Annotated[float, pydantic.Field(ge=0, lt=1)]=0.9
    # samples pooled from the colluding agents' poisoned subsets for Stage I
    dataset_size: PositiveInt=1024
    batch_size: PositiveInt=64
    # width of the autoencoder bottleneck
    hidden: PositiveInt=64


@replace_impl
@pydantic.dataclasses.dataclass(frozen=True, config=_strict)
class LocalTrainingConfig:
    benign_epochs: PositiveInt=2
    benign_lr: PositiveFloat=0.1
    # e_f
    backdoor_epochs: NonNegativeInt=10
    # γ_f
    backdoor_lr: PositiveFloat=0.1


@replace_impl
@pydantic.dataclasses.dataclass(frozen=True, config=_strict)
class AttackConfig:
    type: AttackType="none"
    mode: ScheduleMode="fixed-frequency"
    malicious_agents: PositiveInt=1
    # few-shot budget
    attack_num: NonNegativeInt=10
    ba_stop_threshold: Probability=0.95
    # warm-up rounds before the first attack round ("attack after convergence")
    start_round: NonNegativeInt=0
    # fixed-frequency mode attacks every `attack_every`-th round after the warm-up
    attack_every: PositiveInt=1
    target_label: NonNegativeInt=7
    poison_fraction: Probability=0.2
    # ε
    trigger_size: NonNegativeFloat=2.0
    # exclude samples whose true label is the target when measuring backdoor accuracy
    ba_exclude_target: bool=True
    patch: PatchSpec=PatchSpec()
    generator: GeneratorConfig=GeneratorConfig()
    local: LocalTrainingConfig=LocalTrainingConfig()


@replace_impl
@pydantic.dataclasses.dataclass(frozen=True, config=_strict)
class AggregatorConfig:
    rule: AggregationRule="fedavg"
    # τ for norm clipping and SparseFed
    clip_bound: PositiveFloat=1.0
    # m, updates trimmed from each end per coordinate
    trim: NonNegativeInt=2
    # f
    krum_byzantine: NonNegativeInt=1
    # c, defaults to n - f
    multi_krum_select: PositiveInt | None=None
    rfa_max_iters: PositiveInt=100
    rfa_tol: PositiveFloat=1e-8
    # ν
    rfa_smoothing: PositiveFloat=1e-6
    # λ_noise, noise std is this times the median norm of accepted updates
    flame_noise: NonNegativeFloat=0.001
    # k, defaults to `sparsefed_fraction` of the parameter count
    sparsefed_k: PositiveInt | None=None
    sparsefed_fraction: Annotated[float, pydantic.Field(gt=0, le=1)]=0.1
    sparsefed_error_feedback: bool=False
    # γ_s
    sign_lr: PositiveFloat=1e-3

    def resolved_sparsefed_k(self, dim: int) -> int:
        k = self.sparsefed_k if self.sparsefed_k is not None else max(1, int(self.sparsefed_fraction * dim))
        if not 1 <= k <= dim:
            raise ConfigError("aggregator.sparsefed_k", "{} is not in [1, {}]".format(k, dim))
        return k


@replace_impl
@pydantic.dataclasses.dataclass(frozen=True, config=_strict)
class ExperimentConfig:
    dataset: DatasetConfig=DatasetConfig()
    fl: FLConfig=FLConfig()
    model: ModelConfig=ModelConfig()
    attack: AttackConfig=AttackConfig()
    aggregator: AggregatorConfig=AggregatorConfig()

    def __post_init__(self):
        n = self.fl.agents_per_round
        if n > self.fl.total_agents:
            raise ConfigError("fl.agents_per_round", "{} exceeds total_agents={}".format(n, self.fl.total_agents))
        if self.attack.type != "none":
            if self.attack.mode == "few-shot" and self.attack.attack_num > self.fl.rounds:
                raise ConfigError("attack.attack_num", "{} exceeds rounds={}".format(self.attack.attack_num, self.fl.rounds))
            if self.fl.total_agents - self.attack.malicious_agents < n:
                raise ConfigError(
                    "attack.malicious_agents",
                    "{} malicious agents leave fewer than agents_per_round={} benign agents".format(
                        self.attack.malicious_agents, n,
                    ),
                )
        if self.attack.type != "none" and self.dataset.kind == "synthetic" and self.attack.target_label >= self.dataset.n_classes:
            raise ConfigError("attack.target_label", "{} is not a class of a {}-class dataset".format(
                self.attack.target_label, self.dataset.n_classes,
            ))
        agg = self.aggregator
        if agg.rule == "trimmed-mean" and not n > 2 * agg.trim:
            raise ConfigError("aggregator.trim", "need agents_per_round > 2*trim, got n={} m={}".format(n, agg.trim))
        if agg.rule in ("krum", "multi-krum") and n < agg.krum_byzantine + 3:
            raise ConfigError("aggregator.krum_byzantine", "need agents_per_round >= f+3, got n={} f={}".format(n, agg.krum_byzantine))
        if agg.rule == "multi-krum" and agg.multi_krum_select is not None and agg.multi_krum_select > n:
            raise ConfigError("aggregator.multi_krum_select", "{} exceeds agents_per_round={}".format(agg.multi_krum_select, n))
        if agg.rule == "flame" and n < 3:
            raise ConfigError("fl.agents_per_round", "flame needs at least 3 updates per round")

    @property
    def multi_krum_select(self) -> int:
        c = self.aggregator.multi_krum_select
        return c if c is not None else self.fl.agents_per_round - self.aggregator.krum_byzantine
