import copy
from typing import Any, Callable, Dict, List, Sequence

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from models.classifiers import make_classifier
from utils import common
from utils.types import AgentUpdate, LayerSpec, Network

MLP_LAYERS = (
    LayerSpec(kind="flatten"),
    LayerSpec(kind="dense", features=8),
    LayerSpec(kind="relu"),
)
CNN_LAYERS = (
    LayerSpec(kind="conv2d", features=3, kernel=(3, 3)),
    LayerSpec(kind="relu"),
    LayerSpec(kind="flatten"),
    LayerSpec(kind="dense", features=6),
    LayerSpec(kind="relu"),
)


@pytest.fixture
def KEY() -> jax.Array:
    return common.set_deterministic(0)


@pytest.fixture
def mlp(KEY: jax.Array) -> Network:
    "4 input features, 3 classes"
    return make_classifier(KEY, MLP_LAYERS, (4,), 3)


@pytest.fixture
def cnn(KEY: jax.Array) -> Network:
    "6x6 single-channel images, 4 classes"
    return make_classifier(KEY, CNN_LAYERS, (6, 6, 1), 4)


@pytest.fixture
def make_updates() -> Callable[..., List[AgentUpdate]]:
    "rows of a matrix as agent updates, agent ids default to the row index"
    def _make(rows: Sequence[Sequence[float]] | np.ndarray, ids: Sequence[int] | None=None) -> List[AgentUpdate]:
        rows = jnp.asarray(rows, dtype=jnp.float64)
        ids = range(rows.shape[0]) if ids is None else ids
        return [AgentUpdate(delta=row, agent_id=int(i)) for i, row in zip(ids, rows)]
    return _make


# a few seconds per run: 6 agents, 3 per round, 6x6 images of 4 classes
SMALL_CONFIG = {
    "dataset": {"n_classes": 4, "n_samples": 240, "n_test": 80, "dim": 36, "image_shape": [6, 6]},
    "fl": {"total_agents": 6, "agents_per_round": 3, "rounds": 3, "seed": 0, "batch_size": 16},
    "model": {"preset": "mlp", "hidden": 8},
    "attack": {
        "type": "fta",
        "target_label": 2,
        "attack_num": 2,
        "patch": {"height": 2, "width": 2},
        "generator": {"epochs": 1, "dataset_size": 64, "batch_size": 16, "hidden": 8},
        "local": {"benign_epochs": 1, "backdoor_epochs": 1},
    },
}


@pytest.fixture
def small_config() -> Dict[str, Any]:
    return copy.deepcopy(SMALL_CONFIG)
