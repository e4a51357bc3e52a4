import struct

import jax.numpy as jnp
import jax.random as jran
import numpy as np
import pytest

from models import substrate
from models.classifiers import make_classifier
from utils import data
from utils.common import IdxFormatError
from utils.types import Dataset, LayerSpec


def _write_images(path, magic, count, rows, cols, pixels):
    path.write_bytes(struct.pack(">IIII", magic, count, rows, cols) + bytes(pixels))


def _write_labels(path, magic, labels):
    path.write_bytes(struct.pack(">II", magic, len(labels)) + bytes(labels))


def test_synthetic_is_deterministic_and_bounded():
    a = data.gen_synthetic(4, 100, 6, 0.3, seed=3)
    b = data.gen_synthetic(4, 100, 6, 0.3, seed=3)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert float(a.images.min()) >= 0 and float(a.images.max()) <= 1
    np.testing.assert_array_equal(a.class_counts(), [25, 25, 25, 25])


def test_synthetic_image_shape():
    ds = data.gen_synthetic(3, 30, 16, 0.1, seed=0, image_shape=(4, 4))
    assert ds.sample_shape == (4, 4, 1)
    assert ds.is_image


@pytest.mark.parametrize("kwargs", [
    dict(n_classes=1, n=10, dim=2, spread=0.1),
    dict(n_classes=5, n=4, dim=2, spread=0.1),
    dict(n_classes=2, n=10, dim=2, spread=0.),
])
def test_synthetic_rejects_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        data.gen_synthetic(seed=0, **kwargs)


def test_tight_clusters_are_linearly_separable(KEY):
    ds = data.gen_synthetic(2, 200, 4, 1e-4, seed=1)
    net = make_classifier(KEY, (LayerSpec(kind="flatten"),), (4,), 2)
    net = net.with_optimizer(substrate.make_optimizer(0.5, momentum=0.9, weight_decay=0.))
    for _ in range(300):
        net, _ = substrate.train_step(net, ds.images, ds.labels)
    preds = substrate.predict(net, ds.images)
    assert float((preds == ds.labels).mean()) == 1.


@pytest.mark.slow
def test_mlp_fits_ten_synthetic_classes(KEY):
    ds = data.gen_synthetic(10, 2000, 32, 0.1, seed=2)
    layers = (LayerSpec(kind="flatten"), LayerSpec(kind="dense", features=64), LayerSpec(kind="relu"))
    net = make_classifier(KEY, layers, (32,), 10)
    net = net.with_optimizer(substrate.make_optimizer(0.1))
    steps = 0
    while steps < 200:
        KEY, key_perm = jran.split(KEY)
        for idcs in data.minibatch_indices(key_perm, ds.size, 64):
            net, _ = substrate.train_step(net, ds.images[idcs], ds.labels[idcs])
            steps += 1
            if steps == 200:
                break
    preds = substrate.predict(net, ds.images)
    assert float((preds == ds.labels).mean()) >= 0.95


def test_load_handcrafted_idx(tmp_path):
    _write_images(tmp_path.joinpath("img"), 0x803, 2, 2, 2, [0, 255, 51, 102, 1, 2, 3, 4])
    _write_labels(tmp_path.joinpath("lbl"), 0x801, [1, 0])
    ds = data.load_idx(tmp_path.joinpath("img"), tmp_path.joinpath("lbl"))
    assert ds.images.shape == (2, 2, 2, 1)
    np.testing.assert_array_equal(ds.images[0, ..., 0], np.asarray([[0, 255], [51, 102]]) / 255)
    np.testing.assert_array_equal(ds.images[1, ..., 0], np.asarray([[1, 2], [3, 4]]) / 255)
    np.testing.assert_array_equal(ds.labels, [1, 0])
    assert ds.n_classes == 2


def test_idx_wrong_magic(tmp_path):
    _write_images(tmp_path.joinpath("img"), 0x801, 1, 1, 1, [0])
    with pytest.raises(IdxFormatError) as e:
        data.read_idx_images(tmp_path.joinpath("img"))
    assert e.value.field == "magic"


def test_idx_truncated_pixels(tmp_path):
    _write_images(tmp_path.joinpath("img"), 0x803, 2, 2, 2, [0] * 7)
    with pytest.raises(IdxFormatError) as e:
        data.read_idx_images(tmp_path.joinpath("img"))
    assert e.value.field == "pixels"


def test_idx_truncated_header(tmp_path):
    tmp_path.joinpath("lbl").write_bytes(b"\x00\x00\x08")
    with pytest.raises(IdxFormatError) as e:
        data.read_idx_labels(tmp_path.joinpath("lbl"))
    assert e.value.field == "header"


def test_idx_count_mismatch(tmp_path):
    _write_images(tmp_path.joinpath("img"), 0x803, 2, 1, 1, [0, 0])
    _write_labels(tmp_path.joinpath("lbl"), 0x801, [0, 1, 1])
    with pytest.raises(IdxFormatError) as e:
        data.load_idx(tmp_path.joinpath("img"), tmp_path.joinpath("lbl"))
    assert e.value.field == "count"


def test_idx_write_then_read_is_lossless(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(
        images=jnp.asarray(rng.integers(0, 256, (5, 3, 4, 1)), dtype=jnp.float64) / 255,
        labels=jnp.asarray(rng.integers(0, 10, (5,)), dtype=jnp.int64),
        n_classes=10,
    )
    data.write_idx(ds, tmp_path.joinpath("img"), tmp_path.joinpath("lbl"))
    back = data.load_idx(tmp_path.joinpath("img"), tmp_path.joinpath("lbl"), n_classes=10)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_single_agent_gets_everything():
    ds = data.gen_synthetic(3, 30, 2, 0.1, seed=0)
    plan = data.dirichlet_partition(ds, 1, alpha=0.7, seed=0)
    assert plan.assignments == (tuple(range(30)),)


@pytest.mark.parametrize("n_agents,alpha,seed", [(5, 0.7, 0), (20, 0.7, 1), (7, 5., 2), (3, 0.1, 3)])
def test_partition_is_a_disjoint_cover(n_agents, alpha, seed):
    ds = data.gen_synthetic(10, 400, 2, 0.1, seed=seed)
    plan = data.dirichlet_partition(ds, n_agents, alpha=alpha, seed=seed)
    flat = [i for idcs in plan.assignments for i in idcs]
    assert sorted(flat) == list(range(ds.size))
    assert all(len(idcs) > 0 for idcs in plan.assignments)
    np.testing.assert_array_equal(plan.class_histogram(ds.labels, 10).sum(axis=0), ds.class_counts())


def test_partition_is_non_iid():
    ds = data.gen_synthetic(10, 2000, 2, 0.1, seed=0)
    plan = data.dirichlet_partition(ds, 20, alpha=0.7, seed=0)
    hist = plan.class_histogram(ds.labels, 10)
    ratio = hist.max(axis=0) / np.maximum(hist.min(axis=0), 1)
    assert ratio.max() >= 5


def test_partition_rejects_too_many_agents():
    ds = data.gen_synthetic(2, 4, 2, 0.1, seed=0)
    with pytest.raises(ValueError):
        data.dirichlet_partition(ds, 5)


@pytest.mark.parametrize("fraction,expected", [(0., 0), (1., 50), (0.2, 10)])
def test_poison_split_size(KEY, fraction, expected):
    local = tuple(range(100, 150))
    split = data.poison_split(KEY, local, fraction)
    assert len(split.bd_indices) == expected
    assert set(split.bd_indices) <= set(local)
    assert split.clean_indices == local


def test_poison_split_is_reproducible(KEY):
    local = tuple(range(50))
    assert data.poison_split(KEY, local, 0.3) == data.poison_split(KEY, local, 0.3)


def test_poison_split_rejects_bad_fraction(KEY):
    with pytest.raises(ValueError):
        data.poison_split(KEY, (0, 1), 1.5)


def test_minibatches_drop_the_remainder(KEY):
    batches = list(data.minibatch_indices(KEY, 10, 4))
    assert [len(b) for b in batches] == [4, 4]
    assert len(set(np.concatenate(batches).tolist())) == 8
    assert [len(b) for b in data.minibatch_indices(KEY, 3, 4)] == [3]
