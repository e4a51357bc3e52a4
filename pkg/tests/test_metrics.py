import csv
import math

import jax.numpy as jnp
import jax.random as jran
import numpy as np
import pytest

from models import substrate, trigger
from models.attacks import apply_patch
from models.classifiers import make_classifier
from models.generators import make_generator
from utils import data, metrics
from utils.types import AttackTargeting, LayerSpec, PatchSpec


@pytest.fixture
def test_set():
    return data.gen_synthetic(4, 40, 36, 0.1, seed=0, image_shape=(6, 6))


@pytest.fixture
def always_target(KEY):
    "predicts class 2 for every input"
    net = make_classifier(KEY, (LayerSpec(kind="flatten"),), (6, 6, 1), 4)
    return net.replace(params={"head": {
        "kernel": jnp.zeros((36, 4)),
        "bias": jnp.zeros(4).at[2].set(1e3),
    }})


def test_constant_target_classifier(always_target, test_set):
    targeting = AttackTargeting(target_label=2, n_classes=4)
    assert metrics.backdoor_accuracy(always_target, test_set, PatchSpec(), targeting) == 1.
    assert metrics.benign_accuracy(always_target, test_set) == pytest.approx(0.25)


def test_backdoor_accuracy_matches_a_recount(KEY, cnn, test_set):
    targeting = AttackTargeting(target_label=1, n_classes=4)
    gen = make_generator(KEY, (6, 6, 1), hidden=8, epsilon=2.)
    ba = metrics.backdoor_accuracy(cnn, test_set, gen, targeting)
    labels = np.asarray(test_set.labels)
    eligible = test_set.images[labels != 1]
    preds = np.asarray(substrate.predict(cnn, trigger.apply(gen, eligible)))
    assert ba == pytest.approx(float((preds == 1).sum()) / eligible.shape[0])

    everyone = metrics.backdoor_accuracy(cnn, test_set, PatchSpec(), targeting, exclude_target=False)
    preds = np.asarray(substrate.predict(cnn, apply_patch(test_set.images, PatchSpec())))
    assert everyone == pytest.approx(float((preds == 1).mean()))


def test_backdoor_accuracy_without_eligible_samples_is_nan(always_target, test_set):
    only_target = test_set.take(np.flatnonzero(np.asarray(test_set.labels) == 2))
    targeting = AttackTargeting(target_label=2, n_classes=4)
    assert math.isnan(metrics.backdoor_accuracy(always_target, only_target, PatchSpec(), targeting))
    assert math.isnan(metrics.benign_accuracy(always_target, test_set.take(np.zeros((0,), dtype=np.int64))))


def test_ssim_identity_and_symmetry(KEY):
    key_x, key_y = jran.split(KEY)
    x = jran.uniform(key_x, (16, 16, 1), dtype=jnp.float64)
    y = jran.uniform(key_y, (16, 16, 1), dtype=jnp.float64)
    assert metrics.ssim(x, x) == pytest.approx(1., abs=1e-12)
    assert metrics.ssim(x, y) == pytest.approx(metrics.ssim(y, x), abs=1e-12)
    assert metrics.ssim(x, y) < 0.5


def test_ssim_of_opposite_constant_images_is_near_zero():
    assert metrics.ssim(jnp.zeros((12, 12)), jnp.ones((12, 12))) < 1e-3


def test_ssim_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        metrics.ssim(jnp.zeros((8, 8)), jnp.zeros((8, 9)))


def test_corner_patch_touches_few_ssim_windows():
    ds = data.gen_synthetic(4, 20, 784, 0.1, seed=0, image_shape=(28, 28))
    patched = apply_patch(ds.images, PatchSpec())
    # only the 9 of 18x18 windows that start in the top-left 3x3 corner see the patch
    assert min(metrics.ssim(x, p) for x, p in zip(ds.images, patched)) >= 0.99
    assert max(metrics.ssim(x, p) for x, p in zip(ds.images, patched)) < 1.


def test_update_similarity():
    orthogonal = metrics.update_similarity(jnp.asarray([1., 0.]), [jnp.asarray([0., 1.])])
    assert orthogonal.euclid == pytest.approx(math.sqrt(2))
    assert orthogonal.cosine == pytest.approx(0., abs=1e-15)
    opposite = metrics.update_similarity(jnp.asarray([1., 0.]), [jnp.asarray([-2., 0.]), jnp.asarray([-4., 0.])])
    assert opposite.cosine == pytest.approx(-1.)
    assert opposite.euclid == pytest.approx(4.)
    assert not opposite.degenerate


def test_update_similarity_with_a_zero_mean_is_degenerate():
    diag = metrics.update_similarity(jnp.asarray([1., 0.]), [jnp.asarray([1., 0.]), jnp.asarray([-1., 0.])])
    assert diag.degenerate and diag.cosine == 0.
    with pytest.raises(ValueError):
        metrics.update_similarity(jnp.asarray([1., 0.]), [])


def test_full_rank_pca_preserves_distances(KEY):
    features = jran.normal(KEY, (20, 2), dtype=jnp.float64) * jnp.asarray([3., 0.5])
    coords, explained = metrics.pca_2d(features)
    dist = lambda a: np.linalg.norm(np.asarray(a)[:, None] - np.asarray(a)[None], axis=-1)
    np.testing.assert_allclose(dist(coords), dist(features), atol=1e-10)
    assert explained[0] >= explained[1]


def test_pca_axis_orientation():
    t = jnp.linspace(-1., 1., 9)
    features = jnp.stack([-3 * t, 4 * t, jnp.zeros_like(t)], axis=-1)
    coords, explained = metrics.pca_2d(features)
    # the leading axis is (-0.6, 0.8, 0) flipped to (0.6, -0.8, 0)
    np.testing.assert_allclose(coords[:, 0], -5 * t, atol=1e-12)
    np.testing.assert_allclose(coords[:, 1], 0., atol=1e-12)
    assert float(explained[1]) == pytest.approx(0., abs=1e-20)


def test_feature_diagnostic_on_the_target_class_itself(cnn, test_set):
    target = np.flatnonzero(np.asarray(test_set.labels) == 3)
    diag = metrics.feature_diagnostic(cnn, test_set, test_set.images[target], test_set.labels[target], 3)
    assert diag.poisoned_to_target == pytest.approx(0., abs=1e-12)
    assert diag.pca.shape == (test_set.size + target.shape[0], 2)
    assert int(diag.poisoned.sum()) == target.shape[0]


def test_own_class_distance_compares_centroids(cnn, test_set):
    labels = np.asarray(test_set.labels)
    rows = np.flatnonzero((labels == 0) | (labels == 1))
    diag = metrics.feature_diagnostic(cnn, test_set, test_set.images[rows], test_set.labels[rows], 3)
    # every class of the panel is its own benign class, so the class centroids coincide
    assert diag.poisoned_to_own_class == pytest.approx(0., abs=1e-12)
    assert diag.poisoned_to_target > 0.


def test_feature_diagnostic_without_poisoned_samples(cnn, test_set):
    diag = metrics.feature_diagnostic(cnn, test_set, jnp.zeros((0, 6, 6, 1)), jnp.zeros((0,), dtype=jnp.int64), 3)
    assert math.isnan(diag.poisoned_to_target) and math.isnan(diag.poisoned_to_own_class)
    assert not bool(diag.poisoned.any())


def test_diagnostic_csv_files(tmp_path, KEY, cnn, test_set):
    gen = make_generator(KEY, (6, 6, 1), hidden=8, epsilon=1.)
    poisoned = trigger.apply(gen, test_set.images[:10])
    diag = metrics.feature_diagnostic(cnn, test_set, poisoned, test_set.labels[:10], 0)
    metrics.write_features_csv(tmp_path.joinpath("features.csv"), diag)
    metrics.write_centroids_csv(tmp_path.joinpath("centroids.csv"), diag)

    with open(tmp_path.joinpath("features.csv"), newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["pc1", "pc2", "label", "poisoned"]
    assert len(rows) == 1 + test_set.size + 10
    assert sum(int(r[3]) for r in rows[1:]) == 10

    with open(tmp_path.joinpath("centroids.csv"), newline="") as f:
        groups = [r[0] for r in csv.reader(f)]
    assert groups == [
        "group", "class0", "class1", "class2", "class3", "poisoned",
        "poisoned_to_target", "poisoned_to_own_class", "explained_variance",
    ]
