import csv
import math
from pathlib import Path
from typing import Sequence, Tuple

import jax
import jax.numpy as jnp
import jax.scipy as jsp
import numpy as np

from models.attacks import apply_patch
from models.substrate import check_input, penultimate_features, predict
from models.trigger import apply_batched

from . import common
from .types import (
    AttackTargeting,
    Dataset,
    FeatureDiagnostic,
    Network,
    PatchSpec,
    ParamVector,
    SimilarityDiagnostic,
    TriggerGenerator,
)


def apply_triggerer(triggerer: TriggerGenerator | PatchSpec, images: jax.Array) -> jax.Array:
    if isinstance(triggerer, TriggerGenerator):
        return apply_batched(triggerer, images)
    elif isinstance(triggerer, PatchSpec):
        return apply_patch(images, triggerer)
    raise TypeError("a triggerer is a TriggerGenerator or a PatchSpec, got {}".format(type(triggerer).__name__))


def _predict(net: Network, images: jax.Array) -> jax.Array:
    check_input(net, images)
    return predict(net, images)


def benign_accuracy(net: Network, test: Dataset) -> float:
    "top-1 accuracy, nan on an empty test set"
    if test.size == 0:
        return math.nan
    preds = _predict(net, test.images)
    return float((preds == test.labels).mean())


def backdoor_eligible(test: Dataset, targeting: AttackTargeting, exclude_target: bool=True) -> np.ndarray:
    labels = np.asarray(test.labels)
    if exclude_target:
        return np.flatnonzero(labels != targeting.target_label)
    return np.arange(labels.shape[0])


def backdoor_accuracy(
    net: Network,
    test: Dataset,
    triggerer: TriggerGenerator | PatchSpec,
    targeting: AttackTargeting,
    exclude_target: bool=True,
) -> float:
    """Fraction of triggered test samples classified as the target label.  Samples whose true label
    is the target are left out unless `exclude_target` is False; nan if no sample is eligible.
    """
    idcs = backdoor_eligible(test, targeting, exclude_target)
    if idcs.shape[0] == 0:
        return math.nan
    poisoned = apply_triggerer(triggerer, test.images[idcs])
    preds = _predict(net, poisoned)
    return float((preds == targeting.target_label).mean())


def gaussian_window(size: int=11, sigma: float=1.5) -> jax.Array:
    coords = jnp.arange(size, dtype=jnp.float64) - (size - 1) / 2
    g = jnp.exp(-coords**2 / (2 * sigma**2))
    g = g / g.sum()
    return jnp.outer(g, g)


@common.jit_jaxfn_with(static_argnames=["window_size", "sigma"])
def _ssim_2d(x: jax.Array, y: jax.Array, window_size: int, sigma: float) -> jax.Array:
    # unit dynamic range
    C1 = 0.01**2
    C2 = 0.03**2
    w = gaussian_window(window_size, sigma)
    blur = lambda img: jsp.signal.convolve2d(img, w, mode="valid")

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x**2
    var_y = blur(y * y) - mu_y**2
    cov = blur(x * y) - mu_x * mu_y

    ssim_map = ((2 * mu_x * mu_y + C1) * (2 * cov + C2)) / ((mu_x**2 + mu_y**2 + C1) * (var_x + var_y + C2))
    return ssim_map.mean()


def ssim(x: jax.Array, y: jax.Array, window_size: int=11, sigma: float=1.5) -> float:
    """Structural similarity of two images `[H, W]` or `[H, W, C]` with values in [0, 1], averaged over
    channels.  The window shrinks to the largest odd size that fits for images under 11 pixels.
    """
    if x.shape != y.shape:
        raise ValueError("cannot compare images of shapes {} and {}".format(x.shape, y.shape))
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if x.ndim != 3:
        raise ValueError("expected an [H, W] or [H, W, C] image, got shape {}".format(x.shape))
    H, W, C = x.shape
    size = min(window_size, H, W)
    size = size if size % 2 == 1 else size - 1
    x, y = jnp.asarray(x, dtype=jnp.float64), jnp.asarray(y, dtype=jnp.float64)
    return float(jnp.mean(jnp.stack([_ssim_2d(x[..., c], y[..., c], size, sigma) for c in range(C)])))


def update_similarity(malicious: ParamVector, benign: Sequence[ParamVector]) -> SimilarityDiagnostic:
    "Euclidean distance and cosine similarity between the malicious update and the mean benign update"
    if len(benign) == 0:
        raise ValueError("need at least one benign update")
    mean_benign = jnp.stack(list(benign)).mean(axis=0)
    if mean_benign.shape != malicious.shape:
        raise ValueError("update dimensions differ: {} vs {}".format(malicious.shape, mean_benign.shape))
    euclid = float(jnp.linalg.norm(malicious - mean_benign))
    norm_m, norm_b = float(jnp.linalg.norm(malicious)), float(jnp.linalg.norm(mean_benign))
    if norm_m == 0 or norm_b == 0:
        return SimilarityDiagnostic(euclid=euclid, cosine=0., degenerate=True)
    cosine = float(jnp.dot(malicious, mean_benign) / (norm_m * norm_b))
    return SimilarityDiagnostic(euclid=euclid, cosine=min(1., max(-1., cosine)))


def pca_2d(features: jax.Array) -> Tuple[jax.Array, jax.Array]:
    """Project centered features onto their two leading principal axes.  Each axis is oriented so that
    its first nonzero loading is positive.  Fewer than two feature dimensions are zero-padded.

    Returns:
        coords `[N, 2]`
        explained_variance `[2]`: non-increasing
    """
    features = jnp.asarray(features, dtype=jnp.float64)
    N, D = features.shape
    if D < 2:
        features = jnp.concatenate([features, jnp.zeros((N, 2 - D), dtype=features.dtype)], axis=-1)
    centered = features - features.mean(axis=0, keepdims=True)
    _, s, vt = jnp.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    k = min(2, components.shape[0])
    if k < 2:
        components = jnp.concatenate([components, jnp.zeros((2 - k, components.shape[1]))])
        s = jnp.concatenate([s, jnp.zeros((2 - k,))])

    def orient(axis: jax.Array) -> jax.Array:
        nonzero = np.flatnonzero(np.abs(np.asarray(axis)) > 1e-12)
        if nonzero.shape[0] == 0:
            return axis
        return axis if axis[nonzero[0]] > 0 else -axis
    components = jnp.stack([orient(components[0]), orient(components[1])])

    explained = s[:2]**2 / max(N - 1, 1)
    return centered @ components.T, explained


def _centroid_distance(a: jax.Array, b: jax.Array) -> float:
    return float(jnp.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))


def feature_diagnostic(
    net: Network,
    benign: Dataset,
    poisoned_images: jax.Array,
    poisoned_labels: jax.Array,
    target_label: int,
) -> FeatureDiagnostic:
    """Penultimate-layer activations of a benign panel and a poisoned panel, their joint 2-D PCA, and
    centroid distances in feature space:
        poisoned_to_target: poisoned centroid vs. benign target-class centroid
        poisoned_to_own_class: per true class, poisoned centroid vs. benign centroid of that class,
            averaged over the classes of the poisoned panel

    Inputs:
        poisoned_labels: true labels of the poisoned samples
    """
    f_benign = penultimate_features(net, benign.images)
    if poisoned_images.shape[0] > 0:
        f_poisoned = penultimate_features(net, poisoned_images)
    else:
        f_poisoned = jnp.zeros((0, f_benign.shape[1]), dtype=f_benign.dtype)
    benign_labels = np.asarray(benign.labels)
    poisoned_labels = np.asarray(poisoned_labels, dtype=np.int64)

    target_rows = np.flatnonzero(benign_labels == target_label)
    if target_rows.shape[0] == 0 or f_poisoned.shape[0] == 0:
        to_target = math.nan
    else:
        to_target = _centroid_distance(f_poisoned, f_benign[target_rows])

    own = [
        _centroid_distance(f_poisoned[np.flatnonzero(poisoned_labels == c)], f_benign[np.flatnonzero(benign_labels == c)])
        for c in np.unique(poisoned_labels)
        if (benign_labels == c).any()
    ]
    to_own = float(np.mean(own)) if len(own) > 0 else math.nan

    features = jnp.concatenate([f_benign, f_poisoned])
    pca, explained = pca_2d(features)
    return FeatureDiagnostic(
        features=features,
        labels=jnp.concatenate([jnp.asarray(benign_labels), jnp.asarray(poisoned_labels)]),
        poisoned=jnp.concatenate([
            jnp.zeros((f_benign.shape[0],), dtype=bool),
            jnp.ones((f_poisoned.shape[0],), dtype=bool),
        ]),
        pca=pca,
        explained_variance=explained,
        target_label=target_label,
        poisoned_to_target=to_target,
        poisoned_to_own_class=to_own,
    )


def write_features_csv(path: str | Path, diag: FeatureDiagnostic) -> None:
    "one row per sample: its PCA coordinates, class and whether it is poisoned"
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("pc1", "pc2", "label", "poisoned"))
        for (pc1, pc2), label, poisoned in zip(
            np.asarray(diag.pca),
            np.asarray(diag.labels),
            np.asarray(diag.poisoned),
        ):
            writer.writerow(("{:.6f}".format(pc1), "{:.6f}".format(pc2), int(label), int(poisoned)))


def write_centroids_csv(path: str | Path, diag: FeatureDiagnostic) -> None:
    """Per-group PCA centroids (one group per benign class plus the poisoned panel), followed by the
    feature-space centroid distances and the explained variance of both axes."""
    pca = np.asarray(diag.pca)
    labels = np.asarray(diag.labels)
    poisoned = np.asarray(diag.poisoned)
    fmt = lambda v: "" if math.isnan(v) else "{:.6f}".format(v)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("group", "pc1", "pc2", "count"))
        for c in np.unique(labels[~poisoned]):
            rows = pca[(labels == c) & ~poisoned]
            writer.writerow(("class{}".format(int(c)), fmt(rows[:, 0].mean()), fmt(rows[:, 1].mean()), rows.shape[0]))
        if poisoned.any():
            rows = pca[poisoned]
            writer.writerow(("poisoned", fmt(rows[:, 0].mean()), fmt(rows[:, 1].mean()), rows.shape[0]))
        writer.writerow(("poisoned_to_target", fmt(diag.poisoned_to_target), "", ""))
        writer.writerow(("poisoned_to_own_class", fmt(diag.poisoned_to_own_class), "", ""))
        ev = np.asarray(diag.explained_variance)
        writer.writerow(("explained_variance", fmt(float(ev[0])), fmt(float(ev[1])), ""))
