import gzip
from pathlib import Path
import struct
from typing import Iterator, Sequence, Tuple

import jax
import jax.numpy as jnp
import jax.random as jran
import numpy as np

from ._constants import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC
from .common import IdxFormatError
from .types import Dataset, DatasetConfig, PartitionPlan, PoisonSplit


def gen_synthetic(
    n_classes: int,
    n: int,
    dim: int,
    spread: float,
    seed: int,
    image_shape: Tuple[int, int] | None=None,
) -> Dataset:
    """`n_classes` isotropic Gaussian clusters with centers drawn uniformly from the unit cube,
    clipped to [0, 1]^dim.  Labels are balanced (round-robin) and shuffled.

    If `image_shape` is given, samples are shaped as single-channel images `[H, W, 1]`.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes, got {}".format(n_classes))
    if n < n_classes:
        raise ValueError("need at least one sample per class, got n={} for {} classes".format(n, n_classes))
    if not spread > 0:
        raise ValueError("spread must be positive, got {}".format(spread))
    if image_shape is not None and image_shape[0] * image_shape[1] != dim:
        raise ValueError("image shape {} does not match dim={}".format(image_shape, dim))

    KEY = jran.PRNGKey(seed)
    key_centers, key_labels, key_noise = jran.split(KEY, 3)
    centers = jran.uniform(key_centers, (n_classes, dim), dtype=jnp.float64)
    labels = jran.permutation(key_labels, jnp.arange(n, dtype=jnp.int64) % n_classes)
    noise = spread * jran.normal(key_noise, (n, dim), dtype=jnp.float64)
    images = jnp.clip(centers[labels] + noise, 0., 1.)
    if image_shape is not None:
        images = images.reshape(n, *image_shape, 1)
    return Dataset(images=images, labels=labels, n_classes=n_classes)


def split_train_test(ds: Dataset, n_test: int) -> Tuple[Dataset, Dataset]:
    "the last `n_test` samples become the test set"
    if not 0 < n_test < ds.size:
        raise ValueError("cannot hold out {} of {} samples".format(n_test, ds.size))
    n_train = ds.size - n_test
    return ds.take(np.arange(n_train)), ds.take(np.arange(n_train, ds.size))


def _open_idx(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx_images(path: str | Path) -> np.ndarray:
    """
    [offset] [type]          [value]          [description]
    0000     32 bit integer  0x00000803(2051) magic number
    0004     32 bit integer  ??               number of images
    0008     32 bit integer  ??               number of rows
    0012     32 bit integer  ??               number of columns
    0016     unsigned byte   ??               pixel, row-major
    """
    path = Path(path)
    with _open_idx(path) as f:
        payload = f.read()
    if len(payload) < 16:
        raise IdxFormatError(path, "header", "expected 16 header bytes, got {}".format(len(payload)))
    magic, count, rows, cols = struct.unpack(">IIII", payload[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(path, "magic", "expected 0x{:08x} for images, got 0x{:08x}".format(IDX_IMAGES_MAGIC, magic))
    expected = count * rows * cols
    if len(payload) - 16 != expected:
        raise IdxFormatError(path, "pixels", "expected {} pixel bytes for {}x{}x{}, got {}".format(
            expected, count, rows, cols, len(payload) - 16,
        ))
    return np.frombuffer(payload, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def read_idx_labels(path: str | Path) -> np.ndarray:
    """
    [offset] [type]          [value]          [description]
    0000     32 bit integer  0x00000801(2049) magic number
    0004     32 bit integer  ??               number of items
    0008     unsigned byte   ??               label
    """
    path = Path(path)
    with _open_idx(path) as f:
        payload = f.read()
    if len(payload) < 8:
        raise IdxFormatError(path, "header", "expected 8 header bytes, got {}".format(len(payload)))
    magic, count = struct.unpack(">II", payload[:8])
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(path, "magic", "expected 0x{:08x} for labels, got 0x{:08x}".format(IDX_LABELS_MAGIC, magic))
    if len(payload) - 8 != count:
        raise IdxFormatError(path, "labels", "expected {} label bytes, got {}".format(count, len(payload) - 8))
    return np.frombuffer(payload, dtype=np.uint8, offset=8)


def load_idx(images_path: str | Path, labels_path: str | Path, n_classes: int | None=None) -> Dataset:
    "pixels are scaled to [0, 1] by /255 and shaped `[N, rows, cols, 1]`"
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(labels_path, "count", "{} labels for {} images in '{}'".format(
            labels.shape[0], images.shape[0], images_path,
        ))
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.shape[0] > 0 else 1
    elif labels.shape[0] > 0 and labels.max() >= n_classes:
        raise IdxFormatError(labels_path, "labels", "label {} is not in [0, {})".format(labels.max(), n_classes))
    return Dataset(
        images=jnp.asarray(images[..., None], dtype=jnp.float64) / 255,
        labels=jnp.asarray(labels, dtype=jnp.int64),
        n_classes=n_classes,
    )


def write_idx(ds: Dataset, images_path: str | Path, labels_path: str | Path) -> None:
    "pixels are quantized to u8 by round(x*255); a dataset already on the 1/255 grid round-trips losslessly"
    images = np.asarray(ds.images)
    if images.ndim == 4:
        if images.shape[-1] != 1:
            raise ValueError("IDX stores single-channel images only, got {} channels".format(images.shape[-1]))
        images = images[..., 0]
    if images.ndim != 3:
        raise ValueError("IDX stores [N, rows, cols] images, got shape {}".format(images.shape))
    count, rows, cols = images.shape
    pixels = np.clip(np.round(images * 255), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols))
        f.write(pixels.tobytes(order="C"))
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, count))
        f.write(np.asarray(ds.labels).astype(np.uint8).tobytes())


def load_datasets(cfg: DatasetConfig, seed: int) -> Tuple[Dataset, Dataset]:
    "(train, test) as described by the dataset block of an experiment config"
    if cfg.kind == "synthetic":
        full = gen_synthetic(
            n_classes=cfg.n_classes,
            n=cfg.n_samples + cfg.n_test,
            dim=cfg.dim,
            spread=cfg.spread,
            seed=seed,
            image_shape=cfg.image_shape,
        )
        return split_train_test(full, cfg.n_test)
    train = load_idx(cfg.train_images, cfg.train_labels)
    test = load_idx(cfg.test_images, cfg.test_labels)
    n_classes = max(train.n_classes, test.n_classes)
    train, test = train.replace(n_classes=n_classes), test.replace(n_classes=n_classes)
    if cfg.limit is not None:
        train = train.take(np.arange(min(cfg.limit, train.size)))
    return train, test


def _draw_partition(labels: np.ndarray, n_classes: int, n_agents: int, alpha: float, seed: int) -> Tuple[Tuple[int, ...], ...]:
    KEY = jran.PRNGKey(seed)
    owners = np.full(labels.shape[0], -1, dtype=np.int64)
    for c in range(n_classes):
        class_idcs = np.flatnonzero(labels == c)
        if class_idcs.shape[0] == 0:
            continue
        KEY, key_p, key_assign = jran.split(KEY, 3)
        p = jran.dirichlet(key_p, jnp.full((n_agents,), alpha, dtype=jnp.float64))
        owners[class_idcs] = np.asarray(jran.choice(
            key_assign,
            n_agents,
            shape=(class_idcs.shape[0],),
            replace=True,
            p=p,
        ))
    return tuple(tuple(np.flatnonzero(owners == i).tolist()) for i in range(n_agents))


def dirichlet_partition(
    ds: Dataset,
    n_agents: int,
    alpha: float=0.7,
    seed: int=0,
    max_redraws: int=1000,
) -> PartitionPlan:
    """For every class c, draw p ~ Dir(alpha * 1_{n_agents}) and assign each class-c sample to an
    agent drawn from p.  A draw that leaves an agent empty is repeated with seed+1.
    """
    if n_agents < 1:
        raise ValueError("need at least one agent, got {}".format(n_agents))
    if not alpha > 0:
        raise ValueError("Dirichlet concentration must be positive, got {}".format(alpha))
    if n_agents > ds.size:
        raise ValueError("cannot partition {} samples among {} agents".format(ds.size, n_agents))

    labels = np.asarray(ds.labels)
    for attempt in range(max_redraws):
        assignments = _draw_partition(labels, ds.n_classes, n_agents, alpha, seed + attempt)
        if all(len(idcs) > 0 for idcs in assignments):
            return PartitionPlan(assignments=assignments, alpha=alpha, seed=seed + attempt)
    raise RuntimeError("every one of {} Dirichlet draws left an agent without samples (alpha={}, {} agents, {} samples)".format(
        max_redraws, alpha, n_agents, ds.size,
    ))


def poison_split(KEY: jax.Array, local_indices: Sequence[int], fraction: float) -> PoisonSplit:
    "floor(fraction * |local|) indices drawn without replacement become the poisoned subset"
    if not 0 <= fraction <= 1:
        raise ValueError("poison fraction must be in [0, 1], got {}".format(fraction))
    local = np.asarray(local_indices, dtype=np.int64)
    n_bd = int(np.floor(fraction * local.shape[0]))
    if n_bd == 0:
        bd = np.zeros((0,), dtype=np.int64)
    else:
        bd = np.sort(np.asarray(jran.choice(KEY, local, shape=(n_bd,), replace=False)))
    return PoisonSplit(
        clean_indices=tuple(local.tolist()),
        bd_indices=tuple(bd.tolist()),
        fraction=fraction,
    )


def minibatch_indices(KEY: jax.Array, n: int, batch_size: int) -> Iterator[np.ndarray]:
    """One shuffled epoch.  The remainder batch is dropped to keep batch shapes fixed, unless the
    whole set is smaller than a batch, in which case it forms a single batch.
    """
    perm = np.asarray(jran.permutation(KEY, n))
    if n <= batch_size:
        yield perm
        return
    for i in range(n // batch_size):
        yield perm[i * batch_size:(i + 1) * batch_size]
