"""Independent brute-force reference implementations.

Plain numpy and Python loops, no shared code with the kernels they check.  Used by the `check`
subcommand and by the tests.
"""

import itertools
from typing import Sequence, Tuple

import jax
import jax.numpy as jnp
import jax.random as jran
import numpy as np
import optax

from .types import LayerSpec, Network


def naive_forward(net: Network, layers: Sequence[LayerSpec], batch: np.ndarray) -> np.ndarray:
    "class probabilities `[B, C]`, computed sample by sample"
    params = jax.tree_util.tree_map(np.asarray, net.params)
    out = []
    for x in np.asarray(batch, dtype=np.float64):
        for i, layer in enumerate(layers):
            if layer.kind == "dense":
                p = params["dense{}".format(i)]
                x = np.array([
                    sum(x[k] * p["kernel"][k, j] for k in range(x.shape[0])) + p["bias"][j]
                    for j in range(p["kernel"].shape[1])
                ])
            elif layer.kind == "conv2d":
                p = params["conv{}".format(i)]
                kh, kw, cin, cout = p["kernel"].shape
                H, W, _ = x.shape
                y = np.zeros((H - kh + 1, W - kw + 1, cout))
                for r in range(H - kh + 1):
                    for c in range(W - kw + 1):
                        for o in range(cout):
                            acc = p["bias"][o]
                            for dr in range(kh):
                                for dc in range(kw):
                                    for ci in range(cin):
                                        acc += x[r + dr, c + dc, ci] * p["kernel"][dr, dc, ci, o]
                            y[r, c, o] = acc
                x = y
            elif layer.kind == "relu":
                x = np.maximum(x, 0.)
            elif layer.kind == "flatten":
                x = x.reshape(-1)
        x = x.reshape(-1)
        head = params["head"]
        logits = x @ head["kernel"] + head["bias"]
        logits = logits - logits.max()
        e = np.exp(logits)
        out.append(e / e.sum())
    return np.stack(out)


def _activation_pattern(net: Network, flat: jax.Array, batch: jax.Array) -> np.ndarray:
    _, state = net.apply_fn(
        {"params": net.unravel(flat)},
        batch,
        capture_intermediates=True,
        mutable=["intermediates"],
    )
    leaves = jax.tree_util.tree_leaves(state["intermediates"])
    return np.concatenate([np.asarray(leaf).reshape(-1) > 0 for leaf in leaves])


def gradient_check(
    KEY: jax.Array,
    net: Network,
    batch: jax.Array,
    labels: jax.Array,
    analytic: jax.Array,
    n_coords: int=50,
    h: float=1e-4,
) -> Tuple[float, int]:
    """Central finite differences (L(θ+h·e_j) − L(θ−h·e_j)) / 2h on `n_coords` random coordinates,
    compared with the `analytic` gradient.  Coordinates whose perturbation flips a ReLU are skipped
    since the loss is not differentiable across the kink.

    Returns:
        max relative error |a − n| / max(|a|, |n|, 1e-6) over the checked coordinates
        number of skipped coordinates
    """
    theta = net.flat_params
    d = theta.shape[0]

    @jax.jit
    def loss_at(flat):
        logits = net.apply_fn({"params": net.unravel(flat)}, batch)
        return optax.softmax_cross_entropy_with_integer_labels(logits, labels).mean()

    coords = np.asarray(jran.choice(KEY, d, (min(n_coords, d),), replace=False))
    worst, skipped = 0., 0
    for j in coords:
        e = jnp.zeros_like(theta).at[j].set(h)
        if not (_activation_pattern(net, theta + e, batch) == _activation_pattern(net, theta - e, batch)).all():
            skipped += 1
            continue
        numeric = (float(loss_at(theta + e)) - float(loss_at(theta - e))) / (2 * h)
        a = float(analytic[j])
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-6))
    return worst, skipped


def trimmed_mean_oracle(rows: np.ndarray, m: int) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    n, d = rows.shape
    out = np.zeros(d)
    for j in range(d):
        column = sorted(rows[:, j].tolist())
        kept = column[m:n-m]
        out[j] = sum(kept) / len(kept)
    return out


def median_oracle(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    n, d = rows.shape
    out = np.zeros(d)
    for j in range(d):
        column = sorted(rows[:, j].tolist())
        out[j] = column[n // 2] if n % 2 == 1 else (column[n // 2 - 1] + column[n // 2]) / 2
    return out


def _sq_dist(a: np.ndarray, b: np.ndarray) -> float:
    return sum((x - y)**2 for x, y in zip(a.tolist(), b.tolist()))


def krum_oracle(rows: np.ndarray, f: int, n_neighbours: int | None=None) -> Tuple[int, Tuple[float, ...]]:
    "(winning row, scores); ties go to the lowest row"
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    k = n - f - 1 if n_neighbours is None else n_neighbours
    scores = []
    for i in range(n):
        dists = sorted(_sq_dist(rows[i], rows[j]) for j in range(n) if j != i)
        scores.append(sum(dists[:k]))
    best = 0
    for i in range(1, n):
        if scores[i] < scores[best]:
            best = i
    return best, tuple(scores)


def multi_krum_oracle(rows: np.ndarray, f: int, c: int) -> Tuple[Tuple[int, ...], np.ndarray]:
    "(selected rows in ascending order, mean of the selected rows)"
    rows = np.asarray(rows, dtype=np.float64)
    remaining = list(range(rows.shape[0]))
    picked = []
    while len(picked) < c:
        if len(remaining) == 1:
            picked.append(remaining.pop())
            continue
        n_r = len(remaining)
        k = min(max(n_r - f - 1, 1), n_r - 1)
        best, _ = krum_oracle(rows[remaining], f, n_neighbours=k)
        picked.append(remaining.pop(best))
    picked = sorted(picked)
    return tuple(picked), rows[picked].mean(axis=0)


def grid_geometric_median(points: np.ndarray, resolution: int=400) -> Tuple[np.ndarray, float]:
    """Brute-force minimizer of Σ‖p_i − v‖ over a `resolution`×`resolution` grid spanning the
    bounding box of 2-D points.

    Returns:
        best grid point
        grid spacing (the larger of both axes)
    """
    points = np.asarray(points, dtype=np.float64)
    lo, hi = points.min(axis=0), points.max(axis=0)
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    # [R*R, 2]
    grid = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    # [R*R]
    objectives = np.sqrt(((grid[:, None, :] - points[None, :, :])**2).sum(axis=-1)).sum(axis=-1)
    best = grid[np.argmin(objectives)]
    spacing = float(max((hi - lo).max() / (resolution - 1), 0.))
    return best, spacing


def exhaustive_cluster_excludes(dist: np.ndarray, outlier: int) -> bool:
    """True if no majority-size subset that contains `outlier` is connected under single linkage at
    the smallest height that connects any majority-size subset.
    """
    n = dist.shape[0]
    min_size = n // 2 + 1

    def connect_height(members: Tuple[int, ...]) -> float:
        # single-linkage connection height of a subset = bottleneck of its minimum spanning tree
        inside, rest = [members[0]], list(members[1:])
        height = 0.
        while rest:
            d, j = min((dist[i, j], j) for i in inside for j in rest)
            height = max(height, d)
            inside.append(j)
            rest.remove(j)
        return height

    subsets = [s for size in range(min_size, n + 1) for s in itertools.combinations(range(n), size)]
    best = min(connect_height(s) for s in subsets)
    return not any(outlier in s and connect_height(s) <= best + 1e-12 for s in subsets)
