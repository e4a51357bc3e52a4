"""Server-side aggregation rules.

Rules work on the update matrix `[n, d]` stacked in ascending agent id order, so every tie-break
("lowest index") is a tie-break on agent ids and results do not depend on submission order.
"""

from typing import List, Sequence, Tuple

import chex
import jax
import jax.numpy as jnp
import jax.random as jran
import numpy as np
from scipy.cluster import hierarchy

from utils.common import NumericFailure, mkValueError
from utils.types import (
    AgentAnnotation,
    AgentUpdate,
    AggregationOutcome,
    AggregationRule,
    AggregatorConfig,
    ParamVector,
)


def stack_updates(updates: Sequence[AgentUpdate]) -> Tuple[Tuple[int, ...], jax.Array]:
    "(sorted agent ids, `[n, d]` deltas in that order)"
    if len(updates) == 0:
        raise ValueError("cannot aggregate an empty set of updates")
    updates = sorted(updates, key=lambda u: u.agent_id)
    ids = tuple(u.agent_id for u in updates)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate agent ids in {}".format(ids))
    dims = {u.delta.shape for u in updates}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ValueError("updates must be vectors of one dimension, got shapes {}".format(sorted(dims)))
    return ids, jnp.stack([u.delta for u in updates])


def update_norms(deltas: jax.Array) -> jax.Array:
    return jnp.linalg.norm(deltas, axis=-1)


def fedavg(updates: Sequence[AgentUpdate], server_lr: float=1.0) -> AggregationOutcome:
    "γ · mean(δ_i)"
    ids, deltas = stack_updates(updates)
    return AggregationOutcome(global_delta=server_lr * deltas.mean(axis=0), accepted=ids)


def norm_clip(deltas: jax.Array, tau: float) -> Tuple[jax.Array, jax.Array]:
    """Scale every update whose l2 norm exceeds τ by τ/‖δ‖.

    Returns:
        clipped `[n, d]`
        factors `[n]`: the applied scale, 1 for updates within the bound
    """
    if not tau > 0:
        raise ValueError("clip bound must be positive, got {}".format(tau))
    norms = update_norms(deltas)
    factors = jnp.where(norms > tau, tau / jnp.where(norms > tau, norms, 1.), 1.)
    return deltas * factors[:, None], factors


def adaptive_clip_bound(deltas: jax.Array) -> float:
    "mean norm after dropping one largest and one smallest norm; all norms are averaged when n < 3"
    norms = jnp.sort(update_norms(deltas))
    if norms.shape[0] < 3:
        return float(norms.mean())
    return float(norms[1:-1].mean())


def pairwise_sq_distances(deltas: jax.Array) -> jax.Array:
    diff = deltas[:, None, :] - deltas[None, :, :]
    return jnp.sum(diff**2, axis=-1)


def krum_scores(deltas: jax.Array, f: int, n_neighbours: int | None=None) -> jax.Array:
    "sum of squared distances to the `n_neighbours` (default n−f−1) nearest other updates"
    n = deltas.shape[0]
    k = n - f - 1 if n_neighbours is None else n_neighbours
    if not 1 <= k <= n - 1:
        raise ValueError("Krum needs between 1 and n-1 neighbours, got {} for n={} f={}".format(k, n, f))
    dists = pairwise_sq_distances(deltas)
    dists = jnp.where(jnp.eye(n, dtype=bool), jnp.inf, dists)
    return jnp.sort(dists, axis=-1)[:, :k].sum(axis=-1)


def krum_select(deltas: jax.Array, f: int) -> int:
    "row index of the update with the smallest Krum score, lowest index on ties"
    n = deltas.shape[0]
    if n < f + 3:
        raise ValueError("Krum needs n >= f+3, got n={} f={}".format(n, f))
    return int(jnp.argmin(krum_scores(deltas, f)))


def multi_krum_indices(deltas: jax.Array, f: int, c: int) -> Tuple[int, ...]:
    """Repeatedly pick the Krum winner among the remaining updates until c are picked.  Every
    round scores with clip(n_r−f−1, 1, n_r−1) neighbours, n_r being the number remaining.

    Returns:
        picked row indices in ascending order
    """
    n = deltas.shape[0]
    if n < f + 3:
        raise ValueError("Multi-Krum needs n >= f+3, got n={} f={}".format(n, f))
    if not 1 <= c <= n:
        raise ValueError("Multi-Krum selection size must be in [1, {}], got {}".format(n, c))
    remaining: List[int] = list(range(n))
    picked: List[int] = []
    while len(picked) < c:
        n_r = len(remaining)
        if n_r == 1:
            picked.append(remaining.pop())
            continue
        k = min(max(n_r - f - 1, 1), n_r - 1)
        scores = krum_scores(deltas[jnp.asarray(remaining)], f, n_neighbours=k)
        picked.append(remaining.pop(int(jnp.argmin(scores))))
    return tuple(sorted(picked))


def multi_krum(updates: Sequence[AgentUpdate], f: int, c: int, server_lr: float=1.0) -> AggregationOutcome:
    ids, deltas = stack_updates(updates)
    picked = multi_krum_indices(deltas, f, c)
    scores = krum_scores(deltas, f)
    return AggregationOutcome(
        global_delta=server_lr * deltas[jnp.asarray(picked)].mean(axis=0),
        accepted=tuple(ids[i] for i in picked),
        annotations=tuple(
            AgentAnnotation(agent_id=agent_id, krum_score=float(score))
            for agent_id, score in zip(ids, scores)
        ),
    )


def trimmed_mean(deltas: jax.Array, m: int) -> ParamVector:
    "per coordinate, drop the m largest and m smallest values and average the rest"
    n = deltas.shape[0]
    if not n > 2 * m:
        raise ValueError("trimmed mean needs n > 2m, got n={} m={}".format(n, m))
    return jnp.sort(deltas, axis=0)[m:n-m].mean(axis=0)


def coordinate_median(deltas: jax.Array) -> ParamVector:
    "per-coordinate median, the midpoint of the two central values for even n"
    return jnp.median(deltas, axis=0)


def sign_aggregate(deltas: jax.Array, sign_lr: float) -> ParamVector:
    "γ_s · sign(Σ_i sign(δ_i)), exact ties give 0"
    if not sign_lr > 0:
        raise ValueError("sign learning rate must be positive, got {}".format(sign_lr))
    return sign_lr * jnp.sign(jnp.sign(deltas).sum(axis=0))


def geometric_median_objective(deltas: jax.Array, v: jax.Array) -> float:
    return float(jnp.linalg.norm(deltas - v[None, :], axis=-1).sum())


def rfa_geometric_median(
    deltas: jax.Array,
    max_iters: int=100,
    tol: float=1e-8,
    smoothing: float=1e-6,
) -> Tuple[ParamVector, Tuple[float, ...]]:
    """Smoothed Weiszfeld iteration started from the mean:
        v ← Σ(δ_i / max(ν, ‖δ_i − v‖)) / Σ(1 / max(ν, ‖δ_i − v‖))

    Returns:
        the approximate geometric median
        objective Σ‖δ_i − v‖ of the start point and of every iterate
    """
    if max_iters < 1 or not tol > 0 or not smoothing > 0:
        raise ValueError("need max_iters >= 1, tol > 0 and smoothing > 0, got {}, {}, {}".format(
            max_iters, tol, smoothing,
        ))
    v = deltas.mean(axis=0)
    objectives = [geometric_median_objective(deltas, v)]
    for iteration in range(max_iters):
        weights = 1 / jnp.maximum(smoothing, jnp.linalg.norm(deltas - v[None, :], axis=-1))
        v_next = (weights[:, None] * deltas).sum(axis=0) / weights.sum()
        change = float(jnp.linalg.norm(v_next - v))
        v = v_next
        objectives.append(geometric_median_objective(deltas, v))
        # Weiszfeld steps never increase Σ‖δ_i − v‖
        if objectives[-1] > objectives[-2] + 1e-9 * max(1., objectives[-2]):
            raise NumericFailure(stage="rfa", epoch=iteration, detail="objective rose from {:.12e} to {:.12e}".format(
                objectives[-2], objectives[-1],
            ))
        if change < tol:
            break
    return v, tuple(objectives)


def cosine_distances(deltas: jax.Array) -> jax.Array:
    "1 − cos(δ_i, δ_j); a zero update is at distance 1 from every other update"
    norms = update_norms(deltas)
    nonzero = norms > 0
    unit = deltas / jnp.where(nonzero, norms, 1.)[:, None]
    dist = 1 - unit @ unit.T
    dist = jnp.where(nonzero[:, None] & nonzero[None, :], dist, 1.)
    dist = jnp.clip(dist, 0., 2.)
    return jnp.where(jnp.eye(deltas.shape[0], dtype=bool), 0., dist)


def majority_cluster(dist: np.ndarray) -> np.ndarray | None:
    """Single-linkage clustering of a distance matrix, cut at the first merge height where a cluster
    of at least ⌊n/2⌋+1 members appears.

    Returns:
        boolean membership mask of that cluster, `None` if the distances are not finite
    """
    n = dist.shape[0]
    if not np.isfinite(dist).all():
        return None
    min_size = n // 2 + 1
    if n == 1:
        return np.ones((1,), dtype=bool)
    condensed = dist[np.triu_indices(n, k=1)]
    Z = hierarchy.linkage(condensed, method="single")
    height = float(Z[np.flatnonzero(Z[:, 3] >= min_size)[0], 2])
    labels = hierarchy.fcluster(Z, t=height + 1e-12, criterion="distance")
    sizes = np.bincount(labels)
    # the first label reaching the maximal size; with min_size > n/2 it is unique
    return labels == int(np.argmax(sizes))


def flame(updates: Sequence[AgentUpdate], noise: float, KEY: jax.Array) -> AggregationOutcome:
    """Keep the majority cluster under cosine distance, clip the kept updates to their median norm,
    average, and add Gaussian noise with std `noise` × that median norm.
    """
    ids, deltas = stack_updates(updates)
    n = deltas.shape[0]
    if n < 3:
        raise ValueError("FLAME needs at least 3 updates, got {}".format(n))

    mask = majority_cluster(np.asarray(cosine_distances(deltas)))
    fallback = mask is None
    if fallback:
        mask = np.ones((n,), dtype=bool)
    kept = np.flatnonzero(mask)

    norms = update_norms(deltas)
    median_norm = jnp.median(norms[kept])
    factors = jnp.where(norms > median_norm, median_norm / jnp.where(norms > 0, norms, 1.), 1.)
    clipped = deltas[kept] * factors[kept][:, None]
    global_delta = clipped.mean(axis=0)
    if noise > 0:
        global_delta = global_delta + noise * median_norm * jran.normal(KEY, global_delta.shape, dtype=global_delta.dtype)
    return AggregationOutcome(
        global_delta=global_delta,
        accepted=tuple(ids[i] for i in kept),
        annotations=tuple(
            AgentAnnotation(
                agent_id=ids[i],
                clip_factor=float(factors[i]) if mask[i] else 0.,
                cluster=0 if mask[i] else -1,
            )
            for i in range(n)
        ),
        fallback=fallback,
    )


def top_k_sparsify(vec: ParamVector, k: int) -> ParamVector:
    "zero all but the k largest-magnitude coordinates, lower coordinate index first on ties"
    d = vec.shape[0]
    if not 1 <= k <= d:
        raise ValueError("k must be in [1, {}], got {}".format(d, k))
    _, idcs = jax.lax.top_k(jnp.abs(vec), k)
    return jnp.zeros_like(vec).at[idcs].set(vec[idcs])


def sparsefed(
    updates: Sequence[AgentUpdate],
    tau: float,
    k: int,
    server_lr: float=1.0,
    residual: ParamVector | None=None,
    error_feedback: bool=False,
) -> AggregationOutcome:
    """Clip every update to τ, average, keep the top-k coordinates and scale by γ.

    With error feedback the coordinates dropped this round are added back to the next round's
    average through `residual`.
    """
    ids, deltas = stack_updates(updates)
    clipped, factors = norm_clip(deltas, tau)
    avg = clipped.mean(axis=0)
    if error_feedback and residual is not None:
        chex.assert_equal_shape([avg, residual])
        avg = avg + residual
    sparse = top_k_sparsify(avg, k)
    return AggregationOutcome(
        global_delta=server_lr * sparse,
        accepted=ids,
        annotations=tuple(
            AgentAnnotation(agent_id=agent_id, clip_factor=float(factor))
            for agent_id, factor in zip(ids, factors)
        ),
        residual=avg - sparse if error_feedback else None,
    )


def _clipped_mean(updates: Sequence[AgentUpdate], tau: float, server_lr: float) -> AggregationOutcome:
    ids, deltas = stack_updates(updates)
    clipped, factors = norm_clip(deltas, tau)
    return AggregationOutcome(
        global_delta=server_lr * clipped.mean(axis=0),
        accepted=ids,
        annotations=tuple(
            AgentAnnotation(agent_id=agent_id, clip_factor=float(factor))
            for agent_id, factor in zip(ids, factors)
        ),
    )


def aggregate(
    cfg: AggregatorConfig,
    updates: Sequence[AgentUpdate],
    KEY: jax.Array,
    server_lr: float=1.0,
    multi_krum_select: int | None=None,
    residual: ParamVector | None=None,
) -> AggregationOutcome:
    """Dispatch to the configured rule.

    Robust replacements of the mean (trimmed mean, median, RFA, Krum, Multi-Krum) are scaled by the
    server learning rate γ like FedAvg; SignSGD is scaled by its own γ_s and FLAME's output is
    used as is.

    Inputs:
        multi_krum_select: c, defaults to n − f
        residual: SparseFed error-feedback memory from the previous round
    """
    rule: AggregationRule = cfg.rule
    if rule == "fedavg":
        return fedavg(updates, server_lr)
    elif rule == "norm-clip":
        return _clipped_mean(updates, cfg.clip_bound, server_lr)
    elif rule == "adaptive-clip":
        _, deltas = stack_updates(updates)
        tau = adaptive_clip_bound(deltas)
        if not tau > 0:
            # every update is zero
            return fedavg(updates, server_lr)
        return _clipped_mean(updates, tau, server_lr)
    elif rule == "krum":
        ids, deltas = stack_updates(updates)
        winner = krum_select(deltas, cfg.krum_byzantine)
        scores = krum_scores(deltas, cfg.krum_byzantine)
        return AggregationOutcome(
            global_delta=server_lr * deltas[winner],
            accepted=(ids[winner],),
            annotations=tuple(
                AgentAnnotation(agent_id=agent_id, krum_score=float(score))
                for agent_id, score in zip(ids, scores)
            ),
        )
    elif rule == "multi-krum":
        c = multi_krum_select if multi_krum_select is not None else len(updates) - cfg.krum_byzantine
        return multi_krum(updates, cfg.krum_byzantine, c, server_lr)
    elif rule == "trimmed-mean":
        ids, deltas = stack_updates(updates)
        return AggregationOutcome(global_delta=server_lr * trimmed_mean(deltas, cfg.trim), accepted=ids)
    elif rule == "median":
        ids, deltas = stack_updates(updates)
        return AggregationOutcome(global_delta=server_lr * coordinate_median(deltas), accepted=ids)
    elif rule == "signsgd":
        ids, deltas = stack_updates(updates)
        return AggregationOutcome(global_delta=sign_aggregate(deltas, cfg.sign_lr), accepted=ids)
    elif rule == "rfa":
        ids, deltas = stack_updates(updates)
        median, _ = rfa_geometric_median(deltas, cfg.rfa_max_iters, cfg.rfa_tol, cfg.rfa_smoothing)
        return AggregationOutcome(global_delta=server_lr * median, accepted=ids)
    elif rule == "flame":
        return flame(updates, cfg.flame_noise, KEY)
    elif rule == "sparsefed":
        _, deltas = stack_updates(updates)
        return sparsefed(
            updates,
            cfg.clip_bound,
            cfg.resolved_sparsefed_k(deltas.shape[1]),
            server_lr,
            residual=residual,
            error_feedback=cfg.sparsefed_error_feedback,
        )
    else:
        raise mkValueError(desc="aggregation rule", value=rule, type=AggregationRule)
