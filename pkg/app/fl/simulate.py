from concurrent.futures import ThreadPoolExecutor
import dataclasses
import math
import os
import time
from typing import Dict, List, Tuple

import jax
import jax.numpy as jnp
import jax.random as jran
import numpy as np

from models import aggregators
from models.attacks import (
    LocalHyperparams,
    benign_local_train,
    check_patch,
    fta_local_train,
    patch_local_train,
)
from models.classifiers import make_classifier_from_config
from models.generators import make_generator
from utils import common, data, metrics
from utils.types import (
    AgentUpdate,
    AttackTargeting,
    Dataset,
    ExperimentConfig,
    Network,
    ParamVector,
    PartitionPlan,
    PoisonSplit,
    RoundReport,
    TriggerGenerator,
)


@dataclasses.dataclass
class AttackLedger:
    "few-shot bookkeeping, updated once per round"
    attacks: int=0
    stopped: bool=False


@dataclasses.dataclass(frozen=True)
class SimulationResult:
    reports: Tuple[RoundReport, ...]
    initial_net: Network
    global_net: Network
    # None unless the attack type is "fta"
    generator: TriggerGenerator | None
    train: Dataset
    test: Dataset
    partition: PartitionPlan
    malicious_ids: Tuple[int, ...]
    splits: Dict[int, PoisonSplit]
    model_description: str


def max_workers() -> int:
    "thread cap for per-round agent training, from FLSIM_MAX_WORKERS (default 1, sequential)"
    raw = os.environ.get("FLSIM_MAX_WORKERS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ValueError("FLSIM_MAX_WORKERS must be a positive integer, got '{}'".format(raw))
    if value < 1:
        raise ValueError("FLSIM_MAX_WORKERS must be a positive integer, got '{}'".format(raw))
    return value


def choose_malicious(KEY: jax.Array, cfg: ExperimentConfig) -> Tuple[int, ...]:
    if cfg.attack.type == "none":
        return ()
    ids = jran.choice(KEY, cfg.fl.total_agents, (cfg.attack.malicious_agents,), replace=False)
    return tuple(sorted(int(i) for i in ids))


def is_attack_round(round: int, cfg: ExperimentConfig, ledger: AttackLedger) -> bool:
    attack = cfg.attack
    if attack.type == "none" or round < attack.start_round:
        return False
    if (round - attack.start_round) % attack.attack_every != 0:
        return False
    if attack.mode == "fixed-frequency":
        return True
    # few-shot
    return ledger.attacks < attack.attack_num and not ledger.stopped


def schedule(
    round: int,
    cfg: ExperimentConfig,
    KEY: jax.Array,
    malicious_ids: Tuple[int, ...],
    ledger: AttackLedger,
) -> Tuple[Tuple[int, ...], int | None]:
    """Roster of one round.  An attack round holds exactly one malicious agent and fills the rest
    with benign agents sampled uniformly without replacement; other rounds are all-benign.

    Returns:
        roster in ascending id order
        the malicious agent of this round, if any
    """
    key_mal, key_benign = jran.split(KEY, 2)
    malicious_set = set(malicious_ids)
    benign_ids = np.asarray([i for i in range(cfg.fl.total_agents) if i not in malicious_set])

    malicious_id = None
    if len(malicious_ids) > 0 and is_attack_round(round, cfg, ledger):
        malicious_id = malicious_ids[int(jran.randint(key_mal, (), 0, len(malicious_ids)))]
    n_benign = cfg.fl.agents_per_round - (0 if malicious_id is None else 1)
    benign = jran.choice(key_benign, benign_ids, (n_benign,), replace=False)
    roster = [int(i) for i in benign] + ([] if malicious_id is None else [malicious_id])
    return tuple(sorted(roster)), malicious_id


def _collusion_pool(KEY: jax.Array, splits: Dict[int, PoisonSplit], cap: int) -> np.ndarray:
    "the colluders' poisoned subsets pooled for Stage I, at most `cap` samples"
    pool = np.asarray(sorted(set(i for split in splits.values() for i in split.bd_indices)), dtype=np.int64)
    if pool.shape[0] > cap:
        pool = np.sort(np.asarray(jran.choice(KEY, pool, (cap,), replace=False)))
    return pool


def run_experiment(
    cfg: ExperimentConfig,
    logger: common.Logger | None=None,
    progress: bool=True,
) -> SimulationResult:
    """θ^{t+1} = θ^t + aggregate({δ_i}) for `cfg.fl.rounds` rounds.

    Raises:
        RoundFailure: any error inside a round, with the round index attached
    """
    logger = logger if logger is not None else common.setup_logging("fl.simulate", level="WARN")
    KEY = common.set_deterministic(cfg.fl.seed)
    KEY, key_model, key_gen, key_mal, key_split, key_pool = jran.split(KEY, 6)

    train, test = data.load_datasets(cfg.dataset, seed=cfg.fl.seed)
    logger.info("loaded {} training and {} test samples of shape {} ({} classes)".format(
        train.size, test.size, train.sample_shape, train.n_classes,
    ))
    partition = data.dirichlet_partition(train, cfg.fl.total_agents, alpha=cfg.fl.dirichlet_alpha, seed=cfg.fl.seed)
    if partition.seed != cfg.fl.seed:
        logger.warn("Dirichlet draw left an agent empty, redrawn with seed {}".format(partition.seed))
    logger.debug("agent sample counts: {}".format([len(idcs) for idcs in partition.assignments]))

    global_net, description = make_classifier_from_config(key_model, cfg.model, train.sample_shape, train.n_classes)
    initial_net = global_net
    logger.info("classifier {} with {} parameters".format(description, global_net.n_params))

    hp = LocalHyperparams.from_config(cfg)
    malicious_ids = choose_malicious(key_mal, cfg)
    targeting = None
    generator = None
    splits: Dict[int, PoisonSplit] = {}
    pool_images = None
    if cfg.attack.type != "none":
        targeting = AttackTargeting(target_label=cfg.attack.target_label, n_classes=train.n_classes)
        splits = {
            i: data.poison_split(jran.fold_in(key_split, i), partition.assignments[i], cfg.attack.poison_fraction)
            for i in malicious_ids
        }
        logger.info("malicious agents {}, poisoned samples {}".format(
            list(malicious_ids),
            [len(splits[i].bd_indices) for i in malicious_ids],
        ))
        if cfg.attack.type == "fta":
            generator = make_generator(key_gen, train.sample_shape, cfg.attack.generator.hidden, cfg.attack.trigger_size)
            pool = _collusion_pool(key_pool, splits, cfg.attack.generator.dataset_size)
            pool_images = train.images[jnp.asarray(pool, dtype=jnp.int64)]
        else:
            check_patch(cfg.attack.patch, train.sample_shape)

    ledger = AttackLedger()
    residual: ParamVector | None = None
    reports: List[RoundReport] = []
    workers = max_workers()

    def local_train(agent_id: int, key: jax.Array, net: Network, gen: TriggerGenerator | None, malicious: bool):
        if not malicious:
            return benign_local_train(
                key,
                net,
                train.take(partition.assignments[agent_id]),
                hp.benign_epochs,
                hp.benign_lr,
                hp,
                agent_id=agent_id,
            ), None
        if cfg.attack.type == "fta":
            return fta_local_train(key, net, gen, train, splits[agent_id], targeting, hp, agent_id, generator_images=pool_images)
        return patch_local_train(key, net, train, splits[agent_id], cfg.attack.patch, targeting, hp, agent_id), None

    rounds = range(cfg.fl.rounds)
    if progress:
        rounds = common.tqdm(rounds, desc="rounds")
    for t in rounds:
        tic = time.perf_counter()
        try:
            key_round = jran.fold_in(KEY, t)
            key_sched, key_agents, key_agg = jran.split(key_round, 3)
            roster, malicious_id = schedule(t, cfg, key_sched, malicious_ids, ledger)

            # every agent trains against the same immutable snapshot
            snapshot = global_net
            jobs = [
                (agent_id, jran.fold_in(key_agents, agent_id), snapshot, generator, agent_id == malicious_id)
                for agent_id in roster
            ]
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(lambda job: local_train(*job), jobs))
            else:
                results = [local_train(*job) for job in jobs]
            updates: List[AgentUpdate] = [update for update, _ in results]
            for update, gen in results:
                if gen is not None:
                    generator = gen

            outcome = aggregators.aggregate(
                cfg.aggregator,
                updates,
                key_agg,
                server_lr=cfg.fl.server_lr,
                multi_krum_select=cfg.multi_krum_select,
                residual=residual,
            )
            if outcome.fallback:
                logger.warn("round {}: {} found no majority cluster, accepted every update".format(t, cfg.aggregator.rule))
            residual = outcome.residual
            global_net = snapshot.with_flat_params(snapshot.flat_params + outcome.global_delta)

            benign_acc = metrics.benign_accuracy(global_net, test)
            backdoor_acc = math.nan
            if targeting is not None:
                backdoor_acc = metrics.backdoor_accuracy(
                    global_net,
                    test,
                    generator if cfg.attack.type == "fta" else cfg.attack.patch,
                    targeting,
                    exclude_target=cfg.attack.ba_exclude_target,
                )

            if malicious_id is not None:
                ledger.attacks += 1
            if (
                cfg.attack.mode == "few-shot"
                and ledger.attacks > 0
                and not ledger.stopped
                and backdoor_acc >= cfg.attack.ba_stop_threshold
            ):
                ledger.stopped = True
                logger.info("round {}: backdoor accuracy {:.4f} reached the stop threshold after {} attack rounds".format(
                    t, backdoor_acc, ledger.attacks,
                ))

            norms = {u.agent_id: float(jnp.linalg.norm(u.delta)) for u in updates}
            benign_updates = [u.delta for u in updates if u.agent_id != malicious_id]
            benign_norms = [norms[u.agent_id] for u in updates if u.agent_id != malicious_id]
            malicious_norm, cosine, euclid = math.nan, math.nan, math.nan
            if malicious_id is not None:
                malicious_norm = norms[malicious_id]
                if len(benign_updates) > 0:
                    malicious_delta = next(u.delta for u in updates if u.agent_id == malicious_id)
                    similarity = metrics.update_similarity(malicious_delta, benign_updates)
                    cosine, euclid = similarity.cosine, similarity.euclid
                    if similarity.degenerate:
                        logger.debug("round {}: zero-norm update, cosine similarity reported as 0".format(t))
        except Exception as e:
            raise common.RoundFailure(t, e) from e

        report = RoundReport(
            round=t,
            roster=roster,
            malicious_id=malicious_id,
            benign_acc=benign_acc,
            backdoor_acc=backdoor_acc,
            update_norms=tuple(sorted(norms.items())),
            malicious_norm=malicious_norm,
            mean_benign_norm=float(np.mean(benign_norms)) if len(benign_norms) > 0 else math.nan,
            cosine_sim=cosine,
            euclid_dist=euclid,
            accepted=tuple(sorted(outcome.accepted)),
            wall_ms=1000 * (time.perf_counter() - tic),
        )
        logger.log_round(report)
        reports.append(report)

    return SimulationResult(
        reports=tuple(reports),
        initial_net=initial_net,
        global_net=global_net,
        generator=generator,
        train=train,
        test=test,
        partition=partition,
        malicious_ids=malicious_ids,
        splits=splits,
        model_description=description,
    )
