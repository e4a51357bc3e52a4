import dataclasses
import time
from typing import Callable, List, Tuple

import jax
import jax.numpy as jnp
import jax.random as jran
import numpy as np

from models import aggregators, substrate, trigger
from models.classifiers import make_classifier
from models.generators import make_generator
from utils import common, oracles
from utils.args import CheckArgs
from utils.types import LayerSpec


@dataclasses.dataclass(frozen=True)
class CheckImpls:
    "implementations under test, replaceable to make sure the checks catch a broken kernel"
    loss_and_grad: Callable=substrate.loss_and_grad
    forward: Callable=substrate.forward
    trimmed_mean: Callable=aggregators.trimmed_mean
    coordinate_median: Callable=aggregators.coordinate_median
    krum_select: Callable=aggregators.krum_select
    multi_krum_indices: Callable=aggregators.multi_krum_indices
    rfa_geometric_median: Callable=aggregators.rfa_geometric_median
    generate: Callable=trigger.generate


@dataclasses.dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _random_net(KEY: jax.Array, i: int):
    "small MLPs and CNNs on 6x6 single-channel inputs, 4 classes"
    KEY, key_h = jran.split(KEY, 2)
    hidden = int(jran.randint(key_h, (), 3, 9))
    if i % 2 == 0:
        layers = (
            LayerSpec(kind="flatten"),
            LayerSpec(kind="dense", features=hidden),
            LayerSpec(kind="relu"),
            LayerSpec(kind="dense", features=hidden),
            LayerSpec(kind="relu"),
        )
    else:
        layers = (
            LayerSpec(kind="conv2d", features=3, kernel=(3, 3)),
            LayerSpec(kind="relu"),
            LayerSpec(kind="flatten"),
            LayerSpec(kind="dense", features=hidden),
            LayerSpec(kind="relu"),
        )
    return make_classifier(KEY, layers, (6, 6, 1), 4), layers


def check_gradients(KEY: jax.Array, impls: CheckImpls, n_nets: int) -> Tuple[bool, str]:
    worst, skipped = 0., 0
    for i in range(n_nets):
        KEY, key_net, key_x, key_y, key_coords = jran.split(KEY, 5)
        net, _ = _random_net(key_net, i)
        x = jran.uniform(key_x, (8, 6, 6, 1), dtype=jnp.float64)
        y = jran.randint(key_y, (8,), 0, 4)
        _, grad = impls.loss_and_grad(net, x, y)
        err, n_skipped = oracles.gradient_check(key_coords, net, x, y, grad)
        worst, skipped = max(worst, err), skipped + n_skipped
    return worst < 1e-4, "max rel err {:.2e} over {} nets ({} kink coordinates skipped)".format(worst, n_nets, skipped)


def check_forward(KEY: jax.Array, impls: CheckImpls, n_nets: int=4) -> Tuple[bool, str]:
    worst = 0.
    for i in range(n_nets):
        KEY, key_net, key_x = jran.split(KEY, 3)
        net, layers = _random_net(key_net, i)
        x = jran.uniform(key_x, (3, 6, 6, 1), dtype=jnp.float64)
        probs = np.asarray(impls.forward(net, x))
        worst = max(worst, float(np.abs(probs - oracles.naive_forward(net, layers, np.asarray(x))).max()))
    return worst <= 1e-12, "max abs deviation {:.2e}".format(worst)


def _random_instance(rng: np.random.Generator, n_min: int=1) -> np.ndarray:
    n = int(rng.integers(n_min, 9))
    d = int(rng.integers(1, 7))
    return rng.normal(size=(n, d))


def check_trimmed_mean(rng: np.random.Generator, impls: CheckImpls, instances: int) -> Tuple[bool, str]:
    worst = 0.
    for _ in range(instances):
        rows = _random_instance(rng, n_min=1)
        m = int(rng.integers(0, (rows.shape[0] - 1) // 2 + 1))
        got = np.asarray(impls.trimmed_mean(jnp.asarray(rows), m))
        worst = max(worst, float(np.abs(got - oracles.trimmed_mean_oracle(rows, m)).max()))
    return worst <= 1e-12, "max abs deviation {:.2e}".format(worst)


def check_median(rng: np.random.Generator, impls: CheckImpls, instances: int) -> Tuple[bool, str]:
    worst = 0.
    for _ in range(instances):
        rows = _random_instance(rng)
        got = np.asarray(impls.coordinate_median(jnp.asarray(rows)))
        worst = max(worst, float(np.abs(got - oracles.median_oracle(rows)).max()))
    return worst <= 1e-12, "max abs deviation {:.2e}".format(worst)


def check_krum(rng: np.random.Generator, impls: CheckImpls, instances: int) -> Tuple[bool, str]:
    mismatches = 0
    for _ in range(instances):
        f = int(rng.integers(0, 3))
        rows = _random_instance(rng, n_min=f + 3)
        if rows.shape[0] < f + 3:
            continue
        expected, _ = oracles.krum_oracle(rows, f)
        mismatches += int(impls.krum_select(jnp.asarray(rows), f) != expected)
    return mismatches == 0, "{} mismatches".format(mismatches)


def check_multi_krum(rng: np.random.Generator, impls: CheckImpls, instances: int) -> Tuple[bool, str]:
    mismatches = 0
    for _ in range(instances):
        f = int(rng.integers(0, 3))
        rows = _random_instance(rng, n_min=f + 3)
        if rows.shape[0] < f + 3:
            continue
        c = int(rng.integers(1, rows.shape[0] + 1))
        expected, expected_mean = oracles.multi_krum_oracle(rows, f, c)
        picked = tuple(impls.multi_krum_indices(jnp.asarray(rows), f, c))
        got_mean = rows[list(picked)].mean(axis=0)
        mismatches += int(picked != expected or np.abs(got_mean - expected_mean).max() > 1e-12)
    return mismatches == 0, "{} mismatches".format(mismatches)


def check_rfa(rng: np.random.Generator, impls: CheckImpls, instances: int) -> Tuple[bool, str]:
    failures = 0
    for _ in range(instances):
        points = rng.uniform(size=(int(rng.integers(3, 7)), 2))
        median, objectives = impls.rfa_geometric_median(jnp.asarray(points), max_iters=1000)
        best, spacing = oracles.grid_geometric_median(points)
        close = np.abs(np.asarray(median) - best).max() <= 2 * spacing
        monotone = all(b <= a + 1e-12 for a, b in zip(objectives, objectives[1:]))
        failures += int(not (close and monotone))
    return failures == 0, "{} of {} instances off the grid minimizer or non-monotone".format(failures, instances)


def check_projection(KEY: jax.Array, impls: CheckImpls, triples: int) -> Tuple[bool, str]:
    n_gens = 50
    per_gen = max(1, triples // n_gens)
    violations, worst = 0, -np.inf
    for _ in range(n_gens):
        KEY, key_gen, key_eps, key_scale, key_x = jran.split(KEY, 5)
        epsilon = float(jran.uniform(key_eps, (), minval=0., maxval=3.))
        gen = make_generator(key_gen, (16,), hidden=8, epsilon=epsilon)
        scale = float(jran.uniform(key_scale, (), minval=0.1, maxval=100.))
        gen = gen.with_flat_params(scale * gen.flat_params)
        x = jran.uniform(key_x, (per_gen, 16), dtype=jnp.float64)
        norms = np.asarray(jnp.linalg.norm(impls.generate(gen, x), axis=-1))
        violations += int((norms > epsilon + 1e-9).sum())
        worst = max(worst, float((norms - epsilon).max()))
    return violations == 0, "{} violations in {} triples, max ‖g‖−ε {:.2e}".format(violations, n_gens * per_gen, worst)


def check_robustness(rng: np.random.Generator, impls: CheckImpls, trials: int) -> Tuple[bool, str]:
    failures = 0
    for _ in range(trials):
        n, d = int(rng.integers(4, 9)), int(rng.integers(1, 7))
        honest = rng.normal(size=(d,))
        rows = np.tile(honest, (n, 1))
        bad = int(rng.integers(0, n))
        rows[bad] = rng.normal(scale=100., size=(d,))
        rows = jnp.asarray(rows)
        krum_ok = impls.krum_select(rows, 1) != bad
        tm_ok = np.abs(np.asarray(impls.trimmed_mean(rows, 1)) - honest).max() <= 1e-12
        med_ok = np.abs(np.asarray(impls.coordinate_median(rows)) - honest).max() <= 1e-12
        failures += int(not (krum_ok and tm_ok and med_ok))
    return failures == 0, "{} of {} trials failed".format(failures, trials)


def run_checks(KEY: jax.Array, args: CheckArgs, impls: CheckImpls=CheckImpls()) -> List[CheckResult]:
    rng = np.random.default_rng(int(jran.randint(KEY, (), 0, 2**31 - 1)))
    keys = jran.split(KEY, 3)
    suites: List[Tuple[str, Callable[[], Tuple[bool, str]]]] = [
        ("gradient", lambda: check_gradients(keys[0], impls, args.gradient_nets)),
        ("forward", lambda: check_forward(keys[1], impls)),
        ("trimmed-mean", lambda: check_trimmed_mean(rng, impls, args.aggregator_instances)),
        ("median", lambda: check_median(rng, impls, args.aggregator_instances)),
        ("krum", lambda: check_krum(rng, impls, args.aggregator_instances)),
        ("multi-krum", lambda: check_multi_krum(rng, impls, args.aggregator_instances)),
        ("rfa", lambda: check_rfa(rng, impls, args.rfa_instances)),
        ("projection", lambda: check_projection(keys[2], impls, args.projection_triples)),
        ("robustness", lambda: check_robustness(rng, impls, args.robustness_trials)),
    ]
    results = []
    for name, suite in suites:
        tic = time.perf_counter()
        try:
            passed, detail = suite()
        except Exception as e:
            passed, detail = False, "raised {}: {}".format(type(e).__name__, e)
        results.append(CheckResult(name=name, passed=passed, detail=detail, seconds=time.perf_counter() - tic))
    return results


def cmd_check(KEY: jax.Array, args: CheckArgs, logger: common.Logger, impls: CheckImpls=CheckImpls()) -> int:
    results = run_checks(KEY, args, impls)
    width = max(len(r.name) for r in results)
    logger.info("{}  {}  {:>7}  {}".format("check".ljust(width), "result", "seconds", "detail"))
    for r in results:
        line = "{}  {}  {:7.2f}  {}".format(r.name.ljust(width), "PASS  " if r.passed else "FAIL  ", r.seconds, r.detail)
        if r.passed:
            logger.info(line)
        else:
            logger.error(line)
    n_failed = sum(not r.passed for r in results)
    if n_failed > 0:
        logger.error("{} of {} checks failed".format(n_failed, len(results)))
        return 1
    logger.info("all {} checks passed".format(len(results)))
    return 0
