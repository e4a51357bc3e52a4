import jax
import jax.numpy as jnp
import jax.random as jran
import numpy as np
import pytest

from models import substrate, trigger
from models.classifiers import make_classifier
from models.generators import make_generator
from utils import data
from utils.common import NumericFailure
from utils.types import AttackTargeting, LayerSpec

from conftest import MLP_LAYERS


def _norms(noise: jax.Array) -> np.ndarray:
    return np.asarray(jnp.linalg.norm(noise.reshape(noise.shape[0], -1), axis=-1))


def test_projection_scales_long_noise_to_the_bound():
    noise = jnp.asarray([[6., 8.]])
    np.testing.assert_allclose(trigger.project_noise(noise, 5.), [[3., 4.]], atol=1e-12)
    assert _norms(trigger.project_noise(noise, 5.))[0] == pytest.approx(5., abs=1e-12)


def test_projection_keeps_short_noise():
    noise = jnp.asarray([[0.3, 0.4]])
    np.testing.assert_array_equal(trigger.project_noise(noise, 1.), noise)


def test_projection_gradient_is_finite_at_zero():
    g = jax.grad(lambda n: trigger.project_noise(n, 1.).sum())(jnp.zeros((1, 3)))
    assert bool(jnp.isfinite(g).all())


def test_zero_generator_leaves_samples_unchanged(KEY):
    gen = make_generator(KEY, (4, 4, 1), hidden=8, epsilon=1.)
    gen = gen.with_flat_params(jnp.zeros_like(gen.flat_params))
    x = jran.uniform(KEY, (3, 4, 4, 1), dtype=jnp.float64)
    np.testing.assert_array_equal(trigger.generate(gen, x), 0.)
    np.testing.assert_array_equal(trigger.apply(gen, x), x)


def test_zero_bound_is_the_identity_trigger(KEY):
    gen = make_generator(KEY, (5,), hidden=4, epsilon=0.)
    x = jran.uniform(KEY, (3, 5), dtype=jnp.float64)
    np.testing.assert_array_equal(trigger.apply(gen, x), x)


def test_negative_bound_is_rejected(KEY):
    with pytest.raises(ValueError):
        make_generator(KEY, (5,), hidden=4, epsilon=-1.)


def test_apply_on_black_image_clamps_negative_noise(KEY):
    gen = make_generator(KEY, (6,), hidden=4, epsilon=2.)
    x = jnp.zeros((2, 6))
    np.testing.assert_array_equal(trigger.apply(gen, x), jnp.maximum(trigger.generate(gen, x), 0.))


@pytest.mark.parametrize("scale", [0.1, 1., 50.])
def test_bound_holds_for_random_generators(KEY, scale):
    key_gen, key_x = jran.split(KEY)
    for eps in (0.3, 1., 2.5):
        gen = make_generator(key_gen, (4, 4, 1), hidden=8, epsilon=eps)
        gen = gen.with_flat_params(scale * gen.flat_params)
        x = jran.uniform(key_x, (200, 4, 4, 1), dtype=jnp.float64)
        assert (_norms(trigger.generate(gen, x)) <= eps + 1e-9).all()


def _stage_one_setup(KEY, epsilon=2.):
    key_net, key_gen = jran.split(KEY)
    ds = data.gen_synthetic(10, 400, 16, 0.1, seed=0)
    frozen = make_classifier(key_net, MLP_LAYERS, (16,), 10)
    frozen = frozen.with_optimizer(substrate.make_optimizer(0.1))
    for _ in range(50):
        frozen, _ = substrate.train_step(frozen, ds.images, ds.labels)
    gen = make_generator(key_gen, (16,), hidden=16, epsilon=epsilon)
    targeting = AttackTargeting(target_label=7, n_classes=10)
    return ds, frozen, gen, targeting


def test_zero_epochs_return_the_generator_unchanged(KEY):
    ds, frozen, gen, targeting = _stage_one_setup(KEY)
    out = trigger.train_generator(KEY, gen, frozen, ds.images[:64], targeting, epochs=0, lr=0.01)
    assert out is gen


def test_stage_one_never_touches_the_classifier(KEY):
    ds, frozen, gen, targeting = _stage_one_setup(KEY)
    before = frozen.flat_params
    trigger.train_generator(KEY, gen, frozen, ds.images[:64], targeting, epochs=2, lr=0.01)
    np.testing.assert_array_equal(frozen.flat_params, before)


def test_generator_at_the_optimum_does_not_drift(KEY):
    ds, _, gen, targeting = _stage_one_setup(KEY)
    # a classifier that always predicts the target with probability one
    head = make_classifier(KEY, (LayerSpec(kind="flatten"),), (16,), 10)
    head = head.replace(params={"head": {
        "kernel": jnp.zeros((16, 10)),
        "bias": jnp.zeros(10).at[7].set(1e3),
    }})
    out = trigger.train_generator(KEY, gen, head, ds.images[:64], targeting, epochs=3, lr=0.01)
    assert float(jnp.abs(out.flat_params - gen.flat_params).max()) < 1e-8


def test_stage_one_learns_to_hit_the_target(KEY):
    ds, frozen, gen, targeting = _stage_one_setup(KEY)
    bd = ds.images
    trained = trigger.train_generator(KEY, gen, frozen, bd, targeting, epochs=20, lr=0.01, batch_size=16)
    preds = substrate.predict(frozen, trigger.apply(trained, bd))
    assert float((preds == 7).mean()) >= 0.8


def test_trained_triggers_are_sample_specific(KEY):
    ds, frozen, gen, targeting = _stage_one_setup(KEY)
    trained = trigger.train_generator(KEY, gen, frozen, ds.images[:200], targeting, epochs=5, lr=0.01, batch_size=32)
    noise = np.asarray(trigger.generate(trained, ds.images[:100]))
    differs = [not np.allclose(noise[i], noise[i + 50]) for i in range(50)]
    assert np.mean(differs) >= 0.9


def test_larger_budget_reaches_a_lower_loss(KEY):
    losses = []
    for eps in (0.5, 2.):
        ds, frozen, gen, targeting = _stage_one_setup(KEY, epsilon=eps)
        bd = ds.images[:200]
        trained = trigger.train_generator(KEY, gen, frozen, bd, targeting, epochs=10, lr=0.01, batch_size=32)
        losses.append(float(trigger.generator_loss(trained, frozen, bd, 7)))
    assert losses[1] <= losses[0]


def test_stage_one_reports_numeric_failure(KEY):
    ds, frozen, gen, targeting = _stage_one_setup(KEY)
    bad = ds.images[:64].at[0, 0].set(jnp.nan)
    with pytest.raises(NumericFailure) as e:
        trigger.train_generator(KEY, gen, frozen, bad, targeting, epochs=1, lr=0.01)
    assert e.value.stage == "trigger" and e.value.epoch == 0

