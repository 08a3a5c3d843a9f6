import math

import numpy as np
import pytest

from crowdgan import autodiff as ad
from crowdgan.autodiff import Tape, Tensor
from crowdgan.encoder import ModelConfig, prepare_windows
from crowdgan.errors import ContractViolation, TrainingDivergence
from crowdgan.gan import (
    GanModel,
    NoiseSource,
    TrainConfig,
    Trainer,
    bce_from_probabilities,
    discriminate,
    discriminator_loss,
    forward_generator,
    gan_losses,
    generate,
    load_model,
    sparsity_term,
    train,
)
from crowdgan.metrics import ade_fde_batch, constant_position
from crowdgan.nn import grad_check

from helpers import full_objective, random_windows, randomize

CFG = ModelConfig(t_obs=4, t_pred=7, hidden_size=5, z_dim=3)


@pytest.fixture
def windows(rng):
    return random_windows(rng, 10, CFG.t_obs, CFG.t_pred)


def z_for(n, cfg=CFG, seed=0):
    return np.random.default_rng(seed).standard_normal((n, cfg.t_pred, cfg.z_dim))


def test_zero_generator_repeats_last_position(windows):
    model = GanModel.create(CFG)
    model.generator.zero_()
    model.encoder.zero_()
    preds, hidden = generate(windows, model, NoiseSource(0, CFG.z_dim))
    for w, p in zip(windows, preds):
        assert p.positions.shape == (CFG.t_future, 2)
        np.testing.assert_array_equal(p.positions, np.tile(w.observed[-1], (CFG.t_future, 1)))
    assert hidden.shape == (len(windows), CFG.t_pred, CFG.hidden_size)


def test_fresh_model_predicts_zero_displacement(windows):
    # the output head starts at zero, so untrained forecasts equal the constant-position baseline
    model = GanModel.create(CFG, seed=3)
    preds, _ = generate(windows, model, NoiseSource(0, CFG.z_dim))
    got = np.stack([p.positions for p in preds])
    np.testing.assert_array_equal(got, constant_position(np.stack([w.observed for w in windows]), CFG.t_future))


def test_generation_is_seeded(windows, rng):
    model = randomize(GanModel.create(CFG, seed=1), rng)
    a, _ = generate(windows, model, NoiseSource(7, CFG.z_dim))
    b, _ = generate(windows, model, NoiseSource(7, CFG.z_dim))
    c, _ = generate(windows, model, NoiseSource(8, CFG.z_dim))
    for pa, pb in zip(a, b):
        np.testing.assert_array_equal(pa.positions, pb.positions)
    assert any(not np.array_equal(pa.positions, pc.positions) for pa, pc in zip(a, c))


def test_single_window_generation(windows, rng):
    model = randomize(GanModel.create(CFG, seed=1), rng)
    pred, hidden = generate(windows[0], model, NoiseSource(0, CFG.z_dim))
    assert pred.ped_id == windows[0].ped_id
    assert hidden.shape == (CFG.t_pred, CFG.hidden_size)


def test_noise_shape_is_checked(windows):
    model = GanModel.create(CFG)
    batch = prepare_windows(windows, CFG)
    with pytest.raises(ContractViolation):
        forward_generator(model, batch, np.zeros((len(batch), CFG.t_future, CFG.z_dim)))


def test_zero_discriminator_gives_one_half(windows):
    model = GanModel.create(CFG, seed=2)
    model.discriminator.zero_()
    batch = prepare_windows(windows, CFG)
    ctx = model.encoder.context(batch).value
    p = discriminate(ctx, batch.future, model.discriminator, observed=batch.observed)
    assert np.all(p == 0.5)


def test_discriminate_deterministic_and_checked(windows, rng):
    model = randomize(GanModel.create(CFG, seed=2), rng)
    batch = prepare_windows(windows, CFG)
    ctx = model.encoder.context(batch).value
    a = discriminate(ctx, batch.future, model.discriminator, observed=batch.observed)
    b = discriminate(ctx, batch.future, model.discriminator, observed=batch.observed)
    np.testing.assert_array_equal(a, b)
    assert np.all((a > 0) & (a < 1))
    with pytest.raises(ContractViolation):
        discriminate(ctx, batch.future[:, :-1], model.discriminator, observed=batch.observed)
    with pytest.raises(ContractViolation):
        discriminate(ctx[:3], batch.future, model.discriminator, observed=batch.observed)


def test_initial_discriminator_loss_is_ln2(windows):
    model = GanModel.create(CFG, seed=4)
    out = gan_losses(prepare_windows(windows, CFG), model, 0.2, "gd-gan", z_for(len(windows)))
    assert abs(float(out.loss_d.value) - math.log(2)) <= 1e-6


def test_bce_examples():
    assert bce_from_probabilities([0.5], [0.5]) == pytest.approx(math.log(2), abs=1e-12)
    assert bce_from_probabilities([0.9], [0.2]) == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-12)
    assert bce_from_probabilities([0.9], [0.2]) == pytest.approx(0.1643, abs=5e-5)
    logit = lambda p: math.log(p / (1 - p))  # noqa: E731
    loss = discriminator_loss(Tensor([logit(0.9)]), Tensor([logit(0.2)]))
    assert float(loss.value) == pytest.approx(bce_from_probabilities([0.9], [0.2]), abs=1e-12)


def test_sparsity_term():
    assert float(sparsity_term(np.zeros((2, 3, 4))).value) == 0.0
    assert float(sparsity_term(np.array([[-1.0, 3.0]])).value) == 2.0


def test_no_gan_without_lambda_is_plain_mse(windows, rng):
    model = randomize(GanModel.create(CFG, seed=5, with_discriminator=False), rng)
    batch = prepare_windows(windows, CFG)
    z = z_for(len(batch))
    out = gan_losses(batch, model, 0.0, "no-gan", z)
    assert out.loss_d is None
    preds, _ = generate(windows, model, type("Fixed", (), {"sample": lambda self, n, s: z})())
    pos = np.stack([p.positions for p in preds])
    expected = np.mean(np.sum((pos - batch.future) ** 2, axis=-1))
    assert float(out.loss_g.value) == pytest.approx(expected, rel=1e-12)


def test_no_l1_ignores_lambda(windows, rng):
    model = randomize(GanModel.create(CFG, seed=5), rng)
    batch = prepare_windows(windows, CFG)
    z = z_for(len(batch))
    a = gan_losses(batch, model, 5.0, "no-l1", z)
    b = gan_losses(batch, model, 0.0, "gd-gan", z)
    assert float(a.loss_g.value) == float(b.loss_g.value)
    assert float(a.sparsity.value) > 0
    assert TrainConfig(mode="no-l1", lam=0.2).effective_lambda == 0.0


def test_unconditional_discriminator_ignores_context(windows, rng):
    model = randomize(GanModel.create(CFG, seed=6), rng)
    model.generator.head.zero_()  # fakes no longer depend on the encoder either
    batch = prepare_windows(windows, CFG)
    z = z_for(len(batch))
    before = float(gan_losses(batch, model, 0.2, "unconditional-gan", z).loss_d.value)
    for t in model.encoder.parameters().values():
        t.value = t.value + rng.normal(0, 0.5, t.shape)
    after = float(gan_losses(batch, model, 0.2, "unconditional-gan", z).loss_d.value)
    assert before == after
    assert float(gan_losses(batch, model, 0.2, "gd-gan", z).loss_d.value) != after


def test_generator_and_discriminator_step_gradients(windows, rng):
    model = randomize(GanModel.create(CFG, seed=7), rng)
    batch = prepare_windows(windows[:4], CFG)
    z = z_for(len(batch))
    gen = {k: v for k, v in model.generator_params().items() if k.startswith("generator.")}
    report = grad_check(lambda: gan_losses(batch, model, 0.2, "gd-gan", z).loss_g, gen, tolerance=1e-4)
    assert report.passed, report
    report = grad_check(lambda: gan_losses(batch, model, 0.2, "gd-gan", z).loss_d, model.discriminator_params(), tolerance=1e-4)
    assert report.passed, report


def test_full_composition_gradient(windows, rng):
    model = randomize(GanModel.create(CFG, seed=8), rng)
    batch = prepare_windows(windows[:4], CFG)
    z = z_for(len(batch))
    report = grad_check(lambda: full_objective(model, batch, z), model.parameters(), tolerance=1e-4)
    assert report.passed, report


def test_encoder_trained_only_through_generator(windows, rng):
    model = randomize(GanModel.create(CFG, seed=9), rng)
    batch = prepare_windows(windows, CFG)
    with Tape() as tape:
        out = gan_losses(batch, model, 0.2, "gd-gan", z_for(len(batch)))
    grads = tape.gradient(out.loss_d, list(model.generator_params().values()))
    assert all(not g.any() for g in grads)


# ---------------------------------------------------------------- training loop


def test_zero_epochs_leave_model_unchanged(windows):
    trainer = Trainer(CFG, TrainConfig(epochs=0, seed=3))
    before = trainer.model.state_dict()
    result = trainer.fit(windows)
    assert result.history == []
    for k, v in result.model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_training_is_deterministic(windows):
    cfg = TrainConfig(epochs=3, seed=11, batch_size=4)
    a = train(windows, cfg, CFG, val=windows[:3])
    b = train(windows, cfg, CFG, val=windows[:3])
    assert a.history == b.history
    for k, v in a.model.state_dict().items():
        np.testing.assert_array_equal(v, b.model.state_dict()[k])


def test_no_gan_builds_no_discriminator(windows):
    result = train(windows, TrainConfig(mode="no-gan", epochs=2, batch_size=4), CFG)
    assert result.model.discriminator is None
    assert all(math.isnan(r.loss_d) for r in result.history)


def test_empty_dataset_rejected():
    with pytest.raises(ContractViolation):
        train([], TrainConfig(), CFG)


def test_divergence_reports_epoch(windows):
    trainer = Trainer(CFG, TrainConfig(epochs=2, batch_size=4))
    trainer.fit(windows, epochs=1)
    trainer.model.generator.proj.w.value[0, 0] = np.nan
    with pytest.raises(TrainingDivergence) as err:
        trainer.fit(windows, epochs=1)
    assert err.value.epoch == 2


def test_resume_continues_history(windows, tmp_path):
    cfg = TrainConfig(epochs=4, seed=5, batch_size=4)
    straight = Trainer(CFG, cfg)
    straight.fit(windows, windows[:3])
    first = Trainer(CFG, cfg)
    first.fit(windows, windows[:3], epochs=2)
    first.save(tmp_path / "half.ckpt")
    resumed = Trainer.load(tmp_path / "half.ckpt")
    resumed.fit(windows, windows[:3], epochs=2)
    assert [r.epoch for r in resumed.history] == [1, 2, 3, 4]
    assert resumed.history == straight.history
    for k, v in straight.model.state_dict().items():
        np.testing.assert_array_equal(v, resumed.model.state_dict()[k])


def test_checkpoint_bytes_are_deterministic(windows, tmp_path):
    for name in ("a", "b"):
        t = Trainer(CFG, TrainConfig(epochs=2, seed=1, batch_size=4))
        t.fit(windows, windows[:2])
        t.save(tmp_path / f"{name}.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    model = load_model(tmp_path / "a.ckpt")
    assert model.cfg == CFG


def test_best_checkpoint_tracks_validation(windows):
    result = train(windows, TrainConfig(mode="no-gan", epochs=5, batch_size=4, seed=2), CFG, val=windows[:4])
    vals = [r.val_ade for r in result.history]
    assert result.best_epoch == int(np.argmin(vals)) + 1


def test_supervised_mode_beats_constant_position_on_linear_walks(rng):
    cfg = ModelConfig(t_obs=5, t_pred=10, hidden_size=8, z_dim=2)
    data = random_windows(rng, 60, 5, 10, max_neighbours=2)
    val = random_windows(rng, 20, 5, 10, max_neighbours=2)
    result = train(data, TrainConfig(mode="no-gan", epochs=40, batch_size=16, seed=0), cfg, val=val)
    batch = prepare_windows(val, cfg)
    preds, _ = generate(batch, result.model, NoiseSource(0, cfg.z_dim))
    ade = ade_fde_batch(np.stack([p.positions for p in preds]), batch.future)[0]
    baseline = ade_fde_batch(constant_position(batch.observed, cfg.t_future), batch.future)[0]
    assert ade < baseline
