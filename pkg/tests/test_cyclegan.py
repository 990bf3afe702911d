import math

import numpy as np
import pytest
import torch

from latentsynth.corpora import smoke_domains
from latentsynth.cyclegan import (
    DISCRIMINATOR, GENERATOR, LOSS_COLUMNS, DiscriminatorSpec, GeneratorSpec, GlobalDiscriminator, PatchDiscriminator,
    ResnetGenerator, StyleModel, TrainConfig, TrainingError, adversarial_losses, combine_adversarial,
    cycle_consistency_loss, read_loss_log, total_generator_loss, train_stage, translate, untrained_model,
)
from latentsynth.fpcore import DomainSet, FingerprintImage, LATENT

TINY = dict(train_size=32, batch_size=2, augment=False,
            generator=GeneratorSpec(residual_blocks=1, ngf=4), discriminator=DiscriminatorSpec(ndf=4))


@pytest.fixture(scope="module")
def toy_domains():
    rolled, latent, _ = smoke_domains(8, seed=5, size=32)
    return rolled, latent


# -- loss oracles -------------------------------------------------------------


def test_cycle_loss_identity():
    x = np.random.default_rng(0).random((2, 1, 4, 4))
    assert cycle_consistency_loss(x, x) == 0.0


def test_cycle_loss_constant_difference():
    assert cycle_consistency_loss(np.zeros((3, 3)), np.ones((3, 3))) == pytest.approx(1.0, abs=1e-12)


def test_cycle_loss_hand_example():
    a = np.array([[0.0, 0.0], [0.0, 0.0]])
    b = np.array([[0.0, 0.5], [0.0, 0.5]])
    assert cycle_consistency_loss(a, b) == pytest.approx(0.25, abs=1e-12)


def test_cycle_loss_torch_matches_numpy():
    rng = np.random.default_rng(1)
    a, b = rng.random((2, 1, 5, 5)), rng.random((2, 1, 5, 5))
    t = cycle_consistency_loss(torch.from_numpy(a), torch.from_numpy(b))
    assert float(t) == pytest.approx(cycle_consistency_loss(a, b), abs=1e-12)


def test_cycle_loss_shape_mismatch():
    with pytest.raises(ValueError):
        cycle_consistency_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_adversarial_perfect_discriminator():
    assert adversarial_losses(np.ones(4), np.zeros(4), DISCRIMINATOR) == 0.0


def test_adversarial_fooled_generator():
    assert adversarial_losses(None, np.ones(4), GENERATOR) == 0.0


def test_adversarial_half_scores():
    assert adversarial_losses(None, np.full(4, 0.5), GENERATOR) == pytest.approx(0.25, abs=1e-12)


def test_adversarial_bad_side():
    with pytest.raises(ValueError):
        adversarial_losses(np.ones(2), np.ones(2), "critic")


def test_combine_adversarial_mean():
    assert combine_adversarial(0.2, 0.6) == pytest.approx(0.4, abs=1e-12)


@pytest.mark.parametrize("terms, expected", [
    ((0.0, 0.0, 0.0, 0.0), 0.0),
    ((0.0, 0.0, 0.1, 0.1), 2.0),
    ((0.25, 0.25, 0.05, 0.15), 2.5),
])
def test_total_generator_loss(terms, expected):
    assert total_generator_loss(*terms, lam=10.0) == pytest.approx(expected, abs=1e-9)


# -- networks ---------------------------------------------------------------------


def test_generator_shape_and_range():
    g = ResnetGenerator(GeneratorSpec(residual_blocks=2, ngf=4))
    with torch.no_grad():
        y = g(torch.rand(2, 1, 32, 32) * 2 - 1)
    assert y.shape == (2, 1, 32, 32) and float(y.abs().max()) <= 1.0


def test_discriminator_outputs():
    x = torch.rand(3, 1, 64, 64)
    assert GlobalDiscriminator(DiscriminatorSpec(ndf=4))(x).shape == (3,)
    patch = PatchDiscriminator(DiscriminatorSpec(ndf=4))(x)
    assert patch.dim() == 4 and patch.shape[0] == 3 and patch.shape[2] > 1 and patch.shape[3] > 1


def test_generator_default_depth():
    assert GeneratorSpec().residual_blocks == 6 and GeneratorSpec().alpha == 0.2


def test_identity_init_generator_is_near_identity():
    cfg = TrainConfig(**{**TINY, "generator": GeneratorSpec(residual_blocks=1, ngf=4, identity_init=True)})
    model = untrained_model(cfg)
    px = np.random.default_rng(3).integers(0, 256, (32, 32), dtype=np.uint8)
    out = translate(model, FingerprintImage(px, "x"))
    assert np.abs(out.pixels.astype(int) - px.astype(int)).max() <= 1


def test_translate_deterministic():
    model = untrained_model(TrainConfig(**TINY))
    im = FingerprintImage(np.random.default_rng(4).integers(0, 256, (32, 32), dtype=np.uint8), "x")
    assert np.array_equal(translate(model, im).pixels, translate(model, im).pixels)


def test_generator_rejects_bad_size():
    with pytest.raises(ValueError):
        ResnetGenerator(GeneratorSpec(residual_blocks=1, ngf=4))(torch.zeros(1, 1, 30, 30))


# -- training -----------------------------------------------------------------


def test_train_stage_contract(tmp_path, toy_domains):
    rolled, latent = toy_domains
    cfg = TrainConfig(**TINY, max_epochs=2, seed=1)
    model = train_stage(rolled, latent, cfg, out_dir=tmp_path / "m")
    assert (tmp_path / "m" / "weights.pt").exists()
    log = read_loss_log(tmp_path / "m" / "loss-log.csv")
    assert len(log) == 2
    assert all(math.isfinite(row[c]) for row in log for c in LOSS_COLUMNS[1:])
    header = (tmp_path / "m" / "loss-log.csv").read_text().splitlines()[0]
    assert header == ",".join(LOSS_COLUMNS)
    back = StyleModel.load(tmp_path / "m")
    assert back.model_id == model.model_id and back.best_epoch == model.best_epoch


def test_train_stage_early_stop_on_flat_loss(toy_domains):
    rolled, latent = toy_domains
    cfg = TrainConfig(**TINY, max_epochs=6, early_stop_patience=1, seed=1)
    model = train_stage(rolled, latent, cfg, monitor_fn=lambda row: 1.0)
    assert len(model.loss_log) == 2 and model.best_epoch == 1


def test_train_stage_same_seed_same_log(toy_domains):
    rolled, latent = toy_domains
    cfg = TrainConfig(**TINY, max_epochs=1, seed=3)
    a = train_stage(rolled, latent, cfg).loss_log
    b = train_stage(rolled, latent, cfg).loss_log
    assert a == b


def test_train_stage_empty_domain(toy_domains):
    rolled, _ = toy_domains
    with pytest.raises(TrainingError):
        train_stage(rolled, DomainSet("empty", (), LATENT), TrainConfig(**TINY, max_epochs=1))


def test_train_stage_nonfinite_loss(tmp_path, toy_domains, monkeypatch):
    rolled, latent = toy_domains
    from latentsynth.cyclegan import training

    real = training.cycle_consistency_loss
    monkeypatch.setattr(training, "cycle_consistency_loss", lambda a, b: real(a, b) * float("nan"))
    with pytest.raises(TrainingError, match="non-finite"):
        train_stage(rolled, latent, TrainConfig(**TINY, max_epochs=1), out_dir=tmp_path / "m")
    assert (tmp_path / "m" / "diagnostic" / "weights.pt").exists()


def test_trained_model_changes_input(toy_domains):
    rolled, latent = toy_domains
    model = train_stage(rolled, latent, TrainConfig(**TINY, max_epochs=2, seed=2))
    src = rolled.images[0]
    out = translate(model, src)
    assert np.abs(out.pixels.astype(float) - np.asarray(src.pixels, float)).mean() > 0


def test_fine_tune_architecture_mismatch(toy_domains):
    rolled, latent = toy_domains
    base = untrained_model(TrainConfig(**TINY))
    other = TrainConfig(**{**TINY, "generator": GeneratorSpec(residual_blocks=2, ngf=4)}, max_epochs=1)
    with pytest.raises(TrainingError, match="architecture"):
        train_stage(rolled, latent, other, init=base)


def test_config_roundtrip():
    cfg = TrainConfig(**TINY, max_epochs=3)
    assert TrainConfig.from_dict(cfg.as_dict()) == cfg
    assert cfg.with_overrides(max_epochs=5).max_epochs == 5


def test_reference_defaults():
    cfg = TrainConfig()
    assert (cfg.lr_generator, cfg.lr_discriminator, cfg.beta1, cfg.beta2) == (3e-4, 1e-4, 0.5, 0.999)
    assert (cfg.early_stop_patience, cfg.cycle_weight, cfg.max_translate_px, cfg.max_rotate_deg) == (50, 10.0, 100.0, 15.0)
