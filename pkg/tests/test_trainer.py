import csv
import json
import math

import numpy as np
import pytest
import torch

from eeg_align.encoder import EncoderConfig, encoder_forward, encoder_init
from eeg_align.errors import ConfigError, CoverageError, RangeError, ValidationError
from eeg_align.feature_bank import select_images
from eeg_align.sampling import SamplerConfig, build_concept_space
from eeg_align.synthlab import SynthSpec, gen_synthetic, split_banks
from eeg_align.trainer import TrainConfig, contrastive_loss, train, validate

SMALL_ENC = EncoderConfig(n_channels=16, n_samples=64, embed_dim=32, n_filters=16, temporal_kernel=9,
                          pool_kernel=9, pool_stride=4, dropout=0.0)


def unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_unit(b, d, seed):
    return torch.from_numpy(unit(np.random.default_rng(seed).standard_normal((b, d))))


def reference_loss(a, b, tau):
    # independent numpy evaluation of the symmetric cross-entropy
    logits = a @ b.T / tau
    def ce(l):
        m = l.max(axis=1, keepdims=True)
        lse = (m + np.log(np.exp(l - m).sum(axis=1, keepdims=True))).ravel()
        return np.mean(lse - np.diag(l))
    return 0.5 * (ce(logits) + ce(logits.T))


# --- loss ---------------------------------------------------------------------------


def test_loss_random_vectors_is_log_batch():
    losses = [contrastive_loss(random_unit(200, 512, s), random_unit(200, 512, s + 100), 1.0)[0].item()
              for s in range(5)]
    assert np.mean(losses) == pytest.approx(math.log(200), abs=0.1)


def test_loss_perfect_alignment():
    eye = torch.eye(8, dtype=torch.float64)
    assert contrastive_loss(eye, eye, 0.01)[0].item() < 1e-6


def test_loss_two_by_two_hand_value():
    eye = torch.eye(2, dtype=torch.float64)
    loss, logits = contrastive_loss(eye, eye, 1.0)
    assert loss.item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss.item() == pytest.approx(0.3133, abs=1e-4)
    assert torch.equal(logits, eye)


def test_loss_matches_numpy_reference():
    a, b = random_unit(10, 7, 1), random_unit(10, 7, 2)
    assert contrastive_loss(a, b, 0.3)[0].item() == pytest.approx(reference_loss(a.numpy(), b.numpy(), 0.3), abs=1e-12)


def test_loss_symmetry_and_permutation_invariance():
    a, b = random_unit(16, 12, 3), random_unit(16, 12, 4)
    loss = contrastive_loss(a, b, 0.2)[0].item()
    assert contrastive_loss(b, a, 0.2)[0].item() == pytest.approx(loss, abs=1e-12)
    perm = torch.from_numpy(np.random.default_rng(0).permutation(16))
    assert contrastive_loss(a[perm], b[perm], 0.2)[0].item() == pytest.approx(loss, abs=1e-12)


def test_loss_gradient_matches_finite_differences():
    a = random_unit(4, 6, 5).requires_grad_(True)
    b = random_unit(4, 6, 6)
    contrastive_loss(a, b, 0.5)[0].backward()
    h = 1e-6
    worst = 0.0
    for i in range(4):
        for j in range(6):
            plus, minus = a.detach().clone(), a.detach().clone()
            plus[i, j] += h
            minus[i, j] -= h
            fd = (reference_loss(plus.numpy(), b.numpy(), 0.5) - reference_loss(minus.numpy(), b.numpy(), 0.5)) / (2 * h)
            g = a.grad[i, j].item()
            worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-8))
    assert worst < 1e-3


def test_loss_errors():
    a = random_unit(4, 3, 0)
    with pytest.raises(ValidationError):
        contrastive_loss(a * 1.01, a, 1.0)
    with pytest.raises(RangeError):
        contrastive_loss(a, a, 0.0)
    with pytest.raises(ValidationError):
        contrastive_loss(a[:1], a[:1], 1.0)


@pytest.mark.parametrize("batch", [32, 200])
def test_initial_loss_near_log_batch(batch):
    model = encoder_init(EncoderConfig()).train()
    gen = torch.Generator().manual_seed(batch)
    x = torch.randn(batch, 63, 250, generator=gen)
    with torch.no_grad():
        emb = encoder_forward(model, x)
        loss, _ = contrastive_loss(emb, random_unit(batch, 1024, batch).float(), model.temperature)
    assert abs(loss.item() - math.log(batch)) < 0.3


# --- training loop ----------------------------------------------------------------------


def smoke_data(**kw):
    spec = SynthSpec(n_concepts=20, images_per_concept=5, repeats=4, n_channels=16, n_samples=64,
                     feat_dim=32, snr=0.5, test_repeats=20, ood_images=3, **kw)
    epochs, bank = gen_synthetic(spec)
    return epochs, split_banks(bank), bank


def smoke_config(**kw):
    base = dict(epochs=10, lr=2e-4, batch_size=20, sampler=SamplerConfig(k=7, seed=0), seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_train_is_deterministic():
    epochs, (train_bank, _, _), _ = smoke_data()
    cfg = smoke_config(epochs=3)
    _, h1 = train(cfg, epochs, train_bank, SMALL_ENC)
    _, h2 = train(cfg, epochs, train_bank, SMALL_ENC)
    assert h1.train_loss == h2.train_loss
    assert [r.val_top1 for r in h1.records] == [r.val_top1 for r in h2.records]


def test_train_loss_decreases_and_validation_beats_chance():
    epochs, (train_bank, _, _), per_image = smoke_data()
    model, hist = train(smoke_config(), epochs, train_bank, SMALL_ENC, val_bank=per_image)
    losses = hist.train_loss
    assert len(hist.records) == 10
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < math.log(20)
    assert hist.records[-1].val_top1 > 0.25


def test_temperature_never_below_minimum():
    epochs, (train_bank, _, _), _ = smoke_data()
    cfg = smoke_config(epochs=4, lr=5e-2, temperature_min=0.06)
    model, hist = train(cfg, epochs, train_bank, SMALL_ENC)
    assert all(r.temperature >= 0.06 * (1 - 1e-6) for r in hist.records)
    assert model.temperature.item() >= 0.06 * (1 - 1e-6)


def test_fixed_temperature():
    epochs, (train_bank, _, _), _ = smoke_data()
    _, hist = train(smoke_config(epochs=2, temperature_learnable=False), epochs, train_bank, SMALL_ENC)
    assert all(r.temperature == pytest.approx(0.07) for r in hist.records)


def test_coverage_error_before_training():
    epochs, (train_bank, _, _), _ = smoke_data()
    partial = select_images(train_bank, lambda it: it.image_id != "img01")
    with pytest.raises(CoverageError):
        train(smoke_config(), epochs, partial, SMALL_ENC)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(regime="cross")
    epochs, (train_bank, _, _), _ = smoke_data()
    with pytest.raises(ConfigError):
        train(smoke_config(regime="interparticipant"), [epochs], train_bank, SMALL_ENC)
    with pytest.raises(ConfigError):
        train(smoke_config(feature_mode="multimodal"), epochs, train_bank, SMALL_ENC)


def test_interparticipant_pools_sets():
    e1, (train_bank, _, _), _ = smoke_data(participant_seed=1, participant_id="p1")
    e2, _, _ = smoke_data(participant_seed=2, participant_id="p2")
    _, hist = train(smoke_config(epochs=1, regime="interparticipant"), [e1, e2], train_bank, SMALL_ENC)
    assert len(hist.records) == 1


def test_run_directory_contents(tmp_path):
    epochs, (train_bank, _, _), _ = smoke_data()
    cfg = smoke_config(epochs=2)
    train(cfg, epochs, train_bank, SMALL_ENC, run_dir=tmp_path / "run", audit_draws=True)
    run = tmp_path / "run"
    assert json.loads((run / "config.json").read_text())["train"]["epochs"] == 2
    rows = list(csv.DictReader(open(run / "history.csv")))
    assert len(rows) == 2 and "val_top1" in rows[0]
    draws = [json.loads(line) for line in (run / "draws.jsonl").read_text().splitlines()]
    space = build_concept_space(epochs)
    assert len(draws) == 2 * len(space.units)
    assert all(len(d["trial_indices"]) == 7 for d in draws)
    assert (run / "checkpoint" / "params.f32le").exists()


# --- validation ---------------------------------------------------------------------------


def test_untrained_validation_is_at_chance():
    spec = SynthSpec(n_concepts=250, images_per_concept=2, repeats=2, n_channels=8, n_samples=32, feat_dim=16)
    epochs, bank = gen_synthetic(spec)
    space = build_concept_space(epochs)
    tiny = EncoderConfig(n_channels=8, n_samples=32, embed_dim=16, n_filters=4, temporal_kernel=5,
                         pool_kernel=5, pool_stride=2)
    tops = []
    for seed in range(40):
        model = encoder_init(EncoderConfig(**{**tiny.__dict__, "init_seed": seed}))
        _, top1, _ = validate(model, space, bank, n_candidates=200, seed=seed)
        tops.append(top1)
    se = math.sqrt(0.005 * 0.995 / (200 * len(tops)))
    assert abs(np.mean(tops) - 0.005) < 3 * se
    model = encoder_init(tiny)
    assert validate(model, space, bank) == validate(model, space, bank)
