import math

import numpy as np
import pytest

from eeg_align.errors import ConfigError, EstimationError
from eeg_align.synthlab import SNR_CAP, SynthSpec, envelope, gen_synthetic, snr_estimate, split_banks


def test_trial_count():
    epochs, bank = gen_synthetic(SynthSpec(n_concepts=20, images_per_concept=5, repeats=4))
    assert epochs.n_trials == 400
    assert len(bank) == 100 and bank.normalized


def test_noise_free_repeats_identical():
    epochs, _ = gen_synthetic(SynthSpec(snr=math.inf, n_concepts=3))
    groups = {}
    for x, m in zip(epochs.trials, epochs.meta):
        groups.setdefault((m.concept_id, m.image_id), []).append(x)
    for trials in groups.values():
        assert all(np.array_equal(trials[0], t) for t in trials[1:])
    value, capped = snr_estimate(epochs, return_flag=True)
    assert capped and value == SNR_CAP


def test_deterministic_in_seed():
    a = gen_synthetic(SynthSpec(seed=3))
    b = gen_synthetic(SynthSpec(seed=3))
    c = gen_synthetic(SynthSpec(seed=4))
    assert np.array_equal(a[0].trials, b[0].trials) and np.array_equal(a[1].vectors, b[1].vectors)
    assert not np.array_equal(a[1].vectors, c[1].vectors)


def test_participants_share_world_but_not_noise():
    a, bank_a = gen_synthetic(SynthSpec(participant_seed=0))
    b, bank_b = gen_synthetic(SynthSpec(participant_seed=1))
    assert np.array_equal(bank_a.vectors, bank_b.vectors)
    assert not np.array_equal(a.trials, b.trials)


@pytest.mark.parametrize("snr", [0.2, 1.0, 5.0])
def test_empirical_snr_matches_spec(snr):
    spec = SynthSpec(n_concepts=50, images_per_concept=5, repeats=4, snr=snr, seed=1)
    epochs, _ = gen_synthetic(spec)
    assert epochs.n_trials == 1000
    assert snr_estimate(epochs) == pytest.approx(snr, rel=0.2)


def test_image_vectors_follow_concept_spread():
    spec = SynthSpec(n_concepts=10, images_per_concept=8, concept_spread=0.0)
    _, bank = gen_synthetic(spec)
    v = bank.vectors.reshape(10, 8, -1)
    assert np.allclose(v, v[:, :1, :], atol=1e-6)  # zero spread: all images equal the concept vector


def test_split_banks():
    spec = SynthSpec(n_concepts=6, images_per_concept=3, test_repeats=5, ood_images=4)
    epochs, bank = gen_synthetic(spec)
    train, id_bank, ood_bank = split_banks(bank)
    assert len(train) == 18 and len(id_bank) == 6 and len(ood_bank) == 6
    test = epochs.split("test")
    assert test.n_trials == 30 and {m.image_id for m in test.meta} == {"test"}
    assert all(it.image_id is None for it in ood_bank.items)


def test_envelope_unit_power():
    env = envelope(64)
    assert np.mean(env**2) == pytest.approx(1.0)
    assert np.argmax(env) == round(0.4 * 63)


def test_spec_validation_and_estimation_errors():
    with pytest.raises(ConfigError):
        gen_synthetic(SynthSpec(snr=0))
    with pytest.raises(ConfigError):
        gen_synthetic(SynthSpec(n_concepts=0))
    epochs, _ = gen_synthetic(SynthSpec(repeats=1))
    with pytest.raises(EstimationError):
        snr_estimate(epochs)


def pure_noise_epochs(n_pairs=250, repeats=4, seed=0):
    from eeg_align.eeg_core import EpochSet, TrialMeta
    rng = np.random.default_rng(seed)
    meta = [TrialMeta(f"c{i // 5}", f"img{i % 5}", r) for i in range(n_pairs) for r in range(repeats)]
    return EpochSet("noise", 250, 0, [f"ch{j}" for j in range(8)], rng.standard_normal((len(meta), 8, 32)), meta)


def test_pure_noise_snr_near_zero():
    epochs = pure_noise_epochs()
    assert epochs.n_trials == 1000
    assert snr_estimate(epochs) < 0.05


def test_snr_estimate_scale_invariant():
    epochs, _ = gen_synthetic(SynthSpec(snr=0.7, seed=2))
    scaled = epochs.with_trials(epochs.trials * 37.0)
    assert snr_estimate(scaled) == pytest.approx(snr_estimate(epochs), rel=1e-6)


def test_averaging_seven_noise_repeats_shrinks_residual():
    from eeg_align.sampling import mean_of_trials
    epochs = pure_noise_epochs(n_pairs=500, repeats=7, seed=1)
    pooled = np.stack([mean_of_trials(epochs.trials, range(7 * i, 7 * i + 7)) for i in range(500)])
    assert pooled.var() / epochs.trials.var() == pytest.approx(1 / 7, rel=0.05)


def test_ides_inputs_have_lower_within_concept_variance():
    from eeg_align.sampling import ides_draw, build_concept_space
    ratios = []
    for seed in range(10):
        epochs, _ = gen_synthetic(SynthSpec(n_concepts=5, images_per_concept=10, repeats=4, snr=0.2,
                                            participant_seed=seed))
        space = build_concept_space(epochs)
        rng = np.random.default_rng(seed)
        for c in space.concepts:
            singles = epochs.trials[space.slots[c]].astype(np.float64)
            drawn = np.stack([ides_draw(space, c, 7, rng) for _ in range(200)]).astype(np.float64)
            ratios.append(drawn.var(axis=0).mean() / singles.var(axis=0).mean())
    assert max(ratios) < 1.0
    assert np.mean(ratios) < 0.25
