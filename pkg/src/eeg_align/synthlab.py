"""Synthetic EEG and feature banks with controllable signal-to-noise ratio.

Generative model (a verification harness, not a brain model)::

    g_c   ~ uniform on the unit sphere                 (one per concept)
    v_ci  = normalize(g_c + spread * u_ci)             (u_ci unit, one per image)
    trial = (M @ v_ci)[:, None] * envelope[None, :] + noise

``M`` is a fixed random channel-mixing matrix and the noise is white Gaussian,
scaled so that mean signal power / noise power equals ``snr``. The "world"
(concept and image vectors) depends on ``seed``; the mixing matrix and noise
depend on ``participant_seed``, so several participants can share one bank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .eeg_core import EpochSet, TrialMeta
from .errors import ConfigError, EstimationError
from .feature_bank import BankItem, FeatureBank, build_id_bank, build_ood_bank, select_images

SNR_CAP = 1e12


@dataclass(frozen=True)
class SynthSpec:
    n_concepts: int = 20
    images_per_concept: int = 5
    repeats: int = 4
    n_channels: int = 16
    n_samples: int = 64
    sampling_rate_hz: float = 250.0
    feat_dim: int = 16
    snr: float = 1.0
    concept_spread: float = 0.3
    seed: int = 0
    participant_seed: int = 0
    test_repeats: int = 0
    ood_images: int = 0
    participant_id: str = "synth"

    def validate(self) -> None:
        counts = (self.n_concepts, self.images_per_concept, self.repeats, self.n_channels,
                  self.n_samples, self.feat_dim)
        if min(counts) < 1:
            raise ConfigError("all counts must be >= 1")
        if not self.snr > 0:
            raise ConfigError(f"snr must be positive, got {self.snr}")
        if not 0.0 <= self.concept_spread <= 1.0:
            raise ConfigError("concept_spread must lie in [0, 1]")
        if self.test_repeats < 0 or self.ood_images < 0:
            raise ConfigError("test_repeats and ood_images must be >= 0")


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def envelope(n_samples: int) -> np.ndarray:
    """Gaussian bump peaking at 40% of the epoch, scaled to unit mean power."""
    t = np.arange(n_samples) / max(n_samples - 1, 1)
    env = np.exp(-0.5 * ((t - 0.4) / 0.15) ** 2)
    return env / math.sqrt(np.mean(env**2))


def concept_ids(n: int) -> list[str]:
    return [f"c{i:04d}" for i in range(n)]


def gen_synthetic(spec: SynthSpec) -> tuple[EpochSet, FeatureBank]:
    """Generate one participant's epochs and the per-image feature bank.

    Train-split trials cover ``images_per_concept`` images (``img00``...) with
    ``repeats`` repeats each. If ``test_repeats > 0`` every concept gets one
    extra shown image ``test`` with that many test-split repeats; ``ood_images``
    adds unseen images ``ood00``... that appear only in the bank.
    """
    spec.validate()
    world = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    person = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, spec.participant_seed]))

    concepts = concept_ids(spec.n_concepts)
    train_imgs = [f"img{j:02d}" for j in range(spec.images_per_concept)]
    extra_imgs = (["test"] if spec.test_repeats else []) + [f"ood{j:02d}" for j in range(spec.ood_images)]
    all_imgs = train_imgs + extra_imgs

    g = _unit(world.standard_normal((spec.n_concepts, spec.feat_dim)))
    jitter = _unit(world.standard_normal((spec.n_concepts, len(all_imgs), spec.feat_dim)))
    v = _unit(g[:, None, :] + spec.concept_spread * jitter)

    mixing = person.standard_normal((spec.n_channels, spec.feat_dim)) / math.sqrt(spec.feat_dim)
    env = envelope(spec.n_samples)
    topographies = v @ mixing.T  # [concept, image, channel]

    shown = [(ci, j, img, spec.repeats, "train") for ci in range(spec.n_concepts)
             for j, img in enumerate(train_imgs)]
    if spec.test_repeats:
        j_test = len(train_imgs)
        shown += [(ci, j_test, "test", spec.test_repeats, "test") for ci in range(spec.n_concepts)]

    n_trials = sum(s[3] for s in shown)
    clean = np.empty((n_trials, spec.n_channels, spec.n_samples))
    meta = []
    row = 0
    for ci, j, img, reps, split in shown:
        pattern = topographies[ci, j][:, None] * env[None, :]
        for r in range(reps):
            clean[row] = pattern
            meta.append(TrialMeta(concepts[ci], img, r, split))
            row += 1

    train_rows = [i for i, m in enumerate(meta) if m.split == "train"]
    signal_power = float(np.mean(clean[train_rows] ** 2))
    noise_sd = 0.0 if math.isinf(spec.snr) else math.sqrt(signal_power / spec.snr)
    trials = clean + noise_sd * person.standard_normal(clean.shape)

    epochs = EpochSet(
        participant_id=spec.participant_id,
        sampling_rate_hz=spec.sampling_rate_hz,
        time_origin_ms=0.0,
        channel_names=[f"ch{c:02d}" for c in range(spec.n_channels)],
        trials=trials,
        meta=meta,
    )
    items = [BankItem(c, img) for c in concepts for img in all_imgs]
    bank = FeatureBank(
        items=items,
        vectors=v.reshape(-1, spec.feat_dim).astype(np.float32),
        modality="visual",
        source=f"synthetic seed={spec.seed}",
        normalized=True,
    )
    return epochs, bank


def split_banks(per_image: FeatureBank) -> tuple[FeatureBank, FeatureBank, FeatureBank]:
    """Train (``img*`` rows), ID (``test`` rows) and OOD (``ood*`` averaged) banks."""
    train = select_images(per_image, lambda it: it.image_id is not None and it.image_id.startswith("img"))
    id_bank = build_id_bank(select_images(per_image, lambda it: it.image_id == "test"))
    ood_bank = build_ood_bank(
        select_images(per_image, lambda it: it.image_id is not None and it.image_id.startswith("ood"))
    )
    return train, id_bank, ood_bank


def snr_estimate(epochs: EpochSet, return_flag: bool = False):
    """Pooled across-repeat SNR of an epoch set.

    For every (concept, image) pair with ``r >= 2`` repeats, the noise power is
    the unbiased across-repeat variance and the signal power is the power of the
    repeat mean minus ``noise / r``. Signal and noise are pooled over pairs.
    Noise-free data returns ``SNR_CAP``; with ``return_flag`` the result is
    ``(value, capped)``.
    """
    groups: dict[tuple[str, str], list[int]] = {}
    for i, m in enumerate(epochs.meta):
        groups.setdefault((m.concept_id, m.image_id), []).append(i)
    sig_sum = noise_sum = weight = 0.0
    n_pairs = 0
    for idx in groups.values():
        r = len(idx)
        if r < 2:
            continue
        x = epochs.trials[idx].astype(np.float64)
        mean = x.mean(axis=0)
        noise = float(np.sum((x - mean) ** 2) / ((r - 1) * mean.size))
        noise_sum += noise * (r - 1)
        sig_sum += (float(np.mean(mean**2)) - noise / r) * (r - 1)
        weight += r - 1
        n_pairs += 1
    if n_pairs == 0:
        raise EstimationError("SNR estimation needs at least one stimulus with >= 2 repeats")
    noise = noise_sum / weight
    signal = max(sig_sum / weight, 0.0)
    capped = noise <= 1e-12 * max(signal, 1e-300) or noise == 0.0
    value = SNR_CAP if capped else min(signal / noise, SNR_CAP)
    return (value, capped) if return_flag else value
