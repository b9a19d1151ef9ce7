"""Contrastive alignment of EEG embeddings to pretrained feature banks."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .eeg_core import EpochSet, pool_participants
from .encoder import EEGEncoder, EncoderConfig, embed_numpy, encoder_forward, encoder_init, save_checkpoint
from .errors import ConfigError, CoverageError, NumericalError, RangeError, ValidationError
from .eval_stats import retrieval_ranks
from .feature_bank import FeatureBank
from .sampling import (
    ConceptSpace,
    SamplerConfig,
    audit_records,
    build_concept_space,
    draw_batch,
    make_epoch_schedule,
    mean_of_trials,
    write_jsonl,
)

log = logging.getLogger(__name__)

REGIMES = ("intraparticipant", "interparticipant")
FEATURE_MODES = ("visual", "multimodal")
UNIT_TOL = 1e-3


@dataclass
class TrainConfig:
    epochs: int = 40
    lr: float = 3e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    batch_size: int = 256
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    regime: str = "intraparticipant"
    feature_mode: str = "visual"
    temperature_learnable: bool = True
    temperature_min: float = 0.01
    seed: int = 0
    keep_best_val: bool = False
    val_candidates: int = 200

    def __post_init__(self):
        if isinstance(self.sampler, dict):
            self.sampler = SamplerConfig(**self.sampler)
        self.adam_betas = tuple(self.adam_betas)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not self.temperature_min > 0:
            raise ConfigError("temperature_min must be positive")
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"unknown feature_mode {self.feature_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_top1: float
    val_top5: float
    temperature: float
    wall_seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    initial_loss: float = float("nan")

    @property
    def train_loss(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def to_csv(self, path: str | os.PathLike) -> None:
        names = [f.name for f in EpochRecord.__dataclass_fields__.values()]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(names)
            for r in self.records:
                w.writerow([getattr(r, n) for n in names])


def contrastive_loss(eeg_emb, targets, temperature) -> tuple[torch.Tensor, torch.Tensor]:
    """Symmetric InfoNCE over a batch of matched (EEG, target) rows.

    ``logits[i, j] = <eeg_emb[i], targets[j]> / temperature``; the loss averages
    the row-wise and column-wise cross-entropies with diagonal labels.
    """
    eeg_emb = torch.as_tensor(eeg_emb)
    targets = torch.as_tensor(targets, dtype=eeg_emb.dtype)
    temperature = torch.as_tensor(temperature, dtype=eeg_emb.dtype)
    if eeg_emb.shape != targets.shape or eeg_emb.ndim != 2:
        raise ValidationError(f"embedding shapes differ: {tuple(eeg_emb.shape)} vs {tuple(targets.shape)}")
    if eeg_emb.shape[0] < 2:
        raise ValidationError("contrastive loss needs a batch of at least 2")
    if not bool(temperature > 0):
        raise RangeError(f"temperature must be positive, got {float(temperature)}")
    with torch.no_grad():
        for name, t in (("eeg_emb", eeg_emb), ("targets", targets)):
            if (t.norm(dim=1) - 1).abs().max() > UNIT_TOL:
                raise ValidationError(f"{name} rows must be unit-norm")
    logits = eeg_emb @ targets.T / temperature
    labels = torch.arange(logits.shape[0])
    loss = 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))
    return loss, logits


def _target_matrix(bank: FeatureBank, keys: Sequence[tuple[str, str | None]]) -> np.ndarray:
    return bank.vectors[[bank.row(c, i) for c, i in keys]]


def validate(
    model: EEGEncoder,
    space: ConceptSpace,
    val_bank: FeatureBank,
    n_candidates: int = 200,
    seed: int = 0,
) -> tuple[float, float, float]:
    """Score held-out images against a fixed, seeded subset of concepts.

    Each held-out image's repeats are averaged and embedded; the candidate set
    is the held-out image vector of up to ``n_candidates`` concepts.
    """
    held = space.holdout_images()
    if not held:
        raise ValidationError("concept space has an empty holdout")
    first_per_concept: dict[str, tuple[str, str]] = {}
    for key in held:
        first_per_concept.setdefault(key[0], key)
    concepts = sorted(first_per_concept)
    if len(concepts) > n_candidates:
        rng = np.random.default_rng(seed)
        concepts = sorted(rng.choice(concepts, size=n_candidates, replace=False).tolist())
    keys = [first_per_concept[c] for c in concepts]
    missing = [k for k in keys if not val_bank.has(*k)]
    if missing:
        raise CoverageError(f"validation bank lacks {len(missing)} held-out image(s), e.g. {missing[0]}")
    x = np.stack([mean_of_trials(space.epochs.trials, held[k]) for k in keys])
    emb = embed_numpy(model, x)
    targets = _target_matrix(val_bank, keys).astype(np.float64)
    ranks = retrieval_ranks(emb @ targets.T, np.arange(len(keys)))
    if len(keys) >= 2:
        with torch.no_grad():
            loss, _ = contrastive_loss(torch.from_numpy(emb), torch.from_numpy(targets),
                                       model.temperature.item())
        val_loss = float(loss)
    else:
        val_loss = float("nan")
    return val_loss, float(np.mean(ranks <= 1)), float(np.mean(ranks <= 5))


def _check_bank(bank: FeatureBank, feature_mode: str) -> None:
    expected = "visual" if feature_mode == "visual" else "multimodal"
    if bank.modality != expected:
        raise ConfigError(f"feature_mode {feature_mode!r} needs a {expected} bank, got {bank.modality}")
    bank.require_normalized()


def prepare_epochs(config: TrainConfig, epochs_data: EpochSet | Sequence[EpochSet]) -> EpochSet:
    sets = [epochs_data] if isinstance(epochs_data, EpochSet) else list(epochs_data)
    if config.regime == "intraparticipant":
        if len(sets) != 1:
            raise ConfigError(f"intraparticipant training takes one participant, got {len(sets)}")
        return sets[0]
    if len(sets) < 2:
        raise ConfigError("interparticipant training needs at least two participants")
    return pool_participants(sets)


def train(
    config: TrainConfig,
    epochs_data: EpochSet | Sequence[EpochSet],
    train_bank: FeatureBank,
    encoder_config: EncoderConfig | None = None,
    val_bank: FeatureBank | None = None,
    run_dir: str | os.PathLike | None = None,
    audit_draws: bool = False,
    workers: int = 1,
) -> tuple[EEGEncoder, TrainHistory]:
    """Train an encoder by contrastive alignment; returns final-epoch weights.

    Every epoch draws a fresh schedule, averages trials per the sampler, pairs
    each draw with its (concept, image) target vector and takes one AdamW step
    per batch. Validation runs on the held-out images when the bank covers them.
    Results depend only on the configs and the data.
    """
    epochs = prepare_epochs(config, epochs_data)
    _check_bank(train_bank, config.feature_mode)
    space = build_concept_space(epochs)
    missing = [u for u in space.units if not train_bank.has(*u)]
    if missing:
        raise CoverageError(f"train bank lacks {len(missing)} (concept, image) target(s), e.g. {missing[0]}")

    enc_cfg = encoder_config or EncoderConfig(
        n_channels=epochs.n_channels, n_samples=epochs.n_samples, embed_dim=train_bank.dim
    )
    if enc_cfg.embed_dim != train_bank.dim:
        raise ConfigError(f"encoder embed_dim {enc_cfg.embed_dim} != bank dim {train_bank.dim}")
    if (enc_cfg.n_channels, enc_cfg.n_samples) != (epochs.n_channels, epochs.n_samples):
        raise ConfigError("encoder input shape does not match the epochs")

    val_bank = val_bank or train_bank
    can_validate = bool(space.holdout_images()) and all(
        val_bank.has(*k) for k in space.holdout_images()
    )

    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        with open(run_path / "config.json", "w") as f:
            json.dump({"train": config.to_dict(), "encoder": asdict(enc_cfg)}, f, indent=1)
        if audit_draws:
            (run_path / "draws.jsonl").write_text("")

    max_log_inv_temp = math.log(1.0 / config.temperature_min)
    history = TrainHistory()
    best = (-1.0, None)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = encoder_init(enc_cfg)
        model.temperature_log.requires_grad_(config.temperature_learnable)
        decay = [p for n, p in model.named_parameters() if n != "temperature_log"]
        groups = [{"params": decay, "weight_decay": config.weight_decay}]
        if config.temperature_learnable:
            groups.append({"params": [model.temperature_log], "weight_decay": 0.0})
        opt = torch.optim.AdamW(groups, lr=config.lr, betas=config.adam_betas)

        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            model.train()
            batches = make_epoch_schedule(space, config.sampler, config.batch_size, epoch)
            loss_sum, n_seen = 0.0, 0
            for b, batch in enumerate(batches):
                if len(batch) < 2:
                    continue
                x, idx = draw_batch(space, batch, config.sampler, workers=workers)
                if run_path is not None and audit_draws:
                    write_jsonl(run_path / "draws.jsonl", audit_records(batch, idx, epoch, b))
                targets = torch.from_numpy(
                    _target_matrix(train_bank, [(u.concept_id, u.image_id) for u in batch])
                )
                emb = encoder_forward(model, torch.from_numpy(x))
                loss, _ = contrastive_loss(emb, targets, model.temperature)
                if not torch.isfinite(loss):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch}, batch {b}: loss={float(loss)}, "
                        f"temperature={model.temperature.item()}"
                    )
                if epoch == 0 and b == 0:
                    history.initial_loss = loss.item()
                opt.zero_grad()
                loss.backward()
                opt.step()
                with torch.no_grad():
                    model.temperature_log.clamp_(max=max_log_inv_temp)
                assert model.temperature.item() >= config.temperature_min * (1 - 1e-6)
                loss_sum += loss.item() * len(batch)
                n_seen += len(batch)

            if can_validate:
                v_loss, v1, v5 = validate(model, space, val_bank, config.val_candidates, seed=config.seed)
            else:
                v_loss = v1 = v5 = float("nan")
            rec = EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / max(n_seen, 1),
                val_loss=v_loss,
                val_top1=v1,
                val_top5=v5,
                temperature=model.temperature.item(),
                wall_seconds=time.perf_counter() - t0,
            )
            history.records.append(rec)
            log.info("epoch %d train_loss %.4f val_top1 %.4f", epoch, rec.train_loss, v1)
            if config.keep_best_val and can_validate and v1 > best[0]:
                best = (v1, copy.deepcopy(model.state_dict()))

    if config.keep_best_val and best[1] is not None:
        model.load_state_dict(best[1])
    model.eval()

    if run_path is not None:
        history.to_csv(run_path / "history.csv")
        summary = {"initial_loss": history.initial_loss, "final_train_loss": history.train_loss[-1],
                   "final_val_top1": history.records[-1].val_top1, "epochs": len(history.records)}
        (run_path / "summary.json").write_text(json.dumps(summary, indent=1))
        save_checkpoint(model, run_path / "checkpoint", provenance={
            "participant_id": epochs.participant_id,
            "train_config": config.to_dict(),
            "bank_source": train_bank.source,
        })
    return model, history
