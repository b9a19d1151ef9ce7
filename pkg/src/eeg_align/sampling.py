"""Training-time trial sampling and batch scheduling.

Two samplers share one schedule structure so that they differ only in trial
content:

* ``ides`` averages ``k`` trials drawn without replacement from all retained
  (image, repeat) slots of a concept, mixing images of that concept;
* ``average_repeats`` averages every training repeat of one image.

All randomness flows from per-unit seeds fixed when the schedule is built, so
draws can run in any order or on any number of workers.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .eeg_core import EpochSet
from .errors import (
    ConfigError,
    EmptyConceptError,
    HoldoutRuleError,
    LookupFailure,
    SamplingError,
    ValidationError,
)

METHODS = ("ides", "average_repeats")


@dataclass
class ConceptSpace:
    """Per-concept index of trial slots available to the samplers.

    ``slots[c]`` lists training trial indices of concept ``c`` (one per
    retained image/repeat pair), ``holdout[c]`` the validation trial indices.
    ``images[(c, img)]`` lists the training repeats of one image.
    """

    epochs: EpochSet
    concepts: list[str]
    slots: dict[str, list[int]]
    holdout: dict[str, list[int]]
    images: dict[tuple[str, str], list[int]] = field(default_factory=dict)

    def __post_init__(self):
        n = self.epochs.n_trials
        for c in self.concepts:
            s, h = set(self.slots.get(c, ())), set(self.holdout.get(c, ()))
            if s & h:
                raise ValidationError(f"concept {c!r}: slot and holdout indices overlap")
            if any(not 0 <= i < n for i in s | h):
                raise ValidationError(f"concept {c!r}: trial index out of range")

    @property
    def units(self) -> list[tuple[str, str]]:
        """(concept, image) pairs with at least one training repeat, in concept order."""
        return list(self.images)

    def min_slots(self) -> int:
        return min(len(self.slots[c]) for c in self.concepts)

    def holdout_images(self) -> dict[tuple[str, str], list[int]]:
        out: dict[tuple[str, str], list[int]] = {}
        for c in self.concepts:
            for i in self.holdout[c]:
                out.setdefault((c, self.epochs.meta[i].image_id), []).append(i)
        return out


def build_concept_space(epochs: EpochSet, holdout_rule: str = "last-image") -> ConceptSpace:
    """Index training trials per concept, holding out each concept's last image.

    The held-out image is the lexicographically greatest ``image_id`` among the
    concept's train-split trials; all its repeats (plus any ``val``-split trials)
    form the holdout. Use ``holdout_rule="none"`` to keep every image.
    """
    if holdout_rule not in ("last-image", "none"):
        raise ConfigError(f"unknown holdout rule {holdout_rule!r}")
    by_concept: dict[str, dict[str, list[int]]] = {}
    val: dict[str, list[int]] = {}
    for i, m in enumerate(epochs.meta):
        if m.split == "train":
            by_concept.setdefault(m.concept_id, {}).setdefault(m.image_id, []).append(i)
        elif m.split == "val":
            val.setdefault(m.concept_id, []).append(i)
    if not by_concept:
        raise ValidationError("epoch set has no train-split trials")

    concepts = list(by_concept)
    slots, holdout, images = {}, {}, {}
    for c in concepts:
        imgs = sorted(by_concept[c])
        if holdout_rule == "last-image":
            if len(imgs) < 2:
                raise HoldoutRuleError(
                    f"concept {c!r} has {len(imgs)} image(s); holding out the last needs >= 2"
                )
            kept, held = imgs[:-1], imgs[-1:]
        else:
            kept, held = imgs, []
        slots[c] = []
        for img in kept:
            idx = sorted(by_concept[c][img], key=lambda j: epochs.meta[j].repeat_id)
            images[(c, img)] = idx
            slots[c].extend(idx)
        holdout[c] = [j for img in held for j in by_concept[c][img]] + val.get(c, [])
    return ConceptSpace(epochs, concepts, slots, holdout, images)


@dataclass(frozen=True)
class SamplerConfig:
    method: str = "ides"
    k: int = 7
    seed: int = 0
    dedup_concepts: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown sampler method {self.method!r}; expected one of {METHODS}")
        if self.k < 1:
            raise ConfigError(f"k must be positive, got {self.k}")


def mean_of_trials(trials: np.ndarray, indices: Sequence[int]) -> np.ndarray:
    """Mean of ``trials[indices]`` accumulated in float64 in the given order."""
    return trials[np.asarray(indices, dtype=np.int64)].astype(np.float64).mean(axis=0).astype(np.float32)


def ides_select(space: ConceptSpace, concept_id: str, k: int, rng: np.random.Generator) -> list[int]:
    """Pick ``k`` distinct slot trial indices of one concept uniformly at random."""
    try:
        slots = space.slots[concept_id]
    except KeyError:
        raise LookupFailure(f"unknown concept {concept_id!r}") from None
    if k > len(slots):
        raise SamplingError(f"k={k} exceeds the {len(slots)} slots of concept {concept_id!r}")
    if k == len(slots):
        return list(slots)
    picks = rng.choice(len(slots), size=k, replace=False)
    return [slots[p] for p in picks]


def ides_draw(
    space: ConceptSpace,
    concept_id: str,
    k: int,
    rng: np.random.Generator,
    return_indices: bool = False,
):
    idx = ides_select(space, concept_id, k, rng)
    out = mean_of_trials(space.epochs.trials, idx)
    return (out, idx) if return_indices else out


def average_repeats_draw(
    space: ConceptSpace,
    concept_id: str,
    image_id: str,
    rng: np.random.Generator | None = None,
    return_indices: bool = False,
):
    """Mean over all training repeats of one image. ``rng`` is accepted for
    interface symmetry with :func:`ides_draw` and left untouched."""
    try:
        idx = space.images[(concept_id, image_id)]
    except KeyError:
        raise LookupFailure(f"no training repeats for image {image_id!r} of concept {concept_id!r}") from None
    out = mean_of_trials(space.epochs.trials, idx)
    return (out, list(idx)) if return_indices else out


def test_aggregate(epochs: EpochSet, concepts: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Average every test-split repeat per concept."""
    groups: dict[str, list[int]] = {}
    for i, m in enumerate(epochs.meta):
        if m.split == "test":
            groups.setdefault(m.concept_id, []).append(i)
    wanted = list(groups) if concepts is None else list(concepts)
    if not wanted:
        raise EmptyConceptError("epoch set has no test-split trials")
    out = {}
    for c in wanted:
        if c not in groups:
            raise EmptyConceptError(f"concept {c!r} has no test trials")
        out[c] = mean_of_trials(epochs.trials, groups[c])
    return out


test_aggregate.__test__ = False  # not a pytest test


# ---------------------------------------------------------------------------
# Scheduling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleUnit:
    concept_id: str
    image_id: str | None
    draw_seed: int


def _dedup_batches(units: list[ScheduleUnit], batch_size: int) -> list[list[ScheduleUnit]]:
    pending = list(units)
    batches = []
    while pending:
        batch, seen, rest = [], set(), []
        for u in pending:
            if len(batch) < batch_size and u.concept_id not in seen:
                batch.append(u)
                seen.add(u.concept_id)
            else:
                rest.append(u)
        batches.append(batch)
        pending = rest
    return batches


def make_epoch_schedule(
    space: ConceptSpace, config: SamplerConfig, batch_size: int, epoch_index: int
) -> list[list[ScheduleUnit]]:
    """Shuffle one unit per (concept, image) pair into batches.

    The permutation and the per-unit draw seeds come from
    ``SeedSequence([config.seed, epoch_index])``; the last batch holds the
    remainder.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    if config.method == "ides" and config.k > space.min_slots():
        raise ConfigError(f"k={config.k} exceeds the smallest concept slot count {space.min_slots()}")
    units = space.units
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed) & (2**64 - 1), int(epoch_index)]))
    order = rng.permutation(len(units))
    seeds = rng.integers(0, 2**63 - 1, size=len(units), dtype=np.int64)
    shuffled = [ScheduleUnit(units[o][0], units[o][1], int(s)) for o, s in zip(order, seeds)]
    if config.dedup_concepts:
        return _dedup_batches(shuffled, batch_size)
    return [shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)]


def unit_indices(space: ConceptSpace, unit: ScheduleUnit, config: SamplerConfig) -> list[int]:
    """Trial indices a unit's draw averages, resolved from its seed."""
    if config.method == "ides":
        return ides_select(space, unit.concept_id, config.k, np.random.default_rng(unit.draw_seed))
    try:
        return list(space.images[(unit.concept_id, unit.image_id)])
    except KeyError:
        raise LookupFailure(
            f"no training repeats for image {unit.image_id!r} of concept {unit.concept_id!r}"
        ) from None


def draw_unit(space: ConceptSpace, unit: ScheduleUnit, config: SamplerConfig) -> tuple[np.ndarray, list[int]]:
    idx = unit_indices(space, unit, config)
    return mean_of_trials(space.epochs.trials, idx), idx


def draw_batch(
    space: ConceptSpace, batch: Sequence[ScheduleUnit], config: SamplerConfig, workers: int = 1
) -> tuple[np.ndarray, list[list[int]]]:
    """Materialize a batch as ``[B, n_channels, n_samples]`` plus the chosen trial indices."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda u: draw_unit(space, u, config), batch))
    else:
        results = [draw_unit(space, u, config) for u in batch]
    return np.stack([r[0] for r in results]), [r[1] for r in results]


def audit_records(
    batch: Sequence[ScheduleUnit], indices: Sequence[Sequence[int]], epoch_index: int, batch_index: int
) -> list[dict]:
    return [
        {
            "epoch": epoch_index,
            "batch": batch_index,
            "concept_id": u.concept_id,
            "image_id": u.image_id,
            "draw_seed": u.draw_seed,
            "trial_indices": [int(i) for i in idx],
        }
        for u, idx in zip(batch, indices)
    ]


def write_jsonl(path: str | os.PathLike, records: Iterable[dict], append: bool = True) -> None:
    with open(path, "a" if append else "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def schedule_to_jsonl(
    space: ConceptSpace, config: SamplerConfig, batches: Sequence[Sequence[ScheduleUnit]], epoch_index: int
) -> str:
    """Serialize a schedule with its resolved trial indices, one draw per line."""
    lines = []
    for b, batch in enumerate(batches):
        idx = [unit_indices(space, u, config) for u in batch]
        lines.extend(json.dumps(r, sort_keys=True) for r in audit_records(batch, idx, epoch_index, b))
    return "\n".join(lines) + "\n"
