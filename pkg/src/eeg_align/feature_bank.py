"""Pretrained feature banks: FeatBank I/O and the multimodal, ID and OOD builders.

Features are extracted by external tooling (image encoder, captioner, text
encoder) and ingested here as FeatBank directories: ``manifest.json`` plus a
row-major little-endian float32 blob ``features.f32le`` of shape
``[n_items, dim]``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    AlignmentError,
    AmbiguityError,
    CorruptionError,
    EmptyConceptError,
    FormatError,
    LookupFailure,
    NormalizationError,
    ValidationError,
)

FORMAT_VERSION = 1
MODALITIES = ("visual", "language", "multimodal")
MANIFEST = "manifest.json"
FEATURES_BLOB = "features.f32le"
UNIT_NORM_TOL = 1e-5


@dataclass(frozen=True)
class BankItem:
    concept_id: str
    image_id: str | None = None


@dataclass
class FeatureBank:
    """Rows of ``vectors`` are keyed by ``items`` (concept, image-or-None)."""

    items: list[BankItem]
    vectors: np.ndarray
    modality: str = "visual"
    source: str = ""
    normalized: bool = False

    def __post_init__(self):
        self.items = [i if isinstance(i, BankItem) else BankItem(*i) for i in self.items]
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.items):
            raise ValidationError(
                f"vectors of shape {self.vectors.shape} do not match {len(self.items)} items"
            )
        if self.vectors.shape[1] == 0:
            raise ValidationError("feature dimension must be positive")
        if len(set(self.items)) != len(self.items):
            raise ValidationError("duplicate (concept_id, image_id) item in feature bank")
        if self.normalized:
            norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
                raise ValidationError("bank flagged normalized but has rows off the unit sphere")
        self._index = {item: r for r, item in enumerate(self.items)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.items)

    @property
    def concepts(self) -> list[str]:
        return list(dict.fromkeys(i.concept_id for i in self.items))

    def row(self, concept_id: str, image_id: str | None = None) -> int:
        try:
            return self._index[BankItem(concept_id, image_id)]
        except KeyError:
            raise LookupFailure(f"no bank item for concept {concept_id!r}, image {image_id!r}") from None

    def get(self, concept_id: str, image_id: str | None = None) -> np.ndarray:
        return self.vectors[self.row(concept_id, image_id)]

    def has(self, concept_id: str, image_id: str | None = None) -> bool:
        return BankItem(concept_id, image_id) in self._index

    def subset(self, rows: Sequence[int]) -> "FeatureBank":
        rows = list(rows)
        return replace(self, items=[self.items[r] for r in rows], vectors=self.vectors[rows])

    def concept_rows(self, concept_ids: Sequence[str]) -> list[int]:
        """Row of each concept in a concept-level bank (``image_id`` is None)."""
        return [self.row(c, None) for c in concept_ids]

    def require_normalized(self) -> None:
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ValidationError("feature bank rows must be unit-norm; normalize the bank first")


def unit_rows(x: np.ndarray) -> np.ndarray:
    """Divide each row by its L2 norm (computed in float64)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    bad = ~np.isfinite(norms[:, 0]) | (norms[:, 0] <= 1e-12)
    if np.any(bad):
        raise NormalizationError(f"{int(bad.sum())} row(s) have zero or non-finite norm")
    return x / norms


def normalize_bank(bank: FeatureBank) -> FeatureBank:
    return replace(bank, vectors=unit_rows(bank.vectors).astype(np.float32), normalized=True)


def save_featbank(bank: FeatureBank, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "modality": bank.modality,
        "dim": bank.dim,
        "source": bank.source,
        "normalized": bool(bank.normalized),
        "items": [{"concept_id": i.concept_id, "image_id": i.image_id} for i in bank.items],
    }
    with open(path / MANIFEST, "w") as f:
        json.dump(manifest, f, indent=1)
    bank.vectors.astype("<f4", copy=False).tofile(path / FEATURES_BLOB)
    return path


def load_featbank(path: str | os.PathLike) -> FeatureBank:
    path = Path(path)
    mpath, bpath = path / MANIFEST, path / FEATURES_BLOB
    for p in (mpath, bpath):
        if not p.is_file():
            raise FormatError(f"FeatBank at {path} is missing {p.name}")
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable manifest {mpath}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {manifest.get('format_version')!r}")
    try:
        items = [
            BankItem(str(it["concept_id"]), None if it.get("image_id") is None else str(it["image_id"]))
            for it in manifest["items"]
        ]
        dim = int(manifest["dim"])
        modality = str(manifest["modality"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest {mpath} lacks a required field: {exc}") from exc
    nbytes = bpath.stat().st_size
    expected = len(items) * dim * 4
    if nbytes != expected:
        raise CorruptionError(f"{bpath} holds {nbytes} bytes, manifest implies {expected}")
    vectors = np.fromfile(bpath, dtype="<f4").reshape(len(items), dim)
    return FeatureBank(
        items=items,
        vectors=vectors,
        modality=modality,
        source=str(manifest.get("source", "")),
        normalized=bool(manifest.get("normalized", False)),
    )


def concat_multimodal(visual: FeatureBank, language: FeatureBank, raw_concat: bool = False) -> FeatureBank:
    """Join visual and language rows into one multimodal vector per item.

    Each half is unit-normalized before concatenation and the joint vector is
    normalized again, so neither modality dominates by scale. ``raw_concat``
    concatenates the rows as given (then normalizes jointly).
    """
    if visual.modality != "visual" or language.modality != "language":
        raise AlignmentError(
            f"expected visual + language banks, got {visual.modality} + {language.modality}"
        )
    if visual.items != language.items:
        raise AlignmentError("visual and language banks must list identical items in identical order")
    if raw_concat:
        joint = np.concatenate([visual.vectors, language.vectors], axis=1).astype(np.float64)
    else:
        joint = np.concatenate([unit_rows(visual.vectors), unit_rows(language.vectors)], axis=1)
    source = visual.source if visual.source == language.source else f"{visual.source} + {language.source}"
    return FeatureBank(
        items=list(visual.items),
        vectors=unit_rows(joint).astype(np.float32),
        modality="multimodal",
        source=source,
        normalized=True,
    )


def _group_by_concept(bank: FeatureBank) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for r, item in enumerate(bank.items):
        groups.setdefault(item.concept_id, []).append(r)
    return groups


def build_ood_bank(per_image: FeatureBank, concepts: Sequence[str] | None = None) -> FeatureBank:
    """Average each concept's image vectors in raw space, then normalize.

    ``per_image`` must not contain the images shown to participants.
    """
    groups = _group_by_concept(per_image)
    wanted = list(groups) if concepts is None else list(concepts)
    means = []
    for c in wanted:
        rows = groups.get(c)
        if not rows:
            raise EmptyConceptError(f"concept {c!r} has no image vectors")
        means.append(per_image.vectors[rows].astype(np.float64).mean(axis=0))
    try:
        vectors = unit_rows(np.stack(means))
    except NormalizationError as exc:
        raise NormalizationError(f"averaged concept vector vanished: {exc}") from exc
    return FeatureBank(
        items=[BankItem(c, None) for c in wanted],
        vectors=vectors.astype(np.float32),
        modality=per_image.modality,
        source=per_image.source,
        normalized=True,
    )


def build_id_bank(per_image: FeatureBank) -> FeatureBank:
    """Re-key one shown-image vector per concept to concept level."""
    groups = _group_by_concept(per_image)
    for c, rows in groups.items():
        if len(rows) != 1:
            raise AmbiguityError(f"concept {c!r} has {len(rows)} vectors; the ID bank needs exactly one")
    concepts = list(groups)
    rows = [groups[c][0] for c in concepts]
    vectors = per_image.vectors[rows]
    if not per_image.normalized:
        vectors = unit_rows(vectors).astype(np.float32)
    return FeatureBank(
        items=[BankItem(c, None) for c in concepts],
        vectors=vectors,
        modality=per_image.modality,
        source=per_image.source,
        normalized=True,
    )


def select_images(bank: FeatureBank, keep) -> FeatureBank:
    """Rows whose item satisfies ``keep(item)``."""
    return bank.subset([r for r, it in enumerate(bank.items) if keep(it)])
