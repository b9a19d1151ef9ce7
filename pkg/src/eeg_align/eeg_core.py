"""Epoched EEG container, the EEGPack on-disk format and the preprocessing chain.

The chain used for THINGS-EEG2-style recordings is::

    baseline_correct(-200, 0) -> crop(0, 1000) -> downsample(250 Hz)

followed by multivariate noise normalization fitted on (and applied to) the
training split only.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal

from .errors import (
    CorruptionError,
    FormatError,
    NumericalError,
    RangeError,
    ShapeError,
    UnsupportedRateError,
    ValidationError,
)

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
MANIFEST = "manifest.json"
EPOCHS_BLOB = "epochs.f32le"

# Slack for float comparisons of window edges against the sample grid, in samples.
_GRID_EPS = 1e-6


@dataclass(frozen=True)
class TrialMeta:
    concept_id: str
    image_id: str
    repeat_id: int
    split: str = "train"

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.concept_id, self.image_id, self.repeat_id)

    def to_dict(self) -> dict:
        return {
            "concept_id": self.concept_id,
            "image_id": self.image_id,
            "repeat_id": int(self.repeat_id),
            "split": self.split,
        }


@dataclass
class EpochSet:
    """A participant's epoched trials.

    ``trials`` has shape ``[n_trials, n_channels, n_samples]`` and is stored as
    float32 microvolts. Sample ``i`` sits at ``time_origin_ms + i * 1000 / fs``.
    """

    participant_id: str
    sampling_rate_hz: float
    time_origin_ms: float
    channel_names: list[str]
    trials: np.ndarray
    meta: list[TrialMeta] = field(default_factory=list)

    def __post_init__(self):
        self.trials = np.ascontiguousarray(self.trials, dtype=np.float32)
        self.channel_names = [str(c) for c in self.channel_names]
        self.meta = list(self.meta)
        self.validate()

    def validate(self) -> None:
        if not (self.sampling_rate_hz > 0 and math.isfinite(self.sampling_rate_hz)):
            raise ValidationError(f"sampling_rate_hz must be positive, got {self.sampling_rate_hz}")
        if self.trials.ndim != 3:
            raise ShapeError(f"trials must be 3-D [trial, channel, sample], got shape {self.trials.shape}")
        if self.trials.shape[0] != len(self.meta):
            raise ValidationError(
                f"{self.trials.shape[0]} trials but {len(self.meta)} metadata records"
            )
        if self.trials.shape[1] != len(self.channel_names):
            raise ShapeError(
                f"{self.trials.shape[1]} channels in tensor but {len(self.channel_names)} channel names"
            )
        seen = set()
        for m in self.meta:
            if m.split not in SPLITS:
                raise ValidationError(f"unknown split {m.split!r}")
            if m.key in seen:
                raise ValidationError(f"duplicate trial (concept, image, repeat) = {m.key}")
            seen.add(m.key)

    @property
    def n_trials(self) -> int:
        return self.trials.shape[0]

    @property
    def n_channels(self) -> int:
        return self.trials.shape[1]

    @property
    def n_samples(self) -> int:
        return self.trials.shape[2]

    @property
    def sample_period_ms(self) -> float:
        return 1000.0 / self.sampling_rate_hz

    @property
    def span_ms(self) -> tuple[float, float]:
        """Half-open time span ``[start, end)`` covered by the samples."""
        return (self.time_origin_ms, self.time_origin_ms + self.n_samples * self.sample_period_ms)

    def times_ms(self) -> np.ndarray:
        return self.time_origin_ms + np.arange(self.n_samples) * self.sample_period_ms

    def with_trials(self, trials: np.ndarray, **changes) -> "EpochSet":
        return replace(self, trials=trials, **changes)

    def select(self, indices: Sequence[int] | np.ndarray) -> "EpochSet":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, trials=self.trials[idx], meta=[self.meta[i] for i in idx])

    def split(self, name: str) -> "EpochSet":
        return self.select([i for i, m in enumerate(self.meta) if m.split == name])

    def indices_for(self, split: str) -> list[int]:
        return [i for i, m in enumerate(self.meta) if m.split == split]


def concatenate(sets: Sequence[EpochSet], participant_id: str | None = None) -> EpochSet:
    """Stack trials from sets sharing rate, time origin and montage."""
    if not sets:
        raise ValidationError("nothing to concatenate")
    first = sets[0]
    for s in sets[1:]:
        if (
            s.sampling_rate_hz != first.sampling_rate_hz
            or s.time_origin_ms != first.time_origin_ms
            or s.channel_names != first.channel_names
            or s.n_samples != first.n_samples
        ):
            raise ShapeError("epoch sets differ in rate, time origin, montage or length")
    return EpochSet(
        participant_id=participant_id or first.participant_id,
        sampling_rate_hz=first.sampling_rate_hz,
        time_origin_ms=first.time_origin_ms,
        channel_names=first.channel_names,
        trials=np.concatenate([s.trials for s in sets], axis=0),
        meta=[m for s in sets for m in s.meta],
    )


def pool_participants(sets: Sequence[EpochSet]) -> EpochSet:
    """Pool several participants into one set for interparticipant training.

    Repeat ids are offset per participant so every (concept, image, repeat)
    triple stays unique; repeats of one image from different participants then
    count as extra repeats of that image.
    """
    if not sets:
        raise ValidationError("nothing to pool")
    offset = 0
    renamed = []
    for s in sets:
        top = max((m.repeat_id for m in s.meta), default=-1) + 1
        meta = [replace(m, repeat_id=m.repeat_id + offset) for m in s.meta]
        renamed.append(replace(s, meta=meta))
        offset += top
    pid = "+".join(s.participant_id for s in sets)
    return concatenate(renamed, participant_id=pid)


# ---------------------------------------------------------------------------
# EEGPack I/O
# ---------------------------------------------------------------------------


def save_eegpack(epochs: EpochSet, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "participant_id": epochs.participant_id,
        "sampling_rate_hz": float(epochs.sampling_rate_hz),
        "time_origin_ms": float(epochs.time_origin_ms),
        "channel_names": list(epochs.channel_names),
        "n_trials": epochs.n_trials,
        "n_channels": epochs.n_channels,
        "n_samples": epochs.n_samples,
        "trials": [m.to_dict() for m in epochs.meta],
    }
    with open(path / MANIFEST, "w") as f:
        json.dump(manifest, f, indent=1)
    epochs.trials.astype("<f4", copy=False).tofile(path / EPOCHS_BLOB)
    return path


def load_eegpack(path: str | os.PathLike) -> EpochSet:
    """Read an EEGPack directory.

    Raises
    ------
    FormatError
        Missing manifest/blob or unsupported ``format_version``.
    CorruptionError
        Blob byte count disagrees with ``n_trials * n_channels * n_samples * 4``.
    ValidationError
        Duplicate (concept, image, repeat) triples or bad metadata.
    """
    path = Path(path)
    manifest_path, blob_path = path / MANIFEST, path / EPOCHS_BLOB
    for p in (manifest_path, blob_path):
        if not p.is_file():
            raise FormatError(f"EEGPack at {path} is missing {p.name}")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable manifest {manifest_path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {manifest.get('format_version')!r}")
    try:
        meta = [
            TrialMeta(str(t["concept_id"]), str(t["image_id"]), int(t["repeat_id"]), str(t["split"]))
            for t in manifest["trials"]
        ]
        channel_names = list(manifest["channel_names"])
        rate = float(manifest["sampling_rate_hz"])
        origin = float(manifest["time_origin_ms"])
        pid = str(manifest["participant_id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest {manifest_path} lacks a required field: {exc}") from exc

    n_trials, n_channels = len(meta), len(channel_names)
    nbytes = blob_path.stat().st_size
    if "n_samples" in manifest:
        n_samples = int(manifest["n_samples"])
    elif n_trials * n_channels:
        n_samples = nbytes // (4 * n_trials * n_channels)
    else:
        n_samples = 0
    expected = n_trials * n_channels * n_samples * 4
    if nbytes != expected:
        raise CorruptionError(f"{blob_path} holds {nbytes} bytes, manifest implies {expected}")
    data = np.fromfile(blob_path, dtype="<f4").reshape(n_trials, n_channels, n_samples)
    return EpochSet(pid, rate, origin, channel_names, data.astype(np.float32, copy=False), meta)


# ---------------------------------------------------------------------------
# Time-domain preprocessing
# ---------------------------------------------------------------------------


def _window_indices(epochs: EpochSet, start_ms: float, end_ms: float) -> tuple[int, int]:
    if not end_ms > start_ms:
        raise RangeError(f"empty window [{start_ms}, {end_ms})")
    lo, hi = epochs.span_ms
    tol = _GRID_EPS * epochs.sample_period_ms
    if start_ms < lo - tol or end_ms > hi + tol:
        raise RangeError(f"window [{start_ms}, {end_ms}) ms outside epoch span [{lo}, {hi}) ms")
    dt = epochs.sample_period_ms
    i0 = math.ceil((start_ms - epochs.time_origin_ms) / dt - _GRID_EPS)
    i1 = math.ceil((end_ms - epochs.time_origin_ms) / dt - _GRID_EPS)
    i0, i1 = max(i0, 0), min(i1, epochs.n_samples)
    if i1 <= i0:
        raise RangeError(f"window [{start_ms}, {end_ms}) ms contains no samples")
    return i0, i1


def baseline_residual(epochs: EpochSet, baseline_window_ms: tuple[float, float] = (-200.0, 0.0)) -> np.ndarray:
    """Float64 baseline-corrected trials, before rounding back to the float32 container.

    The window mean of the result is zero to float64 precision; the stored
    float32 copy carries an extra rounding error of order ``eps32 * |x|``.
    """
    start, end = baseline_window_ms
    if end > 0:
        raise RangeError(f"baseline window must end at or before stimulus onset, got end={end}")
    i0, i1 = _window_indices(epochs, start, end)
    x = epochs.trials.astype(np.float64)
    x -= x[:, :, i0:i1].mean(axis=2, keepdims=True)
    return x


def baseline_correct(epochs: EpochSet, baseline_window_ms: tuple[float, float] = (-200.0, 0.0)) -> EpochSet:
    """Subtract, per trial and channel, the mean over samples in ``[start, end)``."""
    return epochs.with_trials(baseline_residual(epochs, baseline_window_ms).astype(np.float32))


def crop(epochs: EpochSet, window_ms: tuple[float, float]) -> EpochSet:
    start, end = window_ms
    i0, i1 = _window_indices(epochs, start, end)
    new_origin = epochs.time_origin_ms + i0 * epochs.sample_period_ms
    return epochs.with_trials(epochs.trials[:, :, i0:i1].copy(), time_origin_ms=new_origin)


def antialias_kernel(source_hz: float, target_hz: float, attenuation_db: float = 60.0) -> np.ndarray:
    """Odd-length, symmetric Kaiser FIR low-pass with cutoff ``0.4 * target_hz``.

    The transition band is fixed in Hz (``0.2 * target_hz`` wide), so kernels
    designed at different source rates approximate the same analog response.
    """
    cutoff = 0.4 * target_hz
    width = 0.2 * target_hz
    numtaps, beta = signal.kaiserord(attenuation_db, width / (0.5 * source_hz))
    numtaps |= 1
    return signal.firwin(numtaps, cutoff, window=("kaiser", beta), fs=source_hz)


def downsample(epochs: EpochSet, target_hz: float) -> EpochSet:
    """Zero-phase anti-alias filter followed by integer decimation.

    The sample at index 0 is kept, so ``time_origin_ms`` is unchanged.
    """
    source = float(epochs.sampling_rate_hz)
    if not target_hz > 0:
        raise RangeError(f"target rate must be positive, got {target_hz}")
    if target_hz > source:
        raise RangeError(f"target rate {target_hz} Hz exceeds source rate {source} Hz")
    ratio = source / target_hz
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9 * ratio:
        raise UnsupportedRateError(f"rate ratio {source}/{target_hz} is not an integer")
    if factor == 1:
        return epochs.with_trials(epochs.trials.copy())
    kernel = antialias_kernel(source, float(target_hz))
    half = len(kernel) // 2
    # odd (point-symmetric) extension keeps edge levels and slopes; the
    # symmetric kernel applied in "valid" mode is zero phase
    padded = np.pad(epochs.trials.astype(np.float64), ((0, 0), (0, 0), (half, half)),
                    mode="reflect", reflect_type="odd")
    filtered = signal.oaconvolve(padded, kernel[None, None, :], mode="valid", axes=2)
    out = filtered[:, :, ::factor]
    return epochs.with_trials(out.astype(np.float32), sampling_rate_hz=source / factor)


def preprocess_chain(
    epochs: EpochSet,
    baseline_window_ms: tuple[float, float] = (-200.0, 0.0),
    crop_window_ms: tuple[float, float] = (0.0, 1000.0),
    target_hz: float = 250.0,
) -> EpochSet:
    """Baseline-correct at the recording rate, crop, then downsample."""
    out = baseline_correct(epochs, baseline_window_ms)
    out = crop(out, crop_window_ms)
    return downsample(out, target_hz)


# ---------------------------------------------------------------------------
# Multivariate noise normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WhiteningOperator:
    matrix: np.ndarray
    source_covariance: np.ndarray
    shrinkage: float

    @property
    def n_channels(self) -> int:
        return self.matrix.shape[0]


def _group_covariance(x: np.ndarray) -> np.ndarray:
    # x: [n, C, T]; covariance across trials at each time point, averaged over time
    centred = x - x.mean(axis=0, keepdims=True)
    n, _, t = centred.shape
    return np.einsum("nct,ndt->cd", centred, centred, optimize=False) / ((n - 1) * t)


def noise_covariance(epochs: EpochSet, n_jobs: int = 1) -> np.ndarray:
    """Pooled per-time-point noise covariance, grouped by concept.

    Each concept contributes the covariance of its trials around the concept
    mean, averaged over time points; concepts are then averaged with equal
    weight, in sorted concept order so the result is independent of ``n_jobs``.
    """
    groups: dict[str, list[int]] = {}
    for i, m in enumerate(epochs.meta):
        groups.setdefault(m.concept_id, []).append(i)
    usable = sorted(c for c, idx in groups.items() if len(idx) >= 2)
    if not usable:
        raise ValidationError("noise covariance needs at least one concept with >= 2 trials")
    data = epochs.trials

    def one(concept: str) -> np.ndarray:
        return _group_covariance(data[groups[concept]].astype(np.float64))

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            covs = list(pool.map(one, usable))
    else:
        covs = [one(c) for c in usable]
    total = np.zeros_like(covs[0])
    for c in covs:
        total += c
    total /= len(covs)
    return 0.5 * (total + total.T)


def whitening_from_covariance(cov: np.ndarray, shrinkage: float = 0.1) -> WhiteningOperator:
    if not 0.0 <= shrinkage <= 1.0:
        raise RangeError(f"shrinkage must lie in [0, 1], got {shrinkage}")
    cov = np.asarray(cov, dtype=np.float64)
    n = cov.shape[0]
    target = np.trace(cov) / n * np.eye(n)
    shrunk = (1.0 - shrinkage) * cov + shrinkage * target
    evals, evecs = np.linalg.eigh(shrunk)
    if evals[0] <= max(evals[-1], 0.0) * 1e-12 or evals[-1] <= 0:
        raise NumericalError(
            "noise covariance is singular or not positive definite; use shrinkage > 0"
        )
    matrix = (evecs * evals ** -0.5) @ evecs.T
    matrix = 0.5 * (matrix + matrix.T)
    return WhiteningOperator(matrix=matrix, source_covariance=cov, shrinkage=float(shrinkage))


def mvnn_fit(epochs: EpochSet, shrinkage: float = 0.1, n_jobs: int = 1) -> WhiteningOperator:
    """Fit the inverse square root of the shrunk pooled noise covariance."""
    if epochs.n_trials < 2:
        raise ValidationError("mvnn_fit needs at least two trials")
    if not 0.0 <= shrinkage <= 1.0:
        raise RangeError(f"shrinkage must lie in [0, 1], got {shrinkage}")
    return whitening_from_covariance(noise_covariance(epochs, n_jobs=n_jobs), shrinkage)


def mvnn_apply(op: WhiteningOperator, epochs: EpochSet) -> EpochSet:
    if op.n_channels != epochs.n_channels:
        raise ShapeError(f"operator has {op.n_channels} channels, epochs have {epochs.n_channels}")
    out = np.einsum("cd,ndt->nct", op.matrix, epochs.trials.astype(np.float64))
    return epochs.with_trials(out.astype(np.float32))


def whiten_train_split(epochs: EpochSet, shrinkage: float = 0.1) -> tuple[EpochSet, WhiteningOperator]:
    """Fit MVNN on the train split and apply it to train trials only.

    Validation-split trials (held-out training images) are whitened with the
    same operator; test trials are left untouched.
    """
    train_idx = epochs.indices_for("train")
    op = mvnn_fit(epochs.select(train_idx), shrinkage)
    out = epochs.trials.copy()
    white = [i for i, m in enumerate(epochs.meta) if m.split in ("train", "val")]
    if white:
        out[white] = mvnn_apply(op, epochs.select(white)).trials
    return epochs.with_trials(out), op


def iter_concepts(meta: Iterable[TrialMeta]) -> list[str]:
    """Concept ids in first-appearance order."""
    return list(dict.fromkeys(m.concept_id for m in meta))
