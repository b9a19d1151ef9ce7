"""Trainable EEG encoders mapping a ``[channels, samples]`` trial to a unit-norm embedding.

Two reference architectures are provided:

``conv_projector``
    temporal conv -> spatial conv over all channels -> BatchNorm/ELU ->
    average pooling -> flatten -> linear to ``embed_dim`` -> residual MLP
    projector -> LayerNorm -> L2 normalize.

``attention_projector``
    per-channel linear embedding plus channel position embedding ->
    self-attention across channels -> the same conv trunk and projector.

The encoder also owns the log inverse temperature used by the contrastive loss.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, FormatError, ShapeError, ValidationError

ARCHS = ("conv_projector", "attention_projector")
INIT_TEMPERATURE = 0.07


@dataclass(frozen=True)
class EncoderConfig:
    n_channels: int = 63
    n_samples: int = 250
    embed_dim: int = 1024
    arch: str = "conv_projector"
    n_filters: int = 40
    temporal_kernel: int = 25
    pool_kernel: int = 51
    pool_stride: int = 5
    dropout: float = 0.5
    attn_heads: int = 1
    init_seed: int = 0

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown encoder arch {self.arch!r}; expected one of {ARCHS}")
        if min(self.n_channels, self.n_samples, self.embed_dim, self.n_filters) < 1:
            raise ConfigError("channel, sample, embedding and filter counts must be positive")
        if self.pooled_length < 1:
            raise ConfigError(
                f"n_samples={self.n_samples} too short for temporal_kernel={self.temporal_kernel} "
                f"and pool_kernel={self.pool_kernel}"
            )
        if self.arch == "attention_projector" and self.n_samples % self.attn_heads:
            raise ConfigError("attn_heads must divide n_samples")

    @property
    def pooled_length(self) -> int:
        conv_len = self.n_samples - self.temporal_kernel + 1
        return (conv_len - self.pool_kernel) // self.pool_stride + 1

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class ConvTrunk(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        f = cfg.n_filters
        self.temporal = nn.Conv2d(1, f, (1, cfg.temporal_kernel))
        self.spatial = nn.Conv2d(f, f, (cfg.n_channels, 1))
        self.norm = nn.BatchNorm2d(f)
        self.pool = nn.AvgPool2d((1, cfg.pool_kernel), (1, cfg.pool_stride))
        self.drop = nn.Dropout(cfg.dropout)
        self.out_features = f * cfg.pooled_length

    def forward(self, x):
        # x: [B, C, T] -> [B, 1, C, T]
        x = self.temporal(x.unsqueeze(1))
        x = F.elu(self.norm(self.spatial(x)))
        x = self.drop(self.pool(x))
        return x.flatten(1)


class Projector(nn.Module):
    """Linear map to the embedding width followed by a residual two-layer MLP."""

    def __init__(self, in_features: int, dim: int, dropout: float):
        super().__init__()
        self.linear = nn.Linear(in_features, dim)
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        h = self.linear(x)
        h = h + self.drop(self.fc2(F.gelu(self.fc1(h))))
        return self.norm(h)


class ChannelAttention(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.embed = nn.Linear(cfg.n_samples, cfg.n_samples)
        self.position = nn.Parameter(torch.zeros(cfg.n_channels, cfg.n_samples))
        self.attn = nn.MultiheadAttention(cfg.n_samples, cfg.attn_heads, dropout=0.0, batch_first=True)
        self.norm = nn.LayerNorm(cfg.n_samples)

    def forward(self, x):
        # channels are tokens, each carrying its time course
        tokens = self.embed(x) + self.position
        attended, _ = self.attn(tokens, tokens, tokens, need_weights=False)
        return self.norm(tokens + attended)


class EEGEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.channel_attention = ChannelAttention(config) if config.arch == "attention_projector" else None
        self.trunk = ConvTrunk(config)
        self.projector = Projector(self.trunk.out_features, config.embed_dim, config.dropout)
        self.temperature_log = nn.Parameter(torch.tensor(math.log(1.0 / INIT_TEMPERATURE)))

    @property
    def temperature(self) -> torch.Tensor:
        return torch.exp(-self.temperature_log)

    def forward(self, x):
        if self.channel_attention is not None:
            x = self.channel_attention(x)
        z = self.projector(self.trunk(x))
        return F.normalize(z, dim=1)


def encoder_init(config: EncoderConfig) -> EEGEncoder:
    """Build an encoder whose initial weights depend only on ``config.init_seed``.

    The global torch RNG state is restored afterwards.
    """
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.init_seed)
        model = EEGEncoder(config)
    return model


def encoder_forward(model: EEGEncoder, batch) -> torch.Tensor:
    """Embed ``[B, n_channels, n_samples]`` trials; rows of the result have unit norm."""
    x = torch.as_tensor(batch)
    param = next(model.parameters())
    x = x.to(dtype=param.dtype)
    cfg = model.config
    if x.ndim != 3 or x.shape[1:] != (cfg.n_channels, cfg.n_samples):
        raise ShapeError(
            f"expected batch [B, {cfg.n_channels}, {cfg.n_samples}], got {tuple(x.shape)}"
        )
    if not torch.isfinite(x).all():
        raise ValidationError("encoder input contains non-finite values")
    return model(x)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def embed_numpy(model: EEGEncoder, trials: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode embedding of a trial array, returned as float64 numpy."""
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(trials), batch_size):
            out.append(encoder_forward(model, trials[i : i + batch_size]).double().numpy())
    model.train(was_training)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# Checkpoints: manifest.json + params.f32le with a named-tensor index
# ---------------------------------------------------------------------------

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_BLOB = "params.f32le"


def save_checkpoint(model: EEGEncoder, path: str | os.PathLike, provenance: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4").ravel()
        index.append({"name": name, "shape": list(tensor.shape), "offset": offset, "count": int(arr.size),
                      "dtype": str(tensor.dtype).replace("torch.", "")})
        chunks.append(arr)
        offset += arr.size
    manifest = {
        "format_version": 1,
        "config": asdict(model.config),
        "tensors": index,
        "provenance": provenance or {},
    }
    with open(path / CHECKPOINT_MANIFEST, "w") as f:
        json.dump(manifest, f, indent=1)
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    blob.astype("<f4").tofile(path / CHECKPOINT_BLOB)
    return path


def load_checkpoint(path: str | os.PathLike) -> EEGEncoder:
    path = Path(path)
    try:
        with open(path / CHECKPOINT_MANIFEST) as f:
            manifest = json.load(f)
        blob = np.fromfile(path / CHECKPOINT_BLOB, dtype="<f4")
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint at {path}: {exc}") from exc
    model = EEGEncoder(EncoderConfig.from_dict(manifest["config"]))
    state = {}
    for t in manifest["tensors"]:
        chunk = blob[t["offset"] : t["offset"] + t["count"]]
        if chunk.size != t["count"]:
            raise FormatError(f"checkpoint blob too short for tensor {t['name']}")
        dtype = getattr(torch, t.get("dtype", "float32"))
        state[t["name"]] = torch.from_numpy(chunk.copy()).reshape(t["shape"]).to(dtype)
    model.load_state_dict(state)
    return model
