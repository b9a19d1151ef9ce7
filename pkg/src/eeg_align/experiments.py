"""Config-driven experiment grids.

An experiment document is JSON with these sections::

    {
      "data":    {"participants": {"p01": "packs/p01", ...}, "mvnn": true, "shrinkage": 0.1},
      "banks":   [{"source": "vit-b16", "feature_mode": "visual",
                   "train": "banks/train", "id": "banks/id", "ood": "banks/ood"}, ...],
      "train":   {...TrainConfig fields...},
      "encoder": {...EncoderConfig fields except embed_dim...},
      "eval":    {"banks": ["ID", "OOD"], "k": [1, 5]},
      "output":  {"run_dir": "runs/grid"},
      "grid":    {"sampler": ["ides", "average_repeats"], "feature_mode": ["visual"],
                  "bank_source": ["vit-b16"], "seeds": [0]}
    }

Relative paths resolve against the document's directory. Every grid cell is a
complete run description; cells may differ only in the controlled factors (sampler,
feature mode, bank source), the participant and the replicate seed.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from copy import deepcopy
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .eeg_core import load_eegpack, whiten_train_split
from .encoder import EncoderConfig
from .errors import ConfigError, DesignValidationError
from .eval_stats import evaluate_participant, reports_to_json
from .feature_bank import load_featbank
from .sampling import METHODS
from .trainer import FEATURE_MODES, TrainConfig, train

log = logging.getLogger(__name__)

CONTROLLED = ("sampler", "feature_mode", "bank_source")
RESULT_COLUMNS = (
    "participant_id", "regime", "sampler", "feature_mode", "bank_source", "seed",
    "id_top1", "id_top5", "ood_top1", "ood_top5", "n_candidates", "label",
)


@dataclass
class ExperimentConfig:
    data: dict
    banks: list
    train: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    eval: dict = field(default_factory=lambda: {"banks": ["ID", "OOD"], "k": [1, 5]})
    output: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | os.PathLike = ".") -> "ExperimentConfig":
        unknown = set(d) - {"data", "banks", "train", "encoder", "eval", "output", "grid"}
        if unknown:
            raise ConfigError(f"unknown experiment sections: {sorted(unknown)}")
        if "data" not in d or "banks" not in d:
            raise ConfigError("experiment config needs 'data' and 'banks' sections")
        return cls(**deepcopy(d), base_dir=str(base_dir))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read experiment config {path}: {exc}") from exc
        return cls.from_dict(d, base_dir=path.parent)

    def resolve(self, p: str) -> str:
        return str((Path(self.base_dir) / p).resolve()) if not os.path.isabs(p) else p

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def participants(self) -> dict[str, str]:
        parts = self.data.get("participants")
        if not isinstance(parts, dict) or not parts:
            raise ConfigError("data.participants must map participant ids to EEGPack paths")
        return {pid: self.resolve(p) for pid, p in parts.items()}

    def bank_set(self, source: str, feature_mode: str) -> dict:
        hits = [b for b in self.banks if b.get("source") == source and b.get("feature_mode") == feature_mode]
        if len(hits) != 1:
            raise ConfigError(f"need exactly one bank set for source={source!r}, feature_mode={feature_mode!r}")
        return {k: (self.resolve(v) if k in ("train", "id", "ood") else v) for k, v in hits[0].items()}

    def validate(self) -> None:
        """Check paths, factor levels and configs before any run starts."""
        for pid, p in self.participants().items():
            if not Path(p).is_dir():
                raise ConfigError(f"EEGPack for {pid!r} not found at {p}")
        for b in self.banks:
            for key in ("source", "feature_mode", "train", "id", "ood"):
                if key not in b:
                    raise ConfigError(f"bank set {b} lacks {key!r}")
            if b["feature_mode"] not in FEATURE_MODES:
                raise ConfigError(f"unknown feature_mode {b['feature_mode']!r}")
            for key in ("train", "id", "ood"):
                if not Path(self.resolve(b[key])).is_dir():
                    raise ConfigError(f"bank path {b[key]!r} not found")
        if "embed_dim" in self.encoder:
            raise ConfigError("encoder.embed_dim is taken from the bank; do not set it")
        TrainConfig(**{k: v for k, v in self.train.items() if k != "sampler"})
        for cell in expand_grid(self):
            self.bank_set(cell["bank_source"], cell["feature_mode"])
            if cell["sampler"] not in METHODS:
                raise ConfigError(f"unknown sampler {cell['sampler']!r}")


def expand_grid(config: ExperimentConfig) -> list[dict]:
    """One run description per (participant, sampler, feature_mode, bank_source, seed)."""
    grid = config.grid
    default_source = config.banks[0]["source"] if config.banks else ""
    samplers = grid.get("sampler", [config.train.get("sampler", {}).get("method", "ides")])
    modes = grid.get("feature_mode", [config.train.get("feature_mode", "visual")])
    sources = grid.get("bank_source", [default_source])
    seeds = grid.get("seeds", [config.train.get("seed", 0)])
    base_train = {k: v for k, v in config.train.items() if k not in ("seed", "feature_mode")}
    base_sampler = dict(base_train.pop("sampler", {}))
    if "cells" in grid:
        # explicit cells: factor levels plus optional per-cell section overrides
        combos = [(c.get("sampler", samplers[0]), c.get("feature_mode", modes[0]),
                   c.get("bank_source", sources[0]), c) for c in grid["cells"]]
    else:
        combos = [(s, m, b, {}) for s, m, b in itertools.product(samplers, modes, sources)]
    cells = []
    for pid in config.participants():
        for (sampler, mode, source, extra), seed in itertools.product(combos, seeds):
            train_over = dict(extra.get("train", {}))
            sampler_over = train_over.pop("sampler", {})
            cells.append({
                "participant_id": pid,
                "sampler": sampler,
                "feature_mode": mode,
                "bank_source": source,
                "seed": int(seed),
                "train": {**base_train, **train_over, "seed": int(seed), "feature_mode": mode,
                          "sampler": {**base_sampler, **sampler_over, "method": sampler, "seed": int(seed)}},
                "encoder": {**config.encoder, **extra.get("encoder", {})},
                "data": {**{k: v for k, v in config.data.items() if k != "participants"}, **extra.get("data", {})},
            })
    return cells


def _uncontrolled_view(cell: dict) -> dict:
    view = deepcopy(cell)
    for key in CONTROLLED + ("participant_id", "seed"):
        view.pop(key, None)
    view["train"].pop("seed", None)
    view["train"].pop("feature_mode", None)
    view["train"]["sampler"].pop("method", None)
    view["train"]["sampler"].pop("seed", None)
    return view


def validate_design(cells: list[dict]) -> None:
    """Raise if two cells differ in anything besides the controlled factors."""
    if not cells:
        raise DesignValidationError("the experiment grid is empty")
    ref = _uncontrolled_view(cells[0])
    for cell in cells[1:]:
        view = _uncontrolled_view(cell)
        if view != ref:
            diff = sorted(k for k in set(ref) | set(view) if ref.get(k) != view.get(k))
            raise DesignValidationError(
                f"cell {cell['participant_id']}/{cell['sampler']}/{cell['feature_mode']}/{cell['bank_source']} "
                f"differs from the first cell in uncontrolled section(s) {diff}"
            )
    keys = [(c["participant_id"], c["sampler"], c["feature_mode"], c["bank_source"], c["seed"]) for c in cells]
    if len(set(keys)) != len(keys):
        raise DesignValidationError("the grid repeats a factor combination")


def cell_label(cell: dict) -> str:
    return f"{cell['participant_id']}__{cell['sampler']}__{cell['feature_mode']}__{cell['bank_source']}__s{cell['seed']}"


def _load_participant(path: str, data_opts: dict):
    epochs = load_eegpack(path)
    if data_opts.get("mvnn", False):
        epochs, _ = whiten_train_split(epochs, shrinkage=float(data_opts.get("shrinkage", 0.1)))
    return epochs


def run_cell(cell: dict, config: ExperimentConfig, run_root: str | None = None) -> dict:
    """Train and evaluate one grid cell; returns a results row."""
    banks = config.bank_set(cell["bank_source"], cell["feature_mode"])
    train_bank = load_featbank(banks["train"])
    id_bank, ood_bank = load_featbank(banks["id"]), load_featbank(banks["ood"])
    tcfg = TrainConfig(**cell["train"])
    participants = config.participants()
    test = _load_participant(participants[cell["participant_id"]], cell["data"])
    if tcfg.regime == "interparticipant":
        # leave-one-participant-out: train on everyone else, each whitened separately
        train_sets = [_load_participant(p, cell["data"]) for pid, p in participants.items()
                      if pid != cell["participant_id"]]
    else:
        train_sets = test
    first = train_sets if not isinstance(train_sets, list) else train_sets[0]
    enc = EncoderConfig.from_dict({**cell["encoder"], "n_channels": first.n_channels,
                                   "n_samples": first.n_samples, "embed_dim": train_bank.dim})
    label = cell_label(cell)
    run_dir = Path(run_root) / "runs" / label if run_root else None
    model, _ = train(tcfg, train_sets, train_bank, enc, run_dir=run_dir)
    r_id, r_ood = evaluate_participant(model, test.split("test"), id_bank, ood_bank, regime=tcfg.regime,
                                       feature_mode=tcfg.feature_mode, sampler=cell["sampler"], label=label)
    if run_dir is not None:
        (run_dir / "report.json").write_text(reports_to_json([r_id, r_ood]))
    return {
        "participant_id": cell["participant_id"],
        "regime": tcfg.regime,
        "sampler": cell["sampler"],
        "feature_mode": cell["feature_mode"],
        "bank_source": cell["bank_source"],
        "seed": cell["seed"],
        "id_top1": r_id.top1,
        "id_top5": r_id.top5,
        "ood_top1": r_ood.top1,
        "ood_top5": r_ood.top5,
        "n_candidates": r_ood.n_candidates,
        "label": label,
    }


def _run_cell_star(args):
    return run_cell(*args)


def run_matrix(config: ExperimentConfig, run_dir: str | os.PathLike | None = None, workers: int = 1) -> list[dict]:
    """Run every grid cell and write ``results.csv`` (one row per cell).

    Cells are independent, so ``workers > 1`` runs them in separate processes;
    rows come back in grid order regardless.
    """
    config.validate()
    cells = expand_grid(config)
    validate_design(cells)
    root = str(run_dir) if run_dir is not None else None
    jobs = [(c, config, root) for c in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell_star, jobs))
    else:
        rows = [run_cell(*job) for job in jobs]
    if root is not None:
        write_results_csv(rows, Path(root) / "results.csv")
    return rows


def write_results_csv(rows: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in RESULT_COLUMNS})
