"""Command-line entry point: ``eeg-align <command> [options]``.

Commands
--------
preprocess      baseline / crop / downsample (and optional train-split MVNN) of an EEGPack
synth           synthetic participants plus feature banks
bank            build concat / ID / OOD feature banks
train           contrastive training run
eval            ID / OOD retrieval of a trained checkpoint
compare         paired Wilcoxon comparison of two sets of results
report          CSV / SVG summaries
convert-things  THINGS EEG2 raw ``.npy`` files -> EEGPack
matrix          run a JSON experiment grid

Exit codes: 0 success, 1 validation error (bad config, paths or data),
2 numerical/runtime abort. Errors are printed as one JSON line on stderr.
Every command that writes a directory refuses to touch a non-empty one and
records its resolved arguments in ``config.resolved.json``.
"""

from __future__ import annotations

import argparse
import fnmatch
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, EEGAlignError, FormatError, NumericalError, ValidationError

log = logging.getLogger("eeg_align")

THREADS_ENV = "EEG_ALIGN_THREADS"


class ArgumentError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors (exit 1), not argparse's default 2
    def error(self, message):
        raise ArgumentError(f"{self.prog}: {message}")


def thread_cap() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def check_fresh(path: str | os.PathLike) -> Path:
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise ConfigError(f"refusing to write into non-empty output {path}; choose a fresh directory")
    return path


def fresh_dir(path: str | os.PathLike) -> Path:
    """Create ``path`` or accept it if empty; refuse to write into existing output."""
    path = check_fresh(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_resolved(out: Path, command: str, resolved: dict) -> None:
    doc = {"command": command, "version": __version__, **resolved}
    with open(out / "config.resolved.json", "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True, default=str)


def _args_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read JSON config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    from .eeg_core import load_eegpack, preprocess_chain, save_eegpack, whiten_train_split

    epochs = load_eegpack(args.input)
    out = preprocess_chain(epochs, baseline_window_ms=tuple(args.baseline),
                           crop_window_ms=tuple(args.crop), target_hz=args.rate)
    op = None
    if args.mvnn:
        out, op = whiten_train_split(out, shrinkage=args.shrinkage)
    dest = fresh_dir(args.out)
    save_eegpack(out, dest)
    if op is not None:
        np.save(dest / "whitening.npy", op.matrix)
    write_resolved(dest, "preprocess", _args_dict(args))
    print(f"{out.n_trials} trials -> {out.n_channels} x {out.n_samples} @ {out.sampling_rate_hz:g} Hz: {dest}")
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .eeg_core import save_eegpack
    from .feature_bank import save_featbank
    from .synthlab import SynthSpec, gen_synthetic, split_banks

    dest = fresh_dir(args.out)
    base = dict(n_concepts=args.concepts, images_per_concept=args.images, repeats=args.repeats,
                n_channels=args.channels, n_samples=args.samples, feat_dim=args.feat_dim, snr=args.snr,
                concept_spread=args.spread, seed=args.seed, test_repeats=args.test_repeats,
                ood_images=args.ood_images)
    participants = {}
    for p in range(args.participants):
        pid = f"p{p + 1:02d}"
        epochs, bank = gen_synthetic(SynthSpec(**base, participant_seed=p, participant_id=pid))
        save_eegpack(epochs, dest / "eeg" / pid)
        participants[pid] = f"eeg/{pid}"
    save_featbank(bank, dest / "banks" / "per_image")
    if args.test_repeats and args.ood_images:
        train, id_bank, ood_bank = split_banks(bank)
        for name, b in (("train", train), ("id", id_bank), ("ood", ood_bank)):
            save_featbank(b, dest / "banks" / name)
        experiment = {
            "data": {"participants": participants},
            "banks": [{"source": "synthetic", "feature_mode": "visual",
                       "train": "banks/train", "id": "banks/id", "ood": "banks/ood"}],
            "train": {"epochs": 10, "batch_size": 20, "lr": 2e-4},
            "encoder": {"n_filters": 16, "temporal_kernel": 9, "pool_kernel": 9, "pool_stride": 4, "dropout": 0.0},
            "grid": {"sampler": ["ides", "average_repeats"], "seeds": [args.seed]},
        }
        (dest / "experiment.json").write_text(json.dumps(experiment, indent=1))
    write_resolved(dest, "synth", {"spec": base, "participants": args.participants})
    print(f"{args.participants} participant(s), {len(bank)} bank rows: {dest}")
    return 0


# ---------------------------------------------------------------------------
# bank
# ---------------------------------------------------------------------------


def _filtered(bank, pattern):
    from .feature_bank import select_images

    if pattern is None:
        return bank
    return select_images(bank, lambda it: it.image_id is not None and fnmatch.fnmatchcase(it.image_id, pattern))


def cmd_bank(args) -> int:
    from .feature_bank import build_id_bank, build_ood_bank, concat_multimodal, load_featbank, save_featbank

    if args.kind == "concat":
        out = concat_multimodal(load_featbank(args.visual), load_featbank(args.language), raw_concat=args.raw_concat)
    elif args.kind == "id":
        out = build_id_bank(_filtered(load_featbank(args.per_image), args.match))
    else:
        out = build_ood_bank(_filtered(load_featbank(args.per_image), args.match))
    dest = fresh_dir(args.out)
    save_featbank(out, dest)
    write_resolved(dest, f"bank {args.kind}", _args_dict(args))
    print(f"{args.kind} bank: {len(out)} x {out.dim} ({out.modality}): {dest}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_FLAGS = {
    "epochs": "epochs", "lr": "lr", "weight_decay": "weight_decay", "batch_size": "batch_size",
    "regime": "regime", "feature_mode": "feature_mode", "seed": "seed", "keep_best_val": "keep_best_val",
    "temperature_min": "temperature_min",
}
ENCODER_FLAGS = ("arch", "n_filters", "temporal_kernel", "pool_kernel", "pool_stride", "dropout", "attn_heads")


def resolve_train_config(args) -> tuple[dict, dict]:
    """Defaults < ``--config`` file < explicit flags."""
    from .trainer import TrainConfig

    file_cfg = _read_json(args.config) if args.config else {}
    train_cfg = dict(file_cfg.get("train", {k: v for k, v in file_cfg.items() if k != "encoder"}))
    enc_cfg = dict(file_cfg.get("encoder", {}))
    for flag, key in TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            train_cfg[key] = value
    sampler = dict(train_cfg.get("sampler", {}))
    if args.sampler is not None:
        sampler["method"] = args.sampler
    if args.k is not None:
        sampler["k"] = args.k
    sampler.setdefault("seed", train_cfg.get("seed", 0))
    if args.seed is not None:
        sampler["seed"] = args.seed
    train_cfg["sampler"] = sampler
    for key in ENCODER_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            enc_cfg[key] = value
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(train_cfg) - known
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    resolved = TrainConfig(**train_cfg)
    return resolved.to_dict(), enc_cfg


def cmd_train(args) -> int:
    import torch

    from .eeg_core import load_eegpack
    from .encoder import EncoderConfig
    from .feature_bank import load_featbank
    from .trainer import TrainConfig, train

    train_dict, enc_dict = resolve_train_config(args)
    cfg = TrainConfig(**train_dict)
    sets = [load_eegpack(p) for p in args.eeg]
    bank = load_featbank(args.bank)
    val_bank = load_featbank(args.val_bank) if args.val_bank else None
    first = sets[0]
    enc = EncoderConfig.from_dict({**enc_dict, "n_channels": first.n_channels, "n_samples": first.n_samples,
                                   "embed_dim": bank.dim, "init_seed": enc_dict.get("init_seed", cfg.seed)})
    dest = fresh_dir(args.out)
    write_resolved(dest, "train", {"train": train_dict, "encoder": asdict(enc), "eeg": args.eeg,
                                   "bank": args.bank, "val_bank": args.val_bank, "audit_draws": args.audit_draws})
    workers = thread_cap()
    torch.set_num_threads(workers)
    _, history = train(cfg, sets if len(sets) > 1 else sets[0], bank, enc, val_bank=val_bank, run_dir=dest,
                       audit_draws=args.audit_draws, workers=workers)
    last = history.records[-1]
    print(f"trained {len(history.records)} epoch(s): train_loss {last.train_loss:.4f}, "
          f"val_top1 {last.val_top1:.4f}, temperature {last.temperature:.4f}: {dest}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    from .eeg_core import load_eegpack
    from .encoder import load_checkpoint
    from .eval_stats import evaluate_participant, reports_to_json
    from .feature_bank import load_featbank

    ckpt = Path(args.checkpoint)
    if (ckpt / "checkpoint").is_dir():
        ckpt = ckpt / "checkpoint"
    model = load_checkpoint(ckpt)
    provenance = json.loads((ckpt / "manifest.json").read_text()).get("provenance", {})
    tcfg = provenance.get("train_config", {})
    epochs = load_eegpack(args.eeg)
    test = epochs.split("test") if any(m.split == "test" for m in epochs.meta) else None
    if test is None:
        raise ValidationError(f"{args.eeg} has no test-split trials")
    r_id, r_ood = evaluate_participant(
        model, test, load_featbank(args.id_bank), load_featbank(args.ood_bank),
        regime=tcfg.get("regime", "intraparticipant"),
        feature_mode=tcfg.get("feature_mode", "visual"),
        sampler=tcfg.get("sampler", {}).get("method", "ides"),
        label=args.label or "",
    )
    dest = fresh_dir(args.out)
    (dest / "report.json").write_text(reports_to_json([r_id, r_ood]))
    write_resolved(dest, "eval", _args_dict(args))
    for r in (r_id, r_ood):
        print(f"{r.participant_id} {r.bank_kind}: top1 {r.top1:.4f} top5 {r.top5:.4f} ({r.n_candidates} candidates)")
    return 0


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

DESIGN_COLUMNS = ("participant_id", "regime", "sampler", "feature_mode", "bank_source", "seed")


def reports_from_results(rows: list[dict], factor: str, level: str, bank_kind: str):
    """Turn ``results.csv`` rows of one factor level into reports keyed by the other design columns."""
    from .eval_stats import EvalReport

    if factor not in DESIGN_COLUMNS:
        raise ConfigError(f"factor must be one of {DESIGN_COLUMNS}, got {factor!r}")
    prefix = "id" if bank_kind == "ID" else "ood"
    out = []
    for r in rows:
        if r[factor] != level:
            continue
        key = "/".join(r[c] for c in DESIGN_COLUMNS if c != factor)
        out.append(EvalReport(
            participant_id=r["participant_id"], regime=r["regime"], feature_mode=r["feature_mode"],
            sampler=r["sampler"], bank_kind=bank_kind, top1=float(r[f"{prefix}_top1"]),
            top5=float(r[f"{prefix}_top5"]), n_candidates=int(r["n_candidates"]), label=key,
        ))
    if not out:
        raise ConfigError(f"no results rows with {factor} = {level!r}")
    return out


def cmd_compare(args) -> int:
    from .eval_stats import default_pair_key, paired_comparison, read_csv_rows, reports_from_json, write_pairs_csv

    if args.results:
        rows = [r for path in args.results for r in read_csv_rows(path)]
        runs_a = reports_from_results(rows, args.factor, args.a, args.bank)
        runs_b = reports_from_results(rows, args.factor, args.b, args.bank)
        key = lambda r: r.label  # noqa: E731
    else:
        if not (args.a_reports and args.b_reports):
            raise ConfigError("give --results (with --factor/--a/--b) or both --a-reports and --b-reports")
        def load(paths):
            return [r for p in paths for r in reports_from_json(Path(p).read_text()) if r.bank_kind == args.bank]
        runs_a, runs_b = load(args.a_reports), load(args.b_reports)
        key = default_pair_key
    rep = paired_comparison(runs_a, runs_b, pair_key=key, metric=args.metric, alternative=args.alternative)
    dest = fresh_dir(args.out)
    write_pairs_csv(rep, dest / "pairs.csv")
    (dest / "paired.json").write_text(json.dumps(rep.to_dict(), indent=1))
    write_resolved(dest, "compare", _args_dict(args))
    p = "none" if rep.p_value is None else f"{rep.p_value:.6g}"
    print(f"{len(rep.pairs)} pairs, mean gain {rep.mean_gain:+.4f}, W {rep.wilcoxon_W}, p {p}"
          + (f" ({rep.note})" if rep.note else ""))
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(args) -> int:
    from .eval_stats import PairedReport, read_csv_rows, scatter_svg, violin_svg, write_violin_csv

    if not (args.pairs or args.results):
        raise ConfigError("report needs --pairs and/or --results")
    dest = fresh_dir(args.out)
    if args.pairs:
        rows = read_csv_rows(args.pairs)
        pairs = [(r["label"], float(r["acc_a"]), float(r["acc_b"])) for r in rows]
        gain = float(np.mean([b - a for _, a, b in pairs])) if pairs else 0.0
        rep = PairedReport(pairs=pairs, mean_gain=gain, wilcoxon_W=None, p_value=None, n=len(pairs))
        (dest / "scatter.svg").write_text(scatter_svg(rep, title=args.title, xlabel=args.xlabel, ylabel=args.ylabel))
    if args.results:
        rows = [r for path in args.results for r in read_csv_rows(path)]
        violin = [(r[args.group_by], r["participant_id"], float(r[args.metric])) for r in rows]
        write_violin_csv(violin, dest / "violin.csv")
        (dest / "violin.svg").write_text(violin_svg(violin, title=args.title))
    write_resolved(dest, "report", _args_dict(args))
    print(f"report written to {dest}")
    return 0


# ---------------------------------------------------------------------------
# convert-things
# ---------------------------------------------------------------------------

CATCH_EVENT = 99999


def _load_npy_dict(path: Path) -> dict:
    try:
        return np.load(path, allow_pickle=True).item()
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def things_epochs(raw: dict, img_concepts, img_files, split: str, tmin_ms: float, tmax_ms: float, repeat_counter: dict):
    """Cut stimulus-locked epochs out of one THINGS EEG2 raw recording."""
    data = np.asarray(raw["raw_eeg_data"])
    ch_names = list(raw["ch_names"])
    ch_types = list(raw["ch_types"])
    sfreq = float(raw["sfreq"])
    stim_rows = [i for i, t in enumerate(ch_types) if t == "stim"]
    if len(stim_rows) != 1:
        raise FormatError(f"expected one stim channel, found {len(stim_rows)}")
    eeg_rows = [i for i, t in enumerate(ch_types) if t == "eeg"]
    stim = data[stim_rows[0]]
    onsets = np.flatnonzero((stim[1:] != 0) & (stim[:-1] == 0)) + 1
    if stim[0] != 0:
        onsets = np.concatenate([[0], onsets])
    start = int(round(tmin_ms * sfreq / 1000.0))
    length = int(round((tmax_ms - tmin_ms) * sfreq / 1000.0))
    trials, meta = [], []
    skipped = 0
    for onset in onsets:
        code = int(stim[onset])
        if code == CATCH_EVENT:
            continue
        lo = onset + start
        if lo < 0 or lo + length > data.shape[1] or not 1 <= code <= len(img_files):
            skipped += 1
            continue
        concept = str(img_concepts[code - 1])
        image = Path(str(img_files[code - 1])).stem
        key = (concept, image)
        repeat = repeat_counter.get(key, 0)
        repeat_counter[key] = repeat + 1
        trials.append(data[eeg_rows, lo : lo + length])
        meta.append((concept, image, repeat, split))
    if skipped:
        log.warning("skipped %d event(s) outside the recording or with unknown codes", skipped)
    return [ch_names[i] for i in eeg_rows], sfreq, trials, meta


def cmd_convert_things(args) -> int:
    from .eeg_core import EpochSet, TrialMeta, save_eegpack

    root = Path(args.root)
    meta_path = Path(args.metadata) if args.metadata else root / "image_metadata.npy"
    img_meta = _load_npy_dict(meta_path)
    sub_dir = root / args.participant
    sessions = sorted(p for p in sub_dir.glob("ses-*") if p.is_dir())
    if not sessions:
        raise FormatError(f"no ses-* directories under {sub_dir}")
    counter: dict = {}
    all_trials, all_meta, channels, rate = [], [], None, None
    for ses in sessions:
        for fname, split, prefix in (("raw_eeg_training.npy", "train", "train"), ("raw_eeg_test.npy", "test", "test")):
            path = ses / fname
            if not path.exists():
                continue
            ch, sfreq, trials, meta = things_epochs(
                _load_npy_dict(path), img_meta[f"{prefix}_img_concepts"], img_meta[f"{prefix}_img_files"],
                split, args.tmin, args.tmax, counter,
            )
            if channels is None:
                channels, rate = ch, sfreq
            elif ch != channels or sfreq != rate:
                raise FormatError(f"{path} has a different channel layout or rate")
            all_trials.extend(trials)
            all_meta.extend(meta)
    if not all_trials:
        raise FormatError(f"no epochs extracted for {args.participant}")
    epochs = EpochSet(args.participant, rate, float(args.tmin), channels, np.stack(all_trials),
                      [TrialMeta(*m) for m in all_meta])
    dest = fresh_dir(args.out)
    save_eegpack(epochs, dest)
    write_resolved(dest, "convert-things", _args_dict(args))
    print(f"{epochs.n_trials} epochs, {epochs.n_channels} channels x {epochs.n_samples} samples: {dest}")
    return 0


# ---------------------------------------------------------------------------
# matrix
# ---------------------------------------------------------------------------


def cmd_matrix(args) -> int:
    import torch

    from .experiments import ExperimentConfig, run_matrix

    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config.grid["seeds"] = [args.seed]
    out = args.out or config.output.get("run_dir")
    if not out:
        raise ConfigError("no output directory: pass --out or set output.run_dir")
    config.validate()
    dest = fresh_dir(out)
    write_resolved(dest, "matrix", {"experiment": config.to_dict(), "base_dir": config.base_dir})
    torch.set_num_threads(1)
    rows = run_matrix(config, dest, workers=thread_cap())
    print(f"{len(rows)} run(s): {dest / 'results.csv'}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _window(text):
    return float(text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eeg-align", description="EEG-to-feature-bank alignment toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="baseline-correct, crop and downsample an EEGPack")
    p.add_argument("--input", required=True, help="source EEGPack directory")
    p.add_argument("--out", required=True, help="fresh output directory")
    p.add_argument("--baseline", nargs=2, type=_window, default=[-200.0, 0.0], metavar=("START", "END"),
                   help="baseline window in ms (default -200 0)")
    p.add_argument("--crop", nargs=2, type=_window, default=[0.0, 1000.0], metavar=("START", "END"),
                   help="kept window in ms (default 0 1000)")
    p.add_argument("--rate", type=float, default=250.0, help="target sampling rate in Hz (default 250)")
    p.add_argument("--mvnn", action="store_true", help="whiten with noise covariance fitted on the train split")
    p.add_argument("--shrinkage", type=float, default=0.1, help="MVNN shrinkage toward scaled identity")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate synthetic participants and feature banks")
    p.add_argument("--out", required=True)
    p.add_argument("--concepts", type=int, default=20)
    p.add_argument("--images", type=int, default=5, help="training images per concept")
    p.add_argument("--repeats", type=int, default=4)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--feat-dim", type=int, default=32)
    p.add_argument("--snr", type=float, default=0.5)
    p.add_argument("--spread", type=float, default=0.3, help="within-concept image jitter")
    p.add_argument("--test-repeats", type=int, default=20, help="repeats of the per-concept test image")
    p.add_argument("--ood-images", type=int, default=3, help="unseen images per concept for the OOD bank")
    p.add_argument("--participants", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bank", help="build feature banks")
    bank_sub = p.add_subparsers(dest="kind", required=True, parser_class=_Parser)
    b = bank_sub.add_parser("concat", help="visual + language -> multimodal")
    b.add_argument("--visual", required=True)
    b.add_argument("--language", required=True)
    b.add_argument("--raw-concat", action="store_true", help="skip per-modality normalization")
    b.add_argument("--out", required=True)
    for kind, text in (("id", "one shown-image vector per concept"), ("ood", "average unseen-image vectors per concept")):
        b = bank_sub.add_parser(kind, help=text)
        b.add_argument("--per-image", required=True, help="per-image FeatBank")
        b.add_argument("--match", help="keep only image ids matching this glob")
        b.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bank)

    p = sub.add_parser("train", help="contrastive training run",
                       description="Flags override keys of --config, which override defaults.")
    p.add_argument("--eeg", nargs="+", required=True, help="EEGPack(s); several for interparticipant")
    p.add_argument("--bank", required=True, help="training FeatBank with one row per (concept, image)")
    p.add_argument("--val-bank", help="bank covering held-out images (default: --bank)")
    p.add_argument("--config", help="JSON with 'train' and optional 'encoder' sections")
    p.add_argument("--out", required=True, help="fresh run directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--sampler", choices=["ides", "average_repeats"])
    p.add_argument("--k", type=int, help="IDES draw size")
    p.add_argument("--regime", choices=["intraparticipant", "interparticipant"])
    p.add_argument("--feature-mode", choices=["visual", "multimodal"])
    p.add_argument("--temperature-min", type=float)
    p.add_argument("--keep-best-val", action="store_true", default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--arch", choices=["conv_projector", "attention_projector"])
    p.add_argument("--n-filters", type=int)
    p.add_argument("--temporal-kernel", type=int)
    p.add_argument("--pool-kernel", type=int)
    p.add_argument("--pool-stride", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--attn-heads", type=int)
    p.add_argument("--audit-draws", action="store_true", help="write draws.jsonl with every draw's trial indices")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ID/OOD retrieval of a trained checkpoint")
    p.add_argument("--checkpoint", required=True, help="train run directory or its checkpoint/")
    p.add_argument("--eeg", required=True, help="EEGPack with test-split trials")
    p.add_argument("--id-bank", required=True)
    p.add_argument("--ood-bank", required=True)
    p.add_argument("--label")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="paired Wilcoxon comparison")
    p.add_argument("--results", nargs="+", help="results.csv file(s) from 'matrix'")
    p.add_argument("--factor", default="sampler", help="design column that differs between A and B")
    p.add_argument("--a", default="average_repeats", help="factor level for A")
    p.add_argument("--b", default="ides", help="factor level for B")
    p.add_argument("--a-reports", nargs="+", help="report.json files from 'eval' for A")
    p.add_argument("--b-reports", nargs="+", help="report.json files from 'eval' for B")
    p.add_argument("--bank", choices=["ID", "OOD"], default="OOD")
    p.add_argument("--metric", choices=["top1", "top5"], default="top1")
    p.add_argument("--alternative", choices=["two-sided", "greater", "less"], default="two-sided")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="scatter / violin summaries")
    p.add_argument("--pairs", help="pairs.csv from 'compare'")
    p.add_argument("--results", nargs="+", help="results.csv file(s) for a violin summary")
    p.add_argument("--group-by", default="sampler")
    p.add_argument("--metric", default="ood_top1")
    p.add_argument("--title", default="")
    p.add_argument("--xlabel", default="A top-1")
    p.add_argument("--ylabel", default="B top-1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("convert-things", help="THINGS EEG2 raw recordings -> EEGPack")
    p.add_argument("--root", required=True, help="dataset root holding sub-XX/ses-YY/raw_eeg_*.npy")
    p.add_argument("--participant", required=True, help="e.g. sub-01")
    p.add_argument("--metadata", help="image_metadata.npy (default: ROOT/image_metadata.npy)")
    p.add_argument("--tmin", type=float, default=-200.0, help="epoch start in ms (default -200)")
    p.add_argument("--tmax", type=float, default=1000.0, help="epoch end in ms (default 1000)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert_things)

    p = sub.add_parser("matrix", help="run a JSON experiment grid")
    p.add_argument("--config", required=True, help="experiment JSON")
    p.add_argument("--out", help="fresh run directory (default: output.run_dir)")
    p.add_argument("--seed", type=int, help="replace the grid's replicate seeds with this one")
    p.set_defaults(func=cmd_matrix)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    msg = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(msg), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "out", None):
            check_fresh(args.out)  # fail before any work is done
        return args.func(args)
    except ValidationError as exc:
        return _fail(exc, 1)
    except NumericalError as exc:
        return _fail(exc, 2)
    except (FileNotFoundError, NotADirectoryError, PermissionError) as exc:
        return _fail(exc, 1)
    except EEGAlignError as exc:
        return _fail(exc, 2)


if __name__ == "__main__":
    sys.exit(main())
