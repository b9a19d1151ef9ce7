"""Zero-shot retrieval metrics, paired network comparisons and test statistics."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import (
    CoverageError,
    DegenerateInputError,
    LookupFailure,
    PairingError,
    ValidationError,
)
from .feature_bank import FeatureBank


@dataclass
class EvalReport:
    participant_id: str
    regime: str
    feature_mode: str
    sampler: str
    bank_kind: str
    top1: float
    top5: float
    n_candidates: int
    per_concept_rank: dict[str, int] = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        if self.top1 > self.top5 + 1e-12:
            raise ValidationError("top1 cannot exceed top5")
        if any(not 1 <= r <= self.n_candidates for r in self.per_concept_rank.values()):
            raise ValidationError("rank outside [1, n_candidates]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


@dataclass
class PairedReport:
    pairs: list[tuple[str, float, float]]
    mean_gain: float
    wilcoxon_W: float | None
    p_value: float | None
    n: int
    note: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pairs"] = [list(p) for p in self.pairs]
        return d


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------


def retrieval_ranks(similarity: np.ndarray, true_cols: Sequence[int]) -> np.ndarray:
    """1-based rank of each row's true column.

    A candidate outranks the true one if its score is strictly larger, or equal
    and it comes earlier in bank order.
    """
    sims = np.asarray(similarity, dtype=np.float64)
    cols = np.asarray(true_cols, dtype=np.int64)
    true = sims[np.arange(len(cols)), cols][:, None]
    earlier = np.arange(sims.shape[1])[None, :] < cols[:, None]
    beats = (sims > true) | ((sims == true) & earlier)
    return 1 + beats.sum(axis=1)


def _true_columns(bank: FeatureBank, true_ids: Sequence[str]) -> np.ndarray:
    col_of = {}
    for r, item in enumerate(bank.items):
        col_of.setdefault(item.concept_id, r)
    try:
        return np.array([col_of[c] for c in true_ids], dtype=np.int64)
    except KeyError as exc:
        raise LookupFailure(f"true concept {exc.args[0]!r} is not in the bank") from None


def concept_ranks(embeddings: np.ndarray, bank: FeatureBank, true_ids: Sequence[str]) -> np.ndarray:
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.shape[0] != len(true_ids):
        raise ValidationError(f"{emb.shape[0]} embeddings but {len(true_ids)} labels")
    cols = _true_columns(bank, true_ids)
    return retrieval_ranks(emb @ bank.vectors.astype(np.float64).T, cols)


def topk_accuracy(embeddings: np.ndarray, bank: FeatureBank, true_ids: Sequence[str], k: int) -> float:
    """Fraction of rows whose true concept ranks within the top ``k`` by cosine similarity."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    bank.require_normalized()
    ranks = concept_ranks(embeddings, bank, true_ids)
    return float(np.mean(ranks <= k))


def evaluate_participant(
    model,
    test_epochs,
    id_bank: FeatureBank,
    ood_bank: FeatureBank,
    regime: str = "intraparticipant",
    feature_mode: str = "visual",
    sampler: str = "ides",
    label: str = "",
) -> tuple[EvalReport, EvalReport]:
    """Average test repeats per concept, embed, and score against ID and OOD banks."""
    from .encoder import embed_numpy
    from .sampling import test_aggregate

    averaged = test_aggregate(test_epochs)
    concepts = list(averaged)
    for kind, bank in (("ID", id_bank), ("OOD", ood_bank)):
        missing = [c for c in concepts if not bank.has(c, None)]
        if missing:
            raise CoverageError(f"{kind} bank lacks {len(missing)} test concept(s), e.g. {missing[0]!r}")
        if model.config.embed_dim != bank.dim:
            raise CoverageError(f"{kind} bank dim {bank.dim} != encoder embed_dim {model.config.embed_dim}")
    emb = embed_numpy(model, np.stack([averaged[c] for c in concepts]))
    reports = []
    for kind, bank in (("ID", id_bank), ("OOD", ood_bank)):
        bank.require_normalized()
        ranks = concept_ranks(emb, bank, concepts)
        reports.append(
            EvalReport(
                participant_id=test_epochs.participant_id,
                regime=regime,
                feature_mode=feature_mode,
                sampler=sampler,
                bank_kind=kind,
                top1=float(np.mean(ranks <= 1)),
                top5=float(np.mean(ranks <= 5)),
                n_candidates=len(bank),
                per_concept_rank={c: int(r) for c, r in zip(concepts, ranks)},
                label=label,
            )
        )
    return reports[0], reports[1]


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------

EXACT_MAX_N = 25


def _signed_ranks(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(f"paired samples must be 1-D of equal length, got {a.shape} and {b.shape}")
    d = b - a
    d = d[d != 0]
    if d.size == 0:
        raise DegenerateInputError("all paired differences are zero")
    ranks = stats.rankdata(np.abs(d))  # mid-ranks for ties
    return d, ranks


def exact_signed_rank_cdf(ranks: np.ndarray) -> tuple[np.ndarray, int]:
    """Null distribution of the positive-rank sum for the given (mid-)ranks.

    Ranks are doubled so mid-ranks become integers; returns counts over
    doubled sums ``0..2*sum(ranks)`` and the number of sign patterns ``2**n``.
    """
    doubled = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    reach = 0
    for r in doubled:
        shifted = counts[: reach + 1].copy()
        counts[r : r + reach + 1] += shifted
        reach += r
    return counts, 2 ** len(doubled)


def wilcoxon_signed_rank(
    a: Sequence[float],
    b: Sequence[float],
    mode: str = "auto",
    alternative: str = "two-sided",
) -> tuple[float, float]:
    """Paired signed-rank test on ``b - a``.

    Zero differences are dropped; tied magnitudes get mid-ranks. ``W`` is the
    smaller of the positive and negative rank sums. ``mode="exact"`` enumerates
    the sign-flip distribution by dynamic programming; ``"approx"`` uses the
    normal approximation with continuity and tie correction; ``"auto"`` picks
    exact for ``n <= 25``. ``alternative`` is ``"two-sided"``, ``"greater"``
    (b tends to exceed a) or ``"less"``.
    """
    if mode not in ("exact", "approx", "auto"):
        raise ValidationError(f"unknown mode {mode!r}")
    if alternative not in ("two-sided", "greater", "less"):
        raise ValidationError(f"unknown alternative {alternative!r}")
    if len(a) != len(b):
        raise ValidationError(f"length mismatch: {len(a)} vs {len(b)}")
    d, ranks = _signed_ranks(a, b)
    n = d.size
    if n < 4:
        raise ValidationError(f"need at least 4 non-zero differences, got {n}")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if mode == "auto":
        mode = "exact" if n <= EXACT_MAX_N else "approx"

    if mode == "exact":
        counts, patterns = exact_signed_rank_cdf(ranks)
        cum = np.cumsum(counts)

        def p_le(x: float) -> float:
            idx = int(math.floor(2 * x + 1e-9))
            return float(cum[min(idx, len(cum) - 1)] / patterns) if idx >= 0 else 0.0

        total = float(ranks.sum())
        if alternative == "two-sided":
            p = min(1.0, 2.0 * p_le(w))
        elif alternative == "greater":
            p = p_le(total - w_plus)  # P(W+ >= w_plus) by symmetry
        else:
            p = p_le(w_plus)
        return w, p

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    sd = math.sqrt(var)
    if alternative == "two-sided":
        z = max(abs(w_plus - mean) - 0.5, 0.0) / sd
        p = min(1.0, 2.0 * stats.norm.sf(z))
    elif alternative == "greater":
        p = float(stats.norm.sf((w_plus - mean - 0.5) / sd))
    else:
        p = float(stats.norm.cdf((w_plus - mean + 0.5) / sd))
    return w, float(p)


# ---------------------------------------------------------------------------
# Paired comparisons
# ---------------------------------------------------------------------------


def default_pair_key(report: EvalReport) -> tuple:
    """Match runs of one participant/regime/bank; the compared factor is left out."""
    return (report.participant_id, report.regime, report.bank_kind)


def paired_comparison(
    runs_a: Sequence[EvalReport],
    runs_b: Sequence[EvalReport],
    pair_key: Callable[[EvalReport], tuple] = default_pair_key,
    metric: str = "top1",
    alternative: str = "two-sided",
) -> PairedReport:
    """Pair reports by key and test whether B's accuracy differs from A's."""
    index_b: dict = {}
    for r in runs_b:
        index_b.setdefault(pair_key(r), []).append(r)
    pairs = []
    for r in runs_a:
        key = pair_key(r)
        match = index_b.get(key, [])
        if len(match) != 1:
            raise PairingError(f"key {key!r} has {len(match)} matches in runs_b, expected exactly 1")
        label = "/".join(str(k) for k in key) if isinstance(key, tuple) else str(key)
        pairs.append((label, float(getattr(r, metric)), float(getattr(match[0], metric))))
    if len(pairs) != len(runs_b):
        raise PairingError(f"{len(runs_b) - len(pairs)} report(s) in runs_b have no partner")
    acc_a = np.array([p[1] for p in pairs])
    acc_b = np.array([p[2] for p in pairs])
    mean_gain = float(np.mean(acc_b - acc_a)) if pairs else 0.0
    diffs = acc_b - acc_a
    n_nonzero = int(np.count_nonzero(diffs))
    try:
        w, p = wilcoxon_signed_rank(acc_a, acc_b, mode="auto", alternative=alternative)
        note = ""
    except (DegenerateInputError, ValidationError) as exc:
        w, p, note = None, None, str(exc)
    return PairedReport(pairs=pairs, mean_gain=mean_gain, wilcoxon_W=w, p_value=p, n=n_nonzero, note=note)


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("pearson_r needs two 1-D sequences of equal length")
    if x.size < 3:
        raise ValidationError("pearson_r needs at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("zero variance input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


def write_pairs_csv(report: PairedReport, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "acc_a", "acc_b"])
        for label, a, b in report.pairs:
            w.writerow([label, repr(a), repr(b)])


def write_violin_csv(rows: Sequence[tuple[str, str, float]], path: str | os.PathLike) -> None:
    """``rows`` are (group, participant, top1) triples."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group", "participant", "top1"])
        for g, pid, acc in rows:
            w.writerow([g, pid, repr(float(acc))])


def read_csv_rows(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def reports_to_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True)


def reports_from_json(text: str) -> list[EvalReport]:
    data = json.loads(text)
    if isinstance(data, dict):
        data = [data]
    return [EvalReport.from_dict(d) for d in data]


def scatter_svg(report: PairedReport, title: str = "", xlabel: str = "A top-1", ylabel: str = "B top-1") -> str:
    """Paired scatter with the identity line, as SVG text."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    a = [p[1] for p in report.pairs]
    b = [p[2] for p in report.pairs]
    fig, ax = plt.subplots(figsize=(4, 4))
    lo = min(a + b + [0.0])
    hi = max(a + b + [1e-3])
    ax.plot([lo, hi], [lo, hi], "--", color="green", lw=1)
    ax.scatter(a, b, facecolor="0.6", edgecolor="k", s=18)
    if a:
        ax.plot([np.mean(a)], [np.mean(b)], "kx", ms=10, mew=2)
    p = "n/a" if report.p_value is None else f"{report.p_value:.3g}"
    ax.set_title(title or f"n={report.n}, p={p}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    buf = io.StringIO()
    fig.savefig(buf, format="svg")
    plt.close(fig)
    return buf.getvalue()


def violin_svg(rows: Sequence[tuple[str, str, float]], title: str = "") -> str:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    groups = list(dict.fromkeys(g for g, _, _ in rows))
    data = [[acc for g2, _, acc in rows if g2 == g] for g in groups]
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(groups), 4))
    if groups:
        ax.violinplot(data, showmeans=True)
        ax.set_xticks(range(1, len(groups) + 1), groups)
    ax.set_ylabel("top-1")
    ax.set_title(title)
    buf = io.StringIO()
    fig.savefig(buf, format="svg")
    plt.close(fig)
    return buf.getvalue()
