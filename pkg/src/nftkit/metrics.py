"""Similarity-distribution metrics and retrieval evaluation.

The Comprehensive Variance Index scores how separable a batch of
image-text pairs is: for row-aligned feature matrices I and T it
blends the mean row variances of the three inner-product matrices
S_II, S_TT and S_TI,

    CVI = (1/2N) * (alpha * sum_i var(S_II_i)
                    + (1 - alpha) * sum_i var(S_TT_i)
                    + sum_i var(S_TI_i))

with population variances over full rows.  Low CVI means near-uniform
similarity scores and therefore hard retrieval.  The blend weight
alpha is calibrated by minimizing the Jensen-Shannon divergence
between the L1-normalized per-collection CVI vector and the
per-collection top-1 accuracy vector.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embeddings import EmbeddingMatrix, SimilarityMatrix, similarity
from .errors import NftkitError

__all__ = [
    "CviParams",
    "RetrievalReport",
    "CviReport",
    "CviRow",
    "DistributionPair",
    "CollectionSummary",
    "AlphaSweepResult",
    "row_variance",
    "cvi",
    "cvi_from_summary",
    "summarize_collection",
    "jsd",
    "topk_accuracy",
    "alpha_sweep",
    "cvi_report",
    "Misaligned",
    "LengthMismatch",
    "NotNormalized",
    "TruthMissing",
    "DegenerateDistribution",
]

DEFAULT_ALPHA = 0.7
DEFAULT_KS = (1, 5, 10)


class Misaligned(NftkitError):
    """Image and text matrices are not row-aligned."""


class LengthMismatch(NftkitError):
    pass


class NotNormalized(NftkitError):
    """Vector is not a probability distribution."""


class TruthMissing(NftkitError):
    """A query has no ground-truth target among the columns."""


class DegenerateDistribution(NftkitError):
    """An all-zero vector cannot be L1-normalized."""


@dataclass(frozen=True)
class CviParams:
    """Blend weight between image-side and text-side variance."""

    alpha: float = DEFAULT_ALPHA

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


def row_variance(s: SimilarityMatrix | np.ndarray) -> np.ndarray:
    """Population variance of each full matrix row, in float64."""
    values = s.values if isinstance(s, SimilarityMatrix) else s
    return np.asarray(values, dtype=np.float64).var(axis=1, ddof=0)


@dataclass(frozen=True)
class CollectionSummary:
    """Per-collection variance sums, sufficient to evaluate CVI at any alpha."""

    collection: str
    var_ii_sum: float
    var_tt_sum: float
    var_ti_sum: float
    n: int
    top1: float | None = None


def _variance_sums(images: EmbeddingMatrix, texts: EmbeddingMatrix) -> tuple[float, float, float]:
    if images.ids != texts.ids:
        raise Misaligned("image and text row ids differ")
    s_ii = similarity(images, images)
    s_tt = similarity(texts, texts)
    s_ti = similarity(texts, images)
    return (
        float(row_variance(s_ii).sum()),
        float(row_variance(s_tt).sum()),
        float(row_variance(s_ti).sum()),
    )


def cvi_from_summary(s: CollectionSummary, alpha: float) -> float:
    blend = alpha * s.var_ii_sum + (1.0 - alpha) * s.var_tt_sum + s.var_ti_sum
    return blend / (2.0 * s.n)


def cvi(images: EmbeddingMatrix, texts: EmbeddingMatrix, params: CviParams = CviParams()) -> float:
    """Comprehensive Variance Index of one row-aligned batch.

    Inputs are expected to be L2-normalized (the scores are cosine
    similarities); rows must be aligned pairwise, same token order.
    """
    a, b, c = _variance_sums(images, texts)
    summary = CollectionSummary("", a, b, c, images.rows)
    return cvi_from_summary(summary, params.alpha)


def summarize_collection(
    collection: str,
    images: EmbeddingMatrix,
    texts: EmbeddingMatrix,
    *,
    with_top1: bool = True,
) -> CollectionSummary:
    """Variance sums plus within-collection top-1 for alpha calibration."""
    a, b, c = _variance_sums(images, texts)
    top1 = None
    if with_top1:
        report = topk_accuracy(
            similarity(texts, images), {i: i for i in texts.ids}, ks=(1,)
        )
        top1 = report.accuracies[1]
    return CollectionSummary(collection, a, b, c, images.rows, top1)


@dataclass(frozen=True)
class DistributionPair:
    """Two aligned probability vectors."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.p, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        if p.shape != q.shape or p.ndim != 1:
            raise LengthMismatch(f"shapes {p.shape} and {q.shape}")
        for name, vec in (("P", p), ("Q", q)):
            if (vec < 0).any():
                raise NotNormalized(f"{name} has negative entries")
            if abs(float(vec.sum()) - 1.0) > 1e-9:
                raise NotNormalized(f"{name} sums to {vec.sum()}, expected 1")

    @classmethod
    def from_raw(cls, p: Sequence[float], q: Sequence[float]) -> "DistributionPair":
        """L1-normalize two nonnegative vectors into distributions."""
        p = np.asarray(p, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        if p.shape != q.shape:
            raise LengthMismatch(f"shapes {p.shape} and {q.shape}")
        out = []
        for name, vec in (("P", p), ("Q", q)):
            if (vec < 0).any():
                raise NotNormalized(f"{name} has negative entries")
            total = float(vec.sum())
            if total <= 0.0:
                raise DegenerateDistribution(f"{name} sums to zero")
            out.append(vec / total)
        return cls(out[0], out[1])


def _kl(p: np.ndarray, m: np.ndarray, log_base: float) -> float:
    # terms with p_i == 0 contribute nothing; m_i == 0 implies p_i == 0
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz] / m[nz]) / np.log(log_base))))


def jsd(d: DistributionPair, log_base: float = 2.0) -> float:
    """Jensen-Shannon divergence; bounded in [0, 1] with base-2 logs."""
    m = 0.5 * (d.p + d.q)
    value = 0.5 * _kl(d.p, m, log_base) + 0.5 * _kl(d.q, m, log_base)
    # clip the negative epsilon that float cancellation can leave at P == Q
    return max(value, 0.0)


@dataclass(frozen=True)
class RetrievalReport:
    """Per-query ranks and top-k accuracies (percentages)."""

    ranks: Mapping[str, int]
    accuracies: Mapping[int, float]
    scope: str = "global"

    def __post_init__(self) -> None:
        ks = sorted(self.accuracies)
        for lo, hi in zip(ks, ks[1:]):
            if self.accuracies[lo] > self.accuracies[hi] + 1e-12:
                raise ValueError(f"top{lo} > top{hi}")
        for k, acc in self.accuracies.items():
            if not 0.0 <= acc <= 100.0:
                raise ValueError(f"top{k} accuracy {acc} outside [0, 100]")

    @property
    def n_queries(self) -> int:
        return len(self.ranks)


def topk_accuracy(
    s: SimilarityMatrix,
    truth: Mapping[str, str],
    ks: Sequence[int] = DEFAULT_KS,
    *,
    scope: str = "global",
) -> RetrievalReport:
    """Rank every query's true target under descending similarity.

    Queries are rows (texts), candidates are columns (images).  Ties
    break by ascending column id so reports are deterministic across
    platforms.  ``truth`` maps query id to target column id.
    """
    col_pos = {cid: j for j, cid in enumerate(s.right_ids)}
    # tie-break permutation: position of each column in ascending-id order
    id_order = np.empty(s.n, dtype=np.int64)
    for order, j in enumerate(sorted(range(s.n), key=lambda j: s.right_ids[j])):
        id_order[j] = order
    values = s.values
    ranks: dict[str, int] = {}
    for i, qid in enumerate(s.left_ids):
        target = truth.get(qid)
        if target is None or target not in col_pos:
            raise TruthMissing(f"query {qid!r} has no truth target among columns")
        t = col_pos[target]
        row = values[i]
        better = int(np.count_nonzero(row > row[t]))
        tied = np.nonzero(row == row[t])[0]
        tied_before = int(np.count_nonzero(id_order[tied] < id_order[t]))
        ranks[qid] = 1 + better + tied_before
    n = len(ranks)
    rank_arr = np.fromiter(ranks.values(), dtype=np.int64, count=n)
    accuracies = {
        int(k): 100.0 * float(np.count_nonzero(rank_arr <= k)) / n for k in ks
    }
    return RetrievalReport(ranks, accuracies, scope)


@dataclass(frozen=True)
class AlphaSweepResult:
    """JSD-vs-alpha curve with its grid argmin (ties pick smallest alpha)."""

    curve: tuple[tuple[float, float], ...]
    best_alpha: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["alpha", "jsd"])
        for alpha, value in self.curve:
            writer.writerow([f"{alpha:.6g}", f"{value:.12g}"])
        return buf.getvalue()


def alpha_sweep(
    summaries: Sequence[CollectionSummary], grid: Sequence[float]
) -> AlphaSweepResult:
    """Find the alpha whose CVI distribution best matches top-1 accuracy.

    For each grid alpha, per-collection CVIs and top-1 accuracies are
    L1-normalized across collections and compared by JSD.
    """
    if len(summaries) < 2:
        raise ValueError("alpha sweep needs at least two collections")
    for alpha in grid:
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"grid alpha {alpha} outside [0, 1]")
    top1 = np.array([s.top1 for s in summaries], dtype=np.float64)
    if any(s.top1 is None for s in summaries):
        raise ValueError("every summary needs a top1 value")
    curve: list[tuple[float, float]] = []
    for alpha in grid:
        cvis = np.array(
            [cvi_from_summary(s, alpha) for s in summaries], dtype=np.float64
        )
        pair = DistributionPair.from_raw(cvis, top1)
        curve.append((float(alpha), jsd(pair)))
    best = min(curve, key=lambda item: (item[1], item[0]))
    return AlphaSweepResult(tuple(curve), best[0])


@dataclass(frozen=True)
class CviRow:
    collection: str
    cvi: float
    n: int
    topk: Mapping[int, float] = field(default_factory=dict)


@dataclass(frozen=True)
class CviReport:
    """Per-collection CVI values, ascending (hardest retrieval first)."""

    rows: tuple[CviRow, ...]
    alpha: float

    def to_csv(self) -> str:
        ks = sorted({k for row in self.rows for k in row.topk})
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["Collection/Category"] + [f"Top{k}" for k in ks] + ["CVI"])
        for row in self.rows:
            cells = [row.collection]
            cells += [f"{row.topk[k]:.4f}" if k in row.topk else "" for k in ks]
            cells.append(f"{row.cvi:.6g}")
            writer.writerow(cells)
        return buf.getvalue()

    def to_jsonl(self) -> str:
        lines = []
        for row in self.rows:
            lines.append(
                json.dumps(
                    {
                        "collection": row.collection,
                        "cvi": row.cvi,
                        "n": row.n,
                        "topk": {str(k): v for k, v in sorted(row.topk.items())},
                    },
                    sort_keys=True,
                )
            )
        return "\n".join(lines) + "\n"


def cvi_report(
    batches: Iterable[tuple[str, EmbeddingMatrix, EmbeddingMatrix]],
    params: CviParams = CviParams(),
    *,
    topk: Sequence[int] = (),
) -> CviReport:
    """One CVI row per collection, with optional within-collection top-k."""
    rows = []
    for name, images, texts in batches:
        value = cvi(images, texts, params)
        accs: dict[int, float] = {}
        if topk:
            report = topk_accuracy(
                similarity(texts, images), {i: i for i in texts.ids}, ks=topk
            )
            accs = dict(report.accuracies)
        rows.append(CviRow(name, value, images.rows, accs))
    rows.sort(key=lambda r: (r.cvi, r.collection))
    return CviReport(tuple(rows), params.alpha)


def retrieval_report_csv(reports: Mapping[str, RetrievalReport]) -> str:
    """CSV with one row per scope; columns follow the topk headers."""
    ks = sorted({k for rep in reports.values() for k in rep.accuracies})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["collection", "queries"] + [f"top{k}" for k in ks])
    for name in sorted(reports):
        rep = reports[name]
        writer.writerow(
            [name, rep.n_queries]
            + [f"{rep.accuracies[k]:.4f}" if k in rep.accuracies else "" for k in ks]
        )
    return buf.getvalue()
