"""Ranked-retrieval and classification quality measures.

Precision/recall curves, interpolated precision, the 11-point interpolated
average precision, (mean) average precision and classification accuracy.
Relevance is binary; relevant images missing from a (possibly truncated)
ranking contribute precision 0 to average precision.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

from .store import GroundTruthTable, Ranking

__all__ = [
    "PrCurve",
    "pr_curve",
    "interpolated_precision",
    "eleven_point_ap",
    "average_precision",
    "mean_average_precision",
    "accuracy",
    "evaluation_report",
    "evaluation_csv",
]

ELEVEN_LEVELS = tuple(i / 10 for i in range(11))


@dataclass(frozen=True)
class PrCurve:
    """(recall, precision) at every rank of one ranking."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple((float(r), float(p)) for r, p in self.points))


def pr_curve(ranking: Ranking, relevant: frozenset[str] | set[str]) -> PrCurve:
    """Precision and recall after each rank."""
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    hits = 0
    points = []
    for rank, (image_id, _) in enumerate(ranking.items, start=1):
        if image_id in relevant:
            hits += 1
        points.append((hits / len(relevant), hits / rank))
    return PrCurve(tuple(points))


def interpolated_precision(curve: PrCurve, recall_level: float) -> float:
    """Highest precision at any recall >= the given level; 0 when unreachable."""
    if not 0.0 <= recall_level <= 1.0:
        raise ValueError(f"recall level must be in [0, 1], got {recall_level}")
    best = 0.0
    for recall, precision in curve.points:
        if recall >= recall_level and precision > best:
            best = precision
    return best


def average_precision(ranking: Ranking, relevant: frozenset[str] | set[str]) -> float:
    """Mean of precision at each relevant document's rank; unretrieved
    relevant documents count as precision 0."""
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    hits = 0
    total = 0.0
    for rank, (image_id, _) in enumerate(ranking.items, start=1):
        if image_id in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def _relevant_for(ranking: Ranking, truth: GroundTruthTable) -> frozenset[str]:
    if ranking.query_id not in truth:
        raise KeyError(f"query {ranking.query_id!r} missing from ground truth")
    return truth.relevant(ranking.query_id)


def eleven_point_ap(
    rankings: Sequence[Ranking], truth: GroundTruthTable
) -> tuple[float, ...]:
    """Mean interpolated precision over queries at recall 0.0, 0.1, ..., 1.0."""
    if not rankings:
        raise ValueError("need at least one ranking")
    sums = [0.0] * 11
    for ranking in rankings:
        curve = pr_curve(ranking, _relevant_for(ranking, truth))
        for i, level in enumerate(ELEVEN_LEVELS):
            sums[i] += interpolated_precision(curve, level)
    return tuple(s / len(rankings) for s in sums)


def mean_average_precision(rankings: Sequence[Ranking], truth: GroundTruthTable) -> float:
    if not rankings:
        raise ValueError("need at least one ranking")
    total = 0.0
    for ranking in rankings:
        total += average_precision(ranking, _relevant_for(ranking, truth))
    return total / len(rankings)


def accuracy(predictions: Sequence, labels: Sequence) -> float:
    """Fraction of positions where prediction equals label."""
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} vs {len(labels)}")
    if not predictions:
        raise ValueError("need at least one prediction")
    correct = sum(1 for p, t in zip(predictions, labels) if p == t)
    return correct / len(predictions)


def _rows(rankings, truth, reductions):
    rows = []
    for ranking in rankings:
        ap = average_precision(ranking, _relevant_for(ranking, truth))
        red = None if reductions is None else reductions.get(ranking.query_id)
        rows.append((ranking.query_id, ap, red))
    return rows


def evaluation_report(
    rankings: Sequence[Ranking],
    truth: GroundTruthTable,
    reductions: Mapping[str, float] | None = None,
) -> str:
    """Human-readable per-query AP table with MAP and the 11-point curve."""
    rows = _rows(rankings, truth, reductions)
    lines = ["query\tAP" + ("\treduction%" if reductions is not None else "")]
    for query_id, ap, red in rows:
        line = f"{query_id}\t{ap:.6f}"
        if reductions is not None:
            line += "\t" + (f"{red:.2f}" if red is not None else "-")
        lines.append(line)
    lines.append(f"MAP\t{mean_average_precision(rankings, truth):.6f}")
    points = eleven_point_ap(rankings, truth)
    lines.append(
        "11pt\t" + " ".join(f"{level:.1f}:{p:.6f}" for level, p in zip(ELEVEN_LEVELS, points))
    )
    if reductions is not None:
        known = [red for _, _, red in rows if red is not None]
        if known:
            lines.append(f"mean_reduction\t{sum(known) / len(known):.2f}")
    return "\n".join(lines) + "\n"


def evaluation_csv(
    rankings: Sequence[Ranking],
    truth: GroundTruthTable,
    reductions: Mapping[str, float] | None = None,
) -> str:
    """Same content as the report, one CSV row per query plus summary rows."""
    rows = _rows(rankings, truth, reductions)
    out = ["kind,query,value"]
    for query_id, ap, red in rows:
        out.append(f"ap,{query_id},{ap:.6f}")
        if red is not None:
            out.append(f"reduction,{query_id},{red:.2f}")
    out.append(f"map,,{mean_average_precision(rankings, truth):.6f}")
    for level, p in zip(ELEVEN_LEVELS, eleven_point_ap(rankings, truth)):
        out.append(f"p_interp,{level:.1f},{p:.6f}")
    if reductions is not None:
        known = [red for _, _, red in rows if red is not None]
        if known:
            out.append(f"mean_reduction,,{sum(known) / len(known):.2f}")
    return "\n".join(out) + "\n"
