"""Data model and text file formats for set-of-local-features image retrieval.

An image is a variable-length set of fixed-dimension local feature vectors.
This module owns the immutable core types (feature sets, databases, rankings,
ground truth) and the file formats used to move them between tools:

* feature file   -- header ``LFV 1 <d>``, then per image ``image <id> <n>``
                    followed by ``n`` rows of ``d`` space-separated reals.
* ground truth   -- one line ``<query_id>: <id> <id> ...`` per query.
* ranking file   -- lines ``<query_id> <rank> <image_id> <score>``, rank
                    starting at 1, scores fixed to 6 decimals.
* label file     -- lines ``<image_id> <class_label>``.

Lines starting with ``#`` and blank lines are ignored in all formats.
Feature reals are serialized with ``repr`` so feature files round-trip
bit-exactly; ranking scores are fixed-precision so outputs stay diffable.

All types are immutable after construction and safe for concurrent reads.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

FeatureVector = tuple[float, ...]

__all__ = [
    "FeatureVector",
    "FileFormatError",
    "LocalFeatureSet",
    "FeatureDatabase",
    "GroundTruthTable",
    "Ranking",
    "load_feature_file",
    "save_feature_file",
    "load_ground_truth",
    "save_ground_truth",
    "write_ranking",
    "load_rankings",
    "load_labels",
    "write_labels",
]


class FileFormatError(ValueError):
    """A data file violates its format contract; carries the offending line."""

    def __init__(self, path: str | Path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


def _as_vector(values: Iterable[float]) -> FeatureVector:
    vec = tuple(float(v) for v in values)
    for v in vec:
        if not math.isfinite(v):
            raise ValueError(f"non-finite feature value {v!r}")
    return vec


@dataclass(frozen=True)
class LocalFeatureSet:
    """One image as a non-empty set of equal-dimension local feature vectors."""

    image_id: str
    vectors: tuple[FeatureVector, ...]

    def __post_init__(self):
        vectors = tuple(_as_vector(v) for v in self.vectors)
        if not vectors:
            raise ValueError(f"feature set {self.image_id!r} has no vectors")
        d = len(vectors[0])
        if d == 0:
            raise ValueError(f"feature set {self.image_id!r} has zero-dimension vectors")
        for i, v in enumerate(vectors):
            if len(v) != d:
                raise ValueError(
                    f"feature set {self.image_id!r}: vector {i} has dimension "
                    f"{len(v)}, expected {d}"
                )
        object.__setattr__(self, "vectors", vectors)

    @property
    def dimension(self) -> int:
        return len(self.vectors[0])

    def __len__(self) -> int:
        return len(self.vectors)

    @cached_property
    def array(self) -> np.ndarray:
        """Vectors as a read-only (n, d) float64 array."""
        arr = np.asarray(self.vectors, dtype=np.float64)
        arr.setflags(write=False)
        return arr


@dataclass(frozen=True)
class FeatureDatabase:
    """An ordered collection of feature sets sharing one dimension, unique ids."""

    dimension: int
    sets: tuple[LocalFeatureSet, ...]

    def __post_init__(self):
        object.__setattr__(self, "sets", tuple(self.sets))
        if self.dimension < 1:
            raise ValueError(f"dimension must be positive, got {self.dimension}")
        seen = set()
        for s in self.sets:
            if s.dimension != self.dimension:
                raise ValueError(
                    f"set {s.image_id!r} has dimension {s.dimension}, "
                    f"database expects {self.dimension}"
                )
            if s.image_id in seen:
                raise ValueError(f"duplicate image_id {s.image_id!r}")
            seen.add(s.image_id)

    @cached_property
    def _by_id(self) -> dict[str, LocalFeatureSet]:
        return {s.image_id: s for s in self.sets}

    def __len__(self) -> int:
        return len(self.sets)

    def __iter__(self):
        return iter(self.sets)

    def image_ids(self) -> tuple[str, ...]:
        return tuple(s.image_id for s in self.sets)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._by_id

    def get(self, image_id: str) -> LocalFeatureSet:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise KeyError(f"no image {image_id!r} in database") from None

    def subset(self, image_ids: Iterable[str]) -> "FeatureDatabase":
        """Database restricted to the given ids, preserving database order."""
        wanted = set(image_ids)
        missing = wanted - set(self._by_id)
        if missing:
            raise KeyError(f"ids not in database: {sorted(missing)}")
        return FeatureDatabase(
            self.dimension, tuple(s for s in self.sets if s.image_id in wanted)
        )

    def pooled_array(self) -> np.ndarray:
        """All local feature vectors stacked in database order, shape (N, d)."""
        return np.concatenate([s.array for s in self.sets], axis=0)


@dataclass(frozen=True)
class GroundTruthTable:
    """Query image id -> non-empty set of relevant image ids."""

    entries: Mapping[str, frozenset[str]]

    def __post_init__(self):
        frozen = {}
        for query_id, relevant in self.entries.items():
            rel = frozenset(str(r) for r in relevant)
            if not rel:
                raise ValueError(f"query {query_id!r} has an empty relevant set")
            frozen[str(query_id)] = rel
        object.__setattr__(self, "entries", frozen)

    def __contains__(self, query_id: str) -> bool:
        return query_id in self.entries

    def relevant(self, query_id: str) -> frozenset[str]:
        try:
            return self.entries[query_id]
        except KeyError:
            raise KeyError(f"no ground truth for query {query_id!r}") from None

    def query_ids(self) -> tuple[str, ...]:
        return tuple(self.entries)

    def validate_against(self, db: FeatureDatabase) -> None:
        """Check that every referenced id exists in the database."""
        known = set(db.image_ids())
        for query_id, rel in self.entries.items():
            unknown = rel - known
            if unknown:
                raise ValueError(
                    f"ground truth for {query_id!r} references unknown ids "
                    f"{sorted(unknown)}"
                )


@dataclass(frozen=True)
class Ranking:
    """Ordered retrieval result: (image_id, score) pairs, scores non-increasing.

    Score ties are reordered to ascending image_id at construction so rankings
    are deterministic; a genuinely increasing score sequence is an error, not
    something silently repaired.
    """

    query_id: str
    items: tuple[tuple[str, float], ...]

    def __post_init__(self):
        items = []
        for image_id, score in self.items:
            score = float(score)
            if not math.isfinite(score):
                raise ValueError(f"non-finite score {score!r} for {image_id!r}")
            items.append((str(image_id), score))
        seen = set()
        for image_id, _ in items:
            if image_id in seen:
                raise ValueError(f"duplicate image_id {image_id!r} in ranking")
            seen.add(image_id)
        for (_, prev), (image_id, cur) in zip(items, items[1:]):
            if cur > prev:
                raise ValueError(
                    f"ranking scores must be non-increasing; {image_id!r} has "
                    f"score {cur} after {prev}"
                )
        # Reorder each run of equal scores by image_id (stable otherwise).
        normalized: list[tuple[str, float]] = []
        run: list[tuple[str, float]] = []
        for item in items:
            if run and item[1] != run[0][1]:
                normalized.extend(sorted(run))
                run = []
            run.append(item)
        normalized.extend(sorted(run))
        object.__setattr__(self, "items", tuple(normalized))

    @classmethod
    def from_scores(
        cls, query_id: str, scores: Mapping[str, float] | Iterable[tuple[str, float]]
    ) -> "Ranking":
        """Build a ranking from unordered scores (descending, ties by id)."""
        pairs = scores.items() if isinstance(scores, Mapping) else scores
        ordered = sorted(
            ((str(i), float(s)) for i, s in pairs), key=lambda t: (-t[1], t[0])
        )
        return cls(query_id, tuple(ordered))

    def ids(self) -> tuple[str, ...]:
        return tuple(i for i, _ in self.items)

    def __len__(self) -> int:
        return len(self.items)


# ---------------------------------------------------------------------------
# file formats


def _content_lines(path: str | Path):
    """Yield (line_no, stripped_line) skipping comments and blank lines."""
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield line_no, line


def load_feature_file(path: str | Path) -> FeatureDatabase:
    """Parse an LFV feature file into a database, preserving image order."""
    lines = _content_lines(path)
    try:
        line_no, header = next(lines)
    except StopIteration:
        raise FileFormatError(path, 0, "empty feature file (missing LFV header)")
    parts = header.split()
    if len(parts) != 3 or parts[0] != "LFV" or parts[1] != "1":
        raise FileFormatError(path, line_no, f"bad header {header!r}, expected 'LFV 1 <d>'")
    try:
        dimension = int(parts[2])
    except ValueError:
        raise FileFormatError(path, line_no, f"bad dimension {parts[2]!r}") from None
    if dimension < 1:
        raise FileFormatError(path, line_no, f"dimension must be positive, got {dimension}")

    sets: list[LocalFeatureSet] = []
    seen: set[str] = set()
    pending = None  # (image_id, expected_count, rows, header_line_no)
    for line_no, line in lines:
        tokens = line.split()
        if tokens[0] == "image":
            if pending is not None:
                image_id, expected, rows, at = pending
                raise FileFormatError(
                    path, line_no,
                    f"image {image_id!r} (line {at}) declares {expected} vectors "
                    f"but only {len(rows)} rows present",
                )
            if len(tokens) != 3:
                raise FileFormatError(path, line_no, f"bad image header {line!r}")
            image_id = tokens[1]
            try:
                count = int(tokens[2])
            except ValueError:
                raise FileFormatError(path, line_no, f"bad vector count {tokens[2]!r}") from None
            if count < 1:
                raise FileFormatError(path, line_no, f"image {image_id!r} declares {count} vectors")
            if image_id in seen:
                raise FileFormatError(path, line_no, f"duplicate image_id {image_id!r}")
            seen.add(image_id)
            pending = (image_id, count, [], line_no)
            continue
        if pending is None:
            raise FileFormatError(path, line_no, f"vector row before any image header: {line!r}")
        if len(tokens) != dimension:
            raise FileFormatError(
                path, line_no,
                f"vector has {len(tokens)} values, expected dimension {dimension}",
            )
        try:
            row = tuple(float(t) for t in tokens)
        except ValueError:
            raise FileFormatError(path, line_no, f"unparsable real in row {line!r}") from None
        for v in row:
            if not math.isfinite(v):
                raise FileFormatError(path, line_no, f"non-finite value {v!r}")
        image_id, expected, rows, at = pending
        rows.append(row)
        if len(rows) == expected:
            sets.append(LocalFeatureSet(image_id, tuple(rows)))
            pending = None
    if pending is not None:
        image_id, expected, rows, at = pending
        raise FileFormatError(
            path, at,
            f"image {image_id!r} declares {expected} vectors but file ends after {len(rows)}",
        )
    return FeatureDatabase(dimension, tuple(sets))


def save_feature_file(db: FeatureDatabase, path: str | Path) -> None:
    """Write a database in LFV format; reals round-trip exactly via repr."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"LFV 1 {db.dimension}\n")
        for s in db.sets:
            if any(ch.isspace() for ch in s.image_id):
                raise ValueError(f"image_id {s.image_id!r} contains whitespace")
            fh.write(f"image {s.image_id} {len(s)}\n")
            for vec in s.vectors:
                fh.write(" ".join(repr(v) for v in vec) + "\n")


def load_ground_truth(path: str | Path) -> GroundTruthTable:
    entries: dict[str, frozenset[str]] = {}
    for line_no, line in _content_lines(path):
        head, sep, tail = line.partition(":")
        if not sep:
            raise FileFormatError(path, line_no, f"missing ':' in ground-truth line {line!r}")
        query_id = head.strip()
        if not query_id or any(ch.isspace() for ch in query_id):
            raise FileFormatError(path, line_no, f"bad query id {head!r}")
        if query_id in entries:
            raise FileFormatError(path, line_no, f"duplicate query {query_id!r}")
        relevant = tail.split()
        if not relevant:
            raise FileFormatError(path, line_no, f"query {query_id!r} has no relevant ids")
        entries[query_id] = frozenset(relevant)
    return GroundTruthTable(entries)


def save_ground_truth(table: GroundTruthTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for query_id in table.query_ids():
            fh.write(f"{query_id}: " + " ".join(sorted(table.relevant(query_id))) + "\n")


def write_ranking(rankings: Iterable[Ranking], path: str | Path) -> None:
    """Write rankings as ``<query> <rank> <image> <score>`` lines, 6 decimals."""
    with open(path, "w", encoding="utf-8") as fh:
        for ranking in rankings:
            for rank, (image_id, score) in enumerate(ranking.items, start=1):
                fh.write(f"{ranking.query_id} {rank} {image_id} {score:.6f}\n")


def load_rankings(path: str | Path) -> list[Ranking]:
    """Read a ranking file back into per-query rankings (file query order)."""
    per_query: dict[str, list[tuple[str, float]]] = {}
    expected_rank: dict[str, int] = {}
    for line_no, line in _content_lines(path):
        tokens = line.split()
        if len(tokens) != 4:
            raise FileFormatError(path, line_no, f"bad ranking line {line!r}")
        query_id, rank_s, image_id, score_s = tokens
        try:
            rank = int(rank_s)
            score = float(score_s)
        except ValueError:
            raise FileFormatError(path, line_no, f"unparsable ranking line {line!r}") from None
        nxt = expected_rank.get(query_id, 1)
        if rank != nxt:
            raise FileFormatError(
                path, line_no, f"query {query_id!r}: rank {rank}, expected {nxt}"
            )
        expected_rank[query_id] = nxt + 1
        per_query.setdefault(query_id, []).append((image_id, score))
    return [Ranking(q, tuple(items)) for q, items in per_query.items()]


def load_labels(path: str | Path) -> dict[str, str]:
    labels: dict[str, str] = {}
    for line_no, line in _content_lines(path):
        tokens = line.split()
        if len(tokens) != 2:
            raise FileFormatError(path, line_no, f"bad label line {line!r}")
        image_id, label = tokens
        if image_id in labels:
            raise FileFormatError(path, line_no, f"duplicate label for {image_id!r}")
        labels[image_id] = label
    return labels


def write_labels(labels: Mapping[str, str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, label in labels.items():
            fh.write(f"{image_id} {label}\n")
