"""Bag-of-visual-words representation and kNN classification.

The codebook is k-means over the pooled local features of all images; a
feature set becomes a count histogram of nearest-word assignments. kNN takes
any similarity oracle, so it works on BoW vectors (negated Euclidean) or
directly on feature sets through a set kernel.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import clustering
from .store import FeatureDatabase, LocalFeatureSet

__all__ = [
    "Codebook",
    "build_codebook",
    "bow_vector",
    "bow_feature_set",
    "l1_normalize",
    "euclidean_bow_similarity",
    "knn_classify",
]


@dataclass(frozen=True)
class Codebook:
    """Visual words: cluster centers over pooled local features."""

    words: np.ndarray  # (n, d)

    def __post_init__(self):
        words = np.array(self.words, dtype=np.float64)
        if words.ndim != 2 or words.shape[0] < 1:
            raise ValueError(f"words must be a non-empty (n, d) array, got {words.shape}")
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    @property
    def size(self) -> int:
        return self.words.shape[0]

    @property
    def dimension(self) -> int:
        return self.words.shape[1]


def build_codebook(
    db: FeatureDatabase, n_words: int, seed: int = 0, max_iterations: int = 100
) -> Codebook:
    pooled = db.pooled_array()
    result = clustering.kmeans(pooled, n_words, seed=seed, max_iterations=max_iterations)
    return Codebook(result.representatives)


def bow_vector(feature_set: LocalFeatureSet, codebook: Codebook) -> np.ndarray:
    """Count of nearest-word assignments per word; counts sum to the set size.
    Equidistant words resolve to the lowest word index."""
    if feature_set.dimension != codebook.dimension:
        raise ValueError(
            f"set dimension {feature_set.dimension} != codebook dimension {codebook.dimension}"
        )
    points = feature_set.array
    diff = points[:, None, :] - codebook.words[None, :, :]
    nearest = np.argmin(np.einsum("nwd,nwd->nw", diff, diff), axis=1)
    return np.bincount(nearest, minlength=codebook.size).astype(np.int64)


def bow_feature_set(image_id: str, counts: np.ndarray) -> LocalFeatureSet:
    """Wrap a BoW histogram as a single-vector feature set (LFV-compatible)."""
    return LocalFeatureSet(image_id, (tuple(float(c) for c in counts),))


def l1_normalize(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    return counts / total if total > 0 else counts


def euclidean_bow_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return -float(np.sqrt(((a - b) ** 2).sum()))


def knn_classify(
    training_items: Sequence,
    labels: Sequence[str],
    query,
    k: int,
    similarity: Callable,
) -> str:
    """Majority vote among the k most similar training items.

    Deterministic tie rules: neighbor ties resolve to the lowest training
    index; vote ties go to the label with the higher summed similarity, then
    to the lexicographically smallest label.
    """
    if len(training_items) != len(labels):
        raise ValueError("training items and labels must have equal length")
    if not 1 <= k <= len(training_items):
        raise ValueError(f"k must be within [1, {len(training_items)}], got {k}")
    scored = [float(similarity(query, item)) for item in training_items]
    order = sorted(range(len(scored)), key=lambda i: (-scored[i], i))
    neighbors = order[:k]
    votes = Counter(labels[i] for i in neighbors)
    top_count = max(votes.values())
    tied = [label for label, c in votes.items() if c == top_count]
    if len(tied) == 1:
        return tied[0]
    summed = {
        label: sum(scored[i] for i in neighbors if labels[i] == label) for label in tied
    }
    best = max(summed.values())
    return sorted(label for label, s in summed.items() if s == best)[0]
