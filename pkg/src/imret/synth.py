"""Seeded synthetic feature databases with class structure and ground truth.

Each class is a translated copy of one shared random mixture: a base set of
component offsets and weights is drawn once, and class c's components sit at
``base + separation * center_c`` with the class centers on a scaled simplex
(all pairwise center distances equal the separation, in units of the
component standard deviation, which is 1). Separation is therefore the only
class signal: at separation 0 every class has the identical distribution and
retrieval can do no better than chance.

Every image samples its vector count uniformly from the configured range and
draws that many vectors from its class mixture. Ground truth marks all other
images of the same class as relevant, and a per-image summary-statistics
signature is available as the independent visual representation consumed by
the re-ranking meta-learner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .store import FeatureDatabase, GroundTruthTable, LocalFeatureSet

__all__ = ["SynthSpec", "SynthResult", "generate", "summary_signature"]


@dataclass(frozen=True)
class SynthSpec:
    class_count: int = 5
    images_per_class: int = 40
    vectors_per_image: tuple[int, int] = (30, 60)
    dimension: int = 8
    class_separation: float = 3.0
    components_per_class: int = 3
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.vectors_per_image
        if self.class_count < 2:
            raise ValueError("need at least 2 classes")
        if self.images_per_class < 2:
            raise ValueError("need at least 2 images per class")
        if not 1 <= lo <= hi:
            raise ValueError(f"bad vectors_per_image range {self.vectors_per_image}")
        if self.dimension < self.class_count:
            raise ValueError(
                f"dimension {self.dimension} must be >= class_count {self.class_count} "
                "(class centers sit on coordinate axes)"
            )
        if self.class_separation < 0:
            raise ValueError("class_separation must be >= 0")
        if self.components_per_class < 1:
            raise ValueError("need at least 1 component per class")


@dataclass(frozen=True)
class SynthResult:
    database: FeatureDatabase
    ground_truth: GroundTruthTable
    labels: dict[str, str]


def generate(spec: SynthSpec) -> SynthResult:
    rng = np.random.default_rng(spec.seed)
    d = spec.dimension
    q = spec.components_per_class

    # Shared mixture layout; classes differ only by a simplex translation.
    base_offsets = rng.normal(0.0, 1.0, size=(q, d))
    weights = rng.dirichlet(np.ones(q))
    # Unit vectors scaled so every pairwise center distance is the separation.
    centers = np.zeros((spec.class_count, d))
    for c in range(spec.class_count):
        centers[c, c] = spec.class_separation / math.sqrt(2.0)

    sets = []
    labels: dict[str, str] = {}
    entries: dict[str, frozenset[str]] = {}
    class_ids: list[list[str]] = []
    lo, hi = spec.vectors_per_image
    for c in range(spec.class_count):
        means = base_offsets + centers[c]
        ids = []
        for i in range(spec.images_per_class):
            image_id = f"c{c:02d}i{i:03d}"
            count = int(rng.integers(lo, hi + 1))
            picks = rng.choice(q, size=count, p=weights)
            vectors = rng.normal(0.0, 1.0, size=(count, d)) + means[picks]
            sets.append(LocalFeatureSet(image_id, tuple(tuple(v) for v in vectors)))
            labels[image_id] = f"class{c}"
            ids.append(image_id)
        class_ids.append(ids)
    for ids in class_ids:
        for image_id in ids:
            entries[image_id] = frozenset(other for other in ids if other != image_id)
    return SynthResult(
        database=FeatureDatabase(d, tuple(sets)),
        ground_truth=GroundTruthTable(entries),
        labels=labels,
    )


def summary_signature(feature_set: LocalFeatureSet, length: int = 48) -> np.ndarray:
    """Fixed-length per-image signature from per-dimension summary statistics.

    Six statistics per dimension (mean, std, min, max, lower and upper
    quartile) are stacked and cyclically resized to the requested length, so
    any feature dimension yields a usable meta-learner signature.
    """
    arr = feature_set.array
    stats = np.concatenate(
        [
            arr.mean(axis=0),
            arr.std(axis=0),
            arr.min(axis=0),
            arr.max(axis=0),
            np.quantile(arr, 0.25, axis=0),
            np.quantile(arr, 0.75, axis=0),
        ]
    )
    if length < 1:
        raise ValueError("signature length must be positive")
    return np.resize(stats, length)
