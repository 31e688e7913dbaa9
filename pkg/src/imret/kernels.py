"""Set kernels over variable-length collections of local feature vectors.

The base kernel is a Gaussian RBF exp(-delta * ||x - y||^2). Set kernels:

* summation        -- every vector of one set against every vector of the
                      other (Mercer, M_i * M_j base evaluations).
* matching         -- best match per vector, both directions.
* intermediate     -- one base evaluation per virtual feature vector, the
  matching (imk)      members selected as closest to that virtual vector
                      (cluster centers by distance, mixture components by
                      responsibility).
* pyramid match    -- multi-resolution grid histograms combined through
                      histogram intersection, self-normalized to (0, 1].

Per-pair arithmetic runs in a fixed order (vectors walked left to right,
pairs canonicalized), so every kernel here is exactly symmetric and exactly
reproducible across runs and thread counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from . import gmm
from .parallel import parallel_map
from .store import FeatureVector

__all__ = [
    "BaseKernel",
    "RbfKernel",
    "CenterVocabulary",
    "UbmVocabulary",
    "Vocabulary",
    "rbf",
    "squared_distance",
    "summation_kernel",
    "matching_kernel",
    "select_closest_to_center",
    "select_closest_to_component",
    "selection_profile",
    "imk",
    "imk_from_profiles",
    "histogram_intersection",
    "pyramid_match",
    "PyramidScaler",
    "gram_matrix",
    "median_heuristic_delta",
]

BaseKernel = Callable[[FeatureVector, FeatureVector], float]


def _vectors(x) -> tuple[FeatureVector, ...]:
    """Accept a LocalFeatureSet or any sequence of equal-length vectors."""
    vecs = getattr(x, "vectors", x)
    out = tuple(tuple(float(v) for v in vec) for vec in vecs)
    if not out:
        raise ValueError("feature set must be non-empty")
    d = len(out[0])
    if any(len(v) != d for v in out):
        raise ValueError("vectors in a set must share one dimension")
    return out


def squared_distance(x: FeatureVector, y: FeatureVector) -> float:
    if len(x) != len(y):
        raise ValueError(f"dimension mismatch: {len(x)} vs {len(y)}")
    total = 0.0
    for a, b in zip(x, y):
        diff = a - b
        total += diff * diff
    return total


def rbf(x: FeatureVector, y: FeatureVector, delta: float) -> float:
    """exp(-delta * ||x - y||^2); delta > 0 is the stability scaling term."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    return math.exp(-delta * squared_distance(x, y))


@dataclass(frozen=True)
class RbfKernel:
    """Callable RBF base kernel with a fixed scaling term."""

    delta: float

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    def __call__(self, x: FeatureVector, y: FeatureVector) -> float:
        return math.exp(-self.delta * squared_distance(x, y))


@dataclass(frozen=True)
class CenterVocabulary:
    """Virtual feature vectors given directly as Q cluster centers."""

    centers: tuple[FeatureVector, ...]

    def __post_init__(self):
        centers = _vectors(self.centers)
        object.__setattr__(self, "centers", centers)

    @property
    def size(self) -> int:
        return len(self.centers)

    @property
    def dimension(self) -> int:
        return len(self.centers[0])


@dataclass(frozen=True)
class UbmVocabulary:
    """Virtual feature vectors given as the Q components of a background mixture."""

    model: gmm.GaussianMixture

    @property
    def size(self) -> int:
        return self.model.component_count

    @property
    def dimension(self) -> int:
        return self.model.dimension


Vocabulary = Union[CenterVocabulary, UbmVocabulary]


def _canonical_pair(x, y):
    """Fixed evaluation order for an unordered pair of sets."""
    vx, vy = _vectors(x), _vectors(y)
    if len(vx[0]) != len(vy[0]):
        raise ValueError(f"dimension mismatch: {len(vx[0])} vs {len(vy[0])}")
    if (len(vy), vy) < (len(vx), vx):
        return vy, vx
    return vx, vy


def summation_kernel(x, y, base: BaseKernel) -> float:
    """Sum of the base kernel over all cross pairs."""
    va, vb = _canonical_pair(x, y)
    total = 0.0
    for a in va:
        for b in vb:
            total += base(a, b)
    return total


def matching_kernel(x, y, base: BaseKernel) -> float:
    """Best-match sums in both directions: sum_m max_n k + sum_n max_m k."""
    vx, vy = _vectors(x), _vectors(y)
    if len(vx[0]) != len(vy[0]):
        raise ValueError(f"dimension mismatch: {len(vx[0])} vs {len(vy[0])}")
    forward = 0.0
    for a in vx:
        forward += max(base(a, b) for b in vy)
    backward = 0.0
    for b in vy:
        backward += max(base(a, b) for a in vx)
    return forward + backward


def select_closest_to_center(x, center: FeatureVector) -> FeatureVector:
    """Member of the set minimizing Euclidean distance to the center; ties
    resolve to the lowest index."""
    vecs = _vectors(x)
    center = tuple(float(v) for v in center)
    best_idx = 0
    best = squared_distance(vecs[0], center)
    for i in range(1, len(vecs)):
        d = squared_distance(vecs[i], center)
        if d < best:
            best, best_idx = d, i
    return vecs[best_idx]


def select_closest_to_component(x, model: gmm.GaussianMixture, component: int) -> FeatureVector:
    """Member of the set with the highest responsibility for one mixture
    component (log-space; ties resolve to the lowest index)."""
    vecs = _vectors(x)
    if not 0 <= component < model.component_count:
        raise ValueError(f"component {component} out of range [0, {model.component_count})")
    log_resp = gmm.log_responsibilities_matrix(model, np.asarray(vecs))
    return vecs[int(np.argmax(log_resp[:, component]))]


def selection_profile(x, vocabulary: Vocabulary) -> tuple[FeatureVector, ...]:
    """The set member selected for each virtual feature vector, in order.

    Computing this once per set is what makes the intermediate matching
    kernel cheap: a pair evaluation then needs only Q base kernels.
    """
    vecs = _vectors(x)
    if len(vecs[0]) != vocabulary.dimension:
        raise ValueError(
            f"dimension mismatch: set {len(vecs[0])} vs vocabulary {vocabulary.dimension}"
        )
    if isinstance(vocabulary, CenterVocabulary):
        return tuple(select_closest_to_center(vecs, c) for c in vocabulary.centers)
    log_resp = gmm.log_responsibilities_matrix(vocabulary.model, np.asarray(vecs))
    picks = np.argmax(log_resp, axis=0)  # first index wins ties
    return tuple(vecs[int(p)] for p in picks)


def imk_from_profiles(
    profile_x: tuple[FeatureVector, ...],
    profile_y: tuple[FeatureVector, ...],
    base: BaseKernel,
) -> float:
    total = 0.0
    for a, b in zip(profile_x, profile_y):
        total += base(a, b)
    return total


def imk(x, y, vocabulary: Vocabulary, base: BaseKernel) -> float:
    """Intermediate matching kernel: sum of Q base kernels over the pairs of
    members selected per virtual feature vector."""
    return imk_from_profiles(selection_profile(x, vocabulary), selection_profile(y, vocabulary), base)


def histogram_intersection(a, b) -> float:
    """Sum of bin-wise minimums of two equal-length non-negative histograms."""
    a = tuple(float(v) for v in a)
    b = tuple(float(v) for v in b)
    if len(a) != len(b):
        raise ValueError(f"histogram length mismatch: {len(a)} vs {len(b)}")
    total = 0.0
    for u, v in zip(a, b):
        if u < 0 or v < 0:
            raise ValueError("histogram bins must be non-negative")
        total += u if u < v else v
    return total


def _grid_histograms(vecs: tuple[FeatureVector, ...], diameter: float) -> list[dict]:
    levels = _level_count(diameter)
    out = []
    for k in range(levels + 1):
        side = float(2**k)
        hist: dict[tuple[int, ...], int] = {}
        for v in vecs:
            key = []
            for c in v:
                if not 0.0 <= c < diameter:
                    raise ValueError(f"coordinate {c} outside [0, {diameter}) for pyramid match")
                key.append(int(c // side))
            key = tuple(key)
            hist[key] = hist.get(key, 0) + 1
        out.append(hist)
    return out


def _level_count(diameter: float) -> int:
    if diameter < 1:
        raise ValueError(f"diameter must be >= 1, got {diameter}")
    return max(0, math.ceil(math.log2(diameter)))


def _shared_bin_intersection(ha: dict, hb: dict) -> int:
    total = 0
    for key in sorted(set(ha) & set(hb)):
        total += min(ha[key], hb[key])
    return total


def _pyramid_unnormalized(ha: list[dict], hb: list[dict]) -> float:
    total = 0.0
    previous = 0
    for k, (la, lb) in enumerate(zip(ha, hb)):
        current = _shared_bin_intersection(la, lb)
        total += (current - previous) / float(2**k)
        previous = current
    return total


def pyramid_match(x, y, diameter: float) -> float:
    """Multi-resolution histogram intersection kernel, normalized to (0, 1].

    Grid levels have bin side 2^k for k = 0 .. ceil(log2 diameter); each
    level counts only matches not already found at a finer level, weighted by
    1/2^k. The level below the finest contributes nothing. All coordinates
    must lie in [0, diameter); see PyramidScaler for mapping raw features.
    """
    vx, vy = _vectors(x), _vectors(y)
    if len(vx[0]) != len(vy[0]):
        raise ValueError(f"dimension mismatch: {len(vx[0])} vs {len(vy[0])}")
    hx = _grid_histograms(vx, diameter)
    hy = _grid_histograms(vy, diameter)
    cross = _pyramid_unnormalized(hx, hy)
    self_x = _pyramid_unnormalized(hx, hx)
    self_y = _pyramid_unnormalized(hy, hy)
    return cross / math.sqrt(self_x * self_y)


@dataclass(frozen=True)
class PyramidScaler:
    """Min-max maps feature coordinates into [0, diameter) for pyramid match.

    The diameter is the power of two covering the widest per-dimension data
    range, so the finest grid level has bin side 1 at the data's own scale.
    """

    mins: tuple[float, ...]
    scale: float
    diameter: float

    @classmethod
    def fit(cls, sets) -> "PyramidScaler":
        arrays = [np.asarray(_vectors(s), dtype=np.float64) for s in sets]
        if not arrays:
            raise ValueError("need at least one set to fit a scaler")
        stacked = np.concatenate(arrays, axis=0)
        mins = stacked.min(axis=0)
        spread = float((stacked.max(axis=0) - mins).max())
        if spread <= 0:
            return cls(tuple(float(m) for m in mins), 0.0, 1.0)
        diameter = max(1.0, float(2.0 ** math.ceil(math.log2(spread))))
        scale = diameter * (1.0 - 1e-9) / spread
        return cls(tuple(float(m) for m in mins), scale, diameter)

    def apply(self, x) -> tuple[FeatureVector, ...]:
        vecs = _vectors(x)
        if len(vecs[0]) != len(self.mins):
            raise ValueError(f"dimension mismatch: {len(vecs[0])} vs {len(self.mins)}")
        return tuple(
            tuple((c - m) * self.scale for c, m in zip(v, self.mins)) for v in vecs
        )


def gram_matrix(sets, kernel, threads: int = 1) -> np.ndarray:
    """Symmetric kernel matrix; each unordered pair is evaluated once."""
    sets = list(sets)
    if not sets:
        raise ValueError("need at least one set")
    n = len(sets)
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    values = parallel_map(lambda p: kernel(sets[p[0]], sets[p[1]]), pairs, threads)
    mat = np.zeros((n, n), dtype=np.float64)
    for (i, j), v in zip(pairs, values):
        mat[i, j] = v
        mat[j, i] = v
    return mat


def median_heuristic_delta(sets, sample_pairs: int = 1000, seed: int = 0) -> float:
    """Default RBF scaling: 1 / (2 * median squared distance) over a sample
    of vector pairs pooled from the given sets. Falls back to 1.0 when the
    sampled median is zero (degenerate data)."""
    pooled = np.concatenate([np.asarray(_vectors(s), dtype=np.float64) for s in sets], axis=0)
    n = pooled.shape[0]
    if n < 2:
        return 1.0
    rng = np.random.default_rng(seed)
    first = rng.integers(0, n, size=sample_pairs)
    second = rng.integers(0, n - 1, size=sample_pairs)
    second = np.where(second >= first, second + 1, second)  # distinct indices
    sq = ((pooled[first] - pooled[second]) ** 2).sum(axis=1)
    median = float(np.median(sq))
    if median <= 0:
        return 1.0
    return 1.0 / (2.0 * median)
