"""One-step matching, cluster-pruned two-step matching, and mixture baselines.

One-step scores the query against every repository image. Two-step first
builds a clustered index (k-means over supervectors, or k-medoids/affinity
propagation driven by a set kernel), then scores the query only against the
union of the clusters whose representatives it is most similar to.

The mixture baselines model every image with a 1- or 2-component diagonal
Gaussian mixture and rank by negated divergence (KL for single Gaussians,
C2 for either).

Index file format: ``INDEX 1 <method> <K>``, a ``cluster <id> image <ref>``
or ``cluster <id> centroid <values...>`` line per cluster, then one
``assign <image_id> <cluster_id>`` line per image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import clustering, gmm, kernels
from .parallel import parallel_map
from .store import FeatureDatabase, LocalFeatureSet, Ranking

__all__ = [
    "Scorer",
    "RetrievalReport",
    "ClusteredIndex",
    "INDEX_METHODS",
    "ImkScorer",
    "PyramidScorer",
    "make_scorer",
    "one_step_retrieve",
    "build_clustered_index",
    "two_step_retrieve",
    "save_index",
    "load_index",
    "fit_image_models",
    "baseline_retrieve",
]

Scorer = Callable[[LocalFeatureSet, LocalFeatureSet], float]

INDEX_METHODS = ("kmeans-supervector", "kmedoids-kernel", "ap-kernel")


@dataclass(frozen=True)
class RetrievalReport:
    """A two-step result: the ranking plus how much of the repository was scored."""

    ranking: Ranking
    searched_count: int
    total_count: int

    def __post_init__(self):
        if not 0 <= self.searched_count <= self.total_count:
            raise ValueError("searched_count must be within [0, total_count]")
        if len(self.ranking) > self.searched_count:
            raise ValueError("ranking cannot contain more items than were searched")

    @property
    def reduction_percent(self) -> float:
        return 100.0 * (1.0 - self.searched_count / self.total_count)


@dataclass(frozen=True)
class ClusteredIndex:
    """Cluster assignments over a database plus one representative per cluster.

    Representatives are centroid supervectors for ``kmeans-supervector`` and
    member image ids for the kernel-driven methods.
    """

    method: str
    database: FeatureDatabase
    assignments: Mapping[str, int]
    representatives: tuple

    def __post_init__(self):
        if self.method not in INDEX_METHODS:
            raise ValueError(f"unknown index method {self.method!r}")
        assignments = dict(self.assignments)
        ids = set(self.database.image_ids())
        if set(assignments) != ids:
            raise ValueError("assignments must cover exactly the database images")
        k = len(self.representatives)
        if k < 1:
            raise ValueError("index needs at least one cluster")
        if any(not 0 <= c < k for c in assignments.values()):
            raise ValueError("assignment references a cluster outside [0, K)")
        object.__setattr__(self, "assignments", assignments)

    @property
    def cluster_count(self) -> int:
        return len(self.representatives)

    def cluster_members(self, cluster: int) -> tuple[str, ...]:
        return tuple(
            image_id
            for image_id in self.database.image_ids()
            if self.assignments[image_id] == cluster
        )


class ImkScorer:
    """Intermediate matching kernel scorer with per-set selection caching.

    Selection depends only on (set, vocabulary), so each set's profile is
    computed once; a pair evaluation is then Q base kernels. Values are
    identical to :func:`imret.kernels.imk`.
    """

    def __init__(self, vocabulary: kernels.Vocabulary, base: kernels.BaseKernel):
        self.vocabulary = vocabulary
        self.base = base
        self._profiles: dict[int, tuple] = {}

    def profile(self, feature_set) -> tuple:
        key = id(feature_set)
        cached = self._profiles.get(key)
        if cached is None or cached[0] is not feature_set:
            cached = (feature_set, kernels.selection_profile(feature_set, self.vocabulary))
            self._profiles[key] = cached
        return cached[1]

    def __call__(self, x, y) -> float:
        return kernels.imk_from_profiles(self.profile(x), self.profile(y), self.base)


class PyramidScorer:
    """Pyramid match scorer that scales inputs and caches per-set histograms."""

    def __init__(self, scaler: kernels.PyramidScaler):
        self.scaler = scaler
        self._cache: dict[int, tuple] = {}

    def _histograms(self, feature_set):
        key = id(feature_set)
        cached = self._cache.get(key)
        if cached is None or cached[0] is not feature_set:
            scaled = self.scaler.apply(feature_set)
            cached = (feature_set, kernels._grid_histograms(scaled, self.scaler.diameter))
            self._cache[key] = cached
        return cached[1]

    def __call__(self, x, y) -> float:
        hx, hy = self._histograms(x), self._histograms(y)
        cross = kernels._pyramid_unnormalized(hx, hy)
        return cross / math.sqrt(
            kernels._pyramid_unnormalized(hx, hx) * kernels._pyramid_unnormalized(hy, hy)
        )


def make_scorer(
    kind: str,
    base: kernels.BaseKernel | None = None,
    vocabulary: kernels.Vocabulary | None = None,
    scaler: kernels.PyramidScaler | None = None,
) -> Scorer:
    """Build a set-similarity scorer by kernel name."""
    if kind == "imk":
        if vocabulary is None or base is None:
            raise ValueError("imk needs a vocabulary and a base kernel")
        return ImkScorer(vocabulary, base)
    if kind == "summation":
        if base is None:
            raise ValueError("summation needs a base kernel")
        return lambda x, y: kernels.summation_kernel(x, y, base)
    if kind == "matching":
        if base is None:
            raise ValueError("matching needs a base kernel")
        return lambda x, y: kernels.matching_kernel(x, y, base)
    if kind == "pyramid":
        if scaler is None:
            raise ValueError("pyramid needs a fitted PyramidScaler")
        return PyramidScorer(scaler)
    raise ValueError(f"unknown kernel kind {kind!r}")


def one_step_retrieve(
    db: FeatureDatabase,
    query_set: LocalFeatureSet,
    scorer: Scorer,
    exclude: str | None = None,
    threads: int = 1,
) -> Ranking:
    """Score the query against every database image; descending, ties by id."""
    if query_set.dimension != db.dimension:
        raise ValueError(
            f"query dimension {query_set.dimension} != database dimension {db.dimension}"
        )
    candidates = [s for s in db.sets if s.image_id != exclude]
    scores = parallel_map(lambda s: float(scorer(query_set, s)), candidates, threads)
    return Ranking.from_scores(
        query_set.image_id, ((s.image_id, v) for s, v in zip(candidates, scores))
    )


def build_clustered_index(
    db: FeatureDatabase,
    method: str,
    cluster_count: int | None = None,
    seed: int = 0,
    kernel: Scorer | None = None,
    max_iterations: int = 100,
    ap_config: clustering.ApConfig | None = None,
    threads: int = 1,
) -> ClusteredIndex:
    """Partition the database into candidate search spaces.

    ``kmeans-supervector`` requires every image to have the same number of
    vectors. The kernel methods need a set kernel; affinity propagation picks
    its own cluster count and ignores ``cluster_count``.
    """
    if method not in INDEX_METHODS:
        raise ValueError(f"unknown index method {method!r}")
    if len(db) == 0:
        raise ValueError("cannot index an empty database")
    ids = db.image_ids()

    if method == "kmeans-supervector":
        sizes = {len(s) for s in db.sets}
        if len(sizes) > 1:
            raise ValueError(
                "kmeans-supervector requires equal-size feature sets, "
                f"found sizes {sorted(sizes)}"
            )
        if cluster_count is None or cluster_count < 1:
            raise ValueError("kmeans-supervector needs a positive cluster count")
        supers = np.stack([clustering.supervector(s) for s in db.sets])
        result = clustering.kmeans(supers, cluster_count, seed=seed, max_iterations=max_iterations)
        representatives = tuple(np.array(c) for c in result.representatives)
        assignments = {image_id: a for image_id, a in zip(ids, result.assignments)}
        return ClusteredIndex("kmeans-supervector", db, assignments, representatives)

    if kernel is None:
        raise ValueError(f"{method} needs a set kernel")

    if method == "kmedoids-kernel":
        if cluster_count is None or cluster_count < 1:
            raise ValueError("kmedoids-kernel needs a positive cluster count")
        dmat = clustering.kernel_distance_matrix(db.sets, kernel, threads=threads)
        result = clustering.kmedoids(
            len(db), dmat, cluster_count, seed=seed, max_iterations=max_iterations
        )
        representatives = tuple(ids[m] for m in result.representatives)
        assignments = {image_id: a for image_id, a in zip(ids, result.assignments)}
        return ClusteredIndex("kmedoids-kernel", db, assignments, representatives)

    config = ap_config or clustering.ApConfig()
    sim = clustering.kernel_similarity_matrix(
        db.sets, kernel, preference=config.preference, threads=threads
    )
    result = clustering.affinity_propagation(sim, config)
    representatives = tuple(ids[m] for m in result.representatives)
    assignments = {image_id: a for image_id, a in zip(ids, result.assignments)}
    return ClusteredIndex("ap-kernel", db, assignments, representatives)


def _cluster_scores(index: ClusteredIndex, query_set: LocalFeatureSet, scorer: Scorer):
    if index.method == "kmeans-supervector":
        query_super = clustering.supervector(query_set)
        scores = []
        for rep in index.representatives:
            if rep.shape != query_super.shape:
                raise ValueError(
                    "query supervector length does not match index centroids "
                    f"({query_super.shape[0]} vs {rep.shape[0]})"
                )
            scores.append(-float(np.sqrt(((query_super - rep) ** 2).sum())))
        return scores
    return [float(scorer(query_set, index.database.get(rep))) for rep in index.representatives]


def two_step_retrieve(
    index: ClusteredIndex,
    query_set: LocalFeatureSet,
    scorer: Scorer,
    n_clusters: int,
    exclude: str | None = None,
    threads: int = 1,
) -> RetrievalReport:
    """Score cluster representatives, then run one-step over the union of the
    top ``n_clusters`` clusters."""
    if not 1 <= n_clusters <= index.cluster_count:
        raise ValueError(
            f"n_clusters must be within [1, {index.cluster_count}], got {n_clusters}"
        )
    scores = _cluster_scores(index, query_set, scorer)
    order = sorted(range(index.cluster_count), key=lambda c: (-scores[c], c))
    chosen = set(order[:n_clusters])
    union_ids = [
        image_id for image_id in index.database.image_ids()
        if index.assignments[image_id] in chosen
    ]
    searched = index.database.subset(union_ids)
    ranking = one_step_retrieve(searched, query_set, scorer, exclude=exclude, threads=threads)
    return RetrievalReport(
        ranking=ranking,
        searched_count=len(searched),
        total_count=len(index.database),
    )


def save_index(index: ClusteredIndex, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"INDEX 1 {index.method} {index.cluster_count}\n")
        for c, rep in enumerate(index.representatives):
            if index.method == "kmeans-supervector":
                fh.write(f"cluster {c} centroid " + " ".join(repr(float(v)) for v in rep) + "\n")
            else:
                fh.write(f"cluster {c} image {rep}\n")
        for image_id in index.database.image_ids():
            fh.write(f"assign {image_id} {index.assignments[image_id]}\n")


def load_index(path: str | Path, db: FeatureDatabase) -> ClusteredIndex:
    from .store import FileFormatError, _content_lines

    lines = _content_lines(path)
    try:
        line_no, header = next(lines)
    except StopIteration:
        raise FileFormatError(path, 0, "empty index file")
    parts = header.split()
    if len(parts) != 4 or parts[0] != "INDEX" or parts[1] != "1":
        raise FileFormatError(path, line_no, f"bad header {header!r}")
    method, k = parts[2], int(parts[3])
    if method not in INDEX_METHODS:
        raise FileFormatError(path, line_no, f"unknown index method {method!r}")
    representatives: list = [None] * k
    assignments: dict[str, int] = {}
    for line_no, line in lines:
        tokens = line.split()
        if tokens[0] == "cluster":
            c = int(tokens[1])
            if not 0 <= c < k:
                raise FileFormatError(path, line_no, f"cluster id {c} out of range")
            if tokens[2] == "centroid":
                representatives[c] = np.asarray([float(t) for t in tokens[3:]])
            elif tokens[2] == "image" and len(tokens) == 4:
                representatives[c] = tokens[3]
            else:
                raise FileFormatError(path, line_no, f"bad cluster line {line!r}")
        elif tokens[0] == "assign" and len(tokens) == 3:
            assignments[tokens[1]] = int(tokens[2])
        else:
            raise FileFormatError(path, line_no, f"bad index line {line!r}")
    if any(rep is None for rep in representatives):
        raise FileFormatError(path, 0, "index file missing cluster lines")
    return ClusteredIndex(method, db, assignments, tuple(representatives))


def fit_image_models(
    db: FeatureDatabase,
    component_count: int,
    config: gmm.EmConfig = gmm.EmConfig(),
    threads: int = 1,
) -> dict[str, gmm.GaussianMixture]:
    """Fit one per-image mixture for every database image."""
    models = parallel_map(
        lambda s: gmm.fit_gmm(s.array, component_count, config), db.sets, threads
    )
    return {s.image_id: m for s, m in zip(db.sets, models)}


_MODEL_COMPONENTS = {"gaussian": 1, "2gmm": 2}


def baseline_retrieve(
    db: FeatureDatabase,
    query_set: LocalFeatureSet,
    model_kind: str,
    divergence: str,
    config: gmm.EmConfig = gmm.EmConfig(),
    models: Mapping[str, gmm.GaussianMixture] | None = None,
    exclude: str | None = None,
    threads: int = 1,
) -> Ranking:
    """Rank by negated divergence between per-image mixtures.

    ``model_kind`` is ``gaussian`` (1 component) or ``2gmm``; ``divergence``
    is ``kld`` (single Gaussians only, query model first) or ``c2``.
    Pass ``models`` (from :func:`fit_image_models`) to reuse database fits
    across queries.
    """
    if model_kind not in _MODEL_COMPONENTS:
        raise ValueError(f"unknown model kind {model_kind!r}")
    if divergence not in ("kld", "c2"):
        raise ValueError(f"unknown divergence {divergence!r}")
    components = _MODEL_COMPONENTS[model_kind]
    if divergence == "kld" and components != 1:
        raise ValueError("KL divergence is closed-form only for single-Gaussian models")
    if models is None:
        models = fit_image_models(db, components, config, threads=threads)
    query_model = gmm.fit_gmm(query_set.array, components, config)

    def score(target: LocalFeatureSet) -> float:
        target_model = models[target.image_id]
        if divergence == "kld":
            value = gmm.kl_gaussian(query_model.component(0), target_model.component(0))
        else:
            value = gmm.c2_distance(query_model, target_model)
        return -value

    candidates = [s for s in db.sets if s.image_id != exclude]
    scores = parallel_map(score, candidates, threads)
    return Ranking.from_scores(
        query_set.image_id, ((s.image_id, v) for s, v in zip(candidates, scores))
    )
