"""Probabilistic re-ranker layered over an opaque retrieval system.

The underlying system is treated as a black box characterized only by which
top-T images it returns per query (rank order inside the top list is
deliberately ignored). From training queries with known relevance the model
estimates, per database image:

* a smoothed probability that the image is relevant given that the black box
  did / did not return it (interpolated with a pooled prior),
* pairwise co-retrieval tables: how every other image's retrieval behaves
  conditioned on this image being correctly or wrongly retrieved,
* one univariate Gaussian per signature dimension and relevance value over
  an independent visual signature of the query.

Scoring a query sums, per candidate image, the log-odds contributions of the
three parts; re-ranking sorts all images by that score. Probabilities are
clamped to [1e-6, 1 - 1e-6] before any logarithm.

Model file: ``META 1 <K> <D>`` header, ``image`` lines naming the search
space, integer ``cond``/``paird``/``pair`` count lines, and ``vis``/
``visglobal`` Gaussian lines. Signature files: ``<image_id> <D reals>``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .store import FileFormatError, GroundTruthTable, Ranking, _content_lines

__all__ = [
    "PROB_CLAMP",
    "STD_FLOOR",
    "IndicatorVector",
    "TrainingCorpus",
    "MetaModel",
    "blackbox_indicators",
    "estimate_conditional",
    "prior_estimate",
    "smooth",
    "estimate_pairwise",
    "fit_visual_gaussians",
    "train_meta_model",
    "log_odds",
    "rerank",
    "save_meta_model",
    "load_meta_model",
    "load_signature_file",
    "write_signature_file",
]

PROB_CLAMP = 1e-6
STD_FLOOR = 1e-3

IndicatorVector = np.ndarray  # (K,) of {0, 1}


def blackbox_indicators(ranking: Ranking, top: int, image_universe) -> IndicatorVector:
    """Binary vector over the universe: 1 for the top-``top`` ranked images."""
    if top < 0:
        raise ValueError(f"top must be >= 0, got {top}")
    universe = list(image_universe)
    position = {image_id: i for i, image_id in enumerate(universe)}
    out = np.zeros(len(universe), dtype=np.uint8)
    for image_id, _ in ranking.items[:top]:
        if image_id not in position:
            raise ValueError(f"ranked image {image_id!r} is not in the universe")
        out[position[image_id]] = 1
    return out


@dataclass(frozen=True)
class TrainingCorpus:
    """Per training query: black-box indicators, truth indicators, signature.

    ``blackbox`` and ``truth`` are (L, K) binary arrays over a shared image
    universe; ``signatures`` is (L, D).
    """

    image_ids: tuple[str, ...]
    blackbox: np.ndarray
    truth: np.ndarray
    signatures: np.ndarray

    def __post_init__(self):
        ids = tuple(str(i) for i in self.image_ids)
        bbox = np.asarray(self.blackbox, dtype=np.uint8)
        truth = np.asarray(self.truth, dtype=np.uint8)
        sigs = np.asarray(self.signatures, dtype=np.float64)
        if len(set(ids)) != len(ids):
            raise ValueError("image universe contains duplicates")
        k = len(ids)
        if bbox.ndim != 2 or bbox.shape[1] != k or truth.shape != bbox.shape:
            raise ValueError("blackbox and truth must be (L, K) over the universe")
        if bbox.shape[0] < 1:
            raise ValueError("corpus needs at least one training query")
        if sigs.ndim != 2 or sigs.shape[0] != bbox.shape[0]:
            raise ValueError("signatures must be (L, D)")
        for name, arr in (("blackbox", bbox), ("truth", truth)):
            if not np.isin(arr, (0, 1)).all():
                raise ValueError(f"{name} indicators must be binary")
        object.__setattr__(self, "image_ids", ids)
        object.__setattr__(self, "blackbox", bbox)
        object.__setattr__(self, "truth", truth)
        object.__setattr__(self, "signatures", sigs)

    @property
    def size(self) -> int:
        return self.blackbox.shape[0]

    @property
    def universe_size(self) -> int:
        return len(self.image_ids)

    @property
    def signature_dim(self) -> int:
        return self.signatures.shape[1]


def estimate_conditional(corpus: TrainingCorpus, j: int, r: int) -> float | None:
    """P(relevant | retrieved == r) for image j, or None with no support."""
    mask = corpus.blackbox[:, j] == r
    m = int(mask.sum())
    if m == 0:
        return None
    return int((corpus.truth[mask, j] == 1).sum()) / m


def prior_estimate(corpus: TrainingCorpus, r: int) -> float:
    """Conditional pooled over every image and query; 0.5 with no support."""
    mask = corpus.blackbox == r
    denom = int(mask.sum())
    if denom == 0:
        return 0.5
    return int((corpus.truth[mask] == 1).sum()) / denom


def smooth(image_estimate: float | None, prior: float, m: int) -> float:
    """Interpolate an image-specific estimate with the prior by support m."""
    if m < 0:
        raise ValueError(f"m must be >= 0, got {m}")
    if m <= 1:
        return prior
    return (1.0 / m) * prior + ((m - 1.0) / m) * float(image_estimate)


def estimate_pairwise(
    corpus: TrainingCorpus, i: int, j: int, r_j: int, g_j: int, r_i: int
) -> float:
    """P(R_i = r_i | G_j = g_j, R_j = r_j) from counts; 0.5 with no support."""
    if i == j:
        raise ValueError("pairwise estimate requires distinct images")
    mask = (corpus.blackbox[:, j] == r_j) & (corpus.truth[:, j] == g_j)
    denom = int(mask.sum())
    if denom == 0:
        return 0.5
    return int((corpus.blackbox[mask, i] == r_i).sum()) / denom


def fit_visual_gaussians(corpus: TrainingCorpus):
    """Per (image, dimension, relevance value) mean/std of query signatures.

    Population std, floored at STD_FLOOR; strata with no samples fall back to
    the pooled per-dimension Gaussian. Returns (means, stds, global_mean,
    global_std) with means/stds shaped (K, 2, D).
    """
    k, d, sigs = corpus.universe_size, corpus.signature_dim, corpus.signatures
    global_mean = sigs.mean(axis=0)
    global_std = np.maximum(sigs.std(axis=0), STD_FLOOR)
    means = np.empty((k, 2, d))
    stds = np.empty((k, 2, d))
    for g in (0, 1):
        mask = (corpus.truth == g).astype(np.float64)  # (L, K)
        counts = mask.sum(axis=0)  # (K,)
        totals = mask.T @ sigs  # (K, D)
        squares = mask.T @ (sigs * sigs)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = totals / counts[:, None]
            var = squares / counts[:, None] - mean * mean
        std = np.sqrt(np.maximum(var, 0.0))
        empty = counts == 0
        mean[empty] = global_mean
        std[empty] = global_std
        means[:, g, :] = mean
        stds[:, g, :] = np.maximum(std, STD_FLOOR)
    return means, stds, global_mean, global_std


@dataclass(frozen=True)
class MetaModel:
    """Trained tables: everything scoring needs, counts kept as integers.

    ``pair_retrieved`` is indexed [i, j, r_j, g_j] and counts training
    queries with R_i = 1 among those with R_j = r_j and G_j = g_j;
    ``pair_support`` is the matching denominator [j, r_j, g_j]. Memory is
    O(K^2) counts, which caps the practical search space around a few
    thousand images.
    """

    image_ids: tuple[str, ...]
    cond_support: np.ndarray  # (K, 2) count of R_j = r
    cond_relevant: np.ndarray  # (K, 2) count of R_j = r and G_j = 1
    pair_retrieved: np.ndarray  # (K, K, 2, 2)
    pair_support: np.ndarray  # (K, 2, 2)
    vis_means: np.ndarray  # (K, 2, D)
    vis_stds: np.ndarray  # (K, 2, D)
    global_mean: np.ndarray  # (D,)
    global_std: np.ndarray  # (D,)

    @property
    def universe_size(self) -> int:
        return len(self.image_ids)

    @property
    def signature_dim(self) -> int:
        return self.global_mean.shape[0]

    def priors(self) -> np.ndarray:
        """Pooled P(relevant | retrieved == r) for r in {0, 1}."""
        out = np.empty(2)
        for r in (0, 1):
            denom = int(self.cond_support[:, r].sum())
            out[r] = (int(self.cond_relevant[:, r].sum()) / denom) if denom else 0.5
        return out

    def smoothed_conditional(self, j: int, r: int) -> float:
        m = int(self.cond_support[j, r])
        prior = float(self.priors()[r])
        if m <= 1:
            return prior
        estimate = int(self.cond_relevant[j, r]) / m
        return (1.0 / m) * prior + ((m - 1.0) / m) * estimate


def train_meta_model(corpus: TrainingCorpus) -> MetaModel:
    """Accumulate all counts and visual Gaussians in one pass."""
    bbox = corpus.blackbox.astype(np.int64)
    truth = corpus.truth.astype(np.int64)
    k = corpus.universe_size

    cond_support = np.empty((k, 2), dtype=np.int64)
    cond_relevant = np.empty((k, 2), dtype=np.int64)
    for r in (0, 1):
        mask = bbox == r
        cond_support[:, r] = mask.sum(axis=0)
        cond_relevant[:, r] = (mask & (truth == 1)).sum(axis=0)

    pair_retrieved = np.empty((k, k, 2, 2), dtype=np.int64)
    pair_support = np.empty((k, 2, 2), dtype=np.int64)
    for r_j in (0, 1):
        for g_j in (0, 1):
            mask = ((bbox == r_j) & (truth == g_j)).astype(np.int64)  # (L, K)
            pair_support[:, r_j, g_j] = mask.sum(axis=0)
            pair_retrieved[:, :, r_j, g_j] = bbox.T @ mask  # [i, j]

    vis_means, vis_stds, global_mean, global_std = fit_visual_gaussians(corpus)
    return MetaModel(
        image_ids=corpus.image_ids,
        cond_support=cond_support,
        cond_relevant=cond_relevant,
        pair_retrieved=pair_retrieved,
        pair_support=pair_support,
        vis_means=vis_means,
        vis_stds=vis_stds,
        global_mean=global_mean,
        global_std=global_std,
    )


def _clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def _log_gaussian(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return -0.5 * math.log(2.0 * math.pi) - np.log(std) - 0.5 * ((x - mean) / std) ** 2


def _log_odds_all(model: MetaModel, indicators: np.ndarray, signature: np.ndarray) -> np.ndarray:
    """Log-odds of relevance for every image in the universe, vectorized."""
    k = model.universe_size
    r = np.asarray(indicators, dtype=np.int64)
    if r.shape != (k,) or not np.isin(r, (0, 1)).all():
        raise ValueError(f"indicators must be a binary vector of length {k}")
    h = np.asarray(signature, dtype=np.float64)
    if h.shape != (model.signature_dim,):
        raise ValueError(
            f"signature must have length {model.signature_dim}, got {h.shape}"
        )
    idx = np.arange(k)
    priors = model.priors()

    # Smoothed performance-check logit per image.
    m = model.cond_support[idx, r].astype(np.float64)
    counts = model.cond_relevant[idx, r].astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        estimate = np.where(m > 0, counts / np.maximum(m, 1.0), 0.0)
    smoothed = np.where(m <= 1, priors[r], (1.0 / np.maximum(m, 2.0)) * priors[r]
                        + ((np.maximum(m, 2.0) - 1.0) / np.maximum(m, 2.0)) * estimate)
    p = _clamp(smoothed)
    check_term = np.log(p) - np.log(1.0 - p)

    # Pairwise co-retrieval log ratios, summed over i != j.
    logs = {}
    for g in (0, 1):
        support = model.pair_support[idx, r, g].astype(np.float64)  # (K,) per j
        retrieved = model.pair_retrieved[:, idx, r, g].astype(np.float64)  # (i, j)
        matching = np.where(r[:, None] == 1, retrieved, support[None, :] - retrieved)
        with np.errstate(invalid="ignore", divide="ignore"):
            probs = matching / support[None, :]
        probs = np.where(support[None, :] == 0, 0.5, probs)
        logs[g] = np.log(_clamp(probs))
    ratio = logs[1] - logs[0]
    pair_term = ratio.sum(axis=0) - ratio[idx, idx]

    # Visual signature log ratio per image.
    vis1 = _log_gaussian(h[None, :], model.vis_means[:, 1, :], model.vis_stds[:, 1, :])
    vis0 = _log_gaussian(h[None, :], model.vis_means[:, 0, :], model.vis_stds[:, 0, :])
    vis_term = (vis1 - vis0).sum(axis=1)

    return check_term + pair_term + vis_term


def log_odds(model: MetaModel, indicators, signature, j: int) -> float:
    """Log-odds that image j is relevant to the query behind the indicators."""
    if not 0 <= j < model.universe_size:
        raise ValueError(f"image index {j} out of range")
    return float(_log_odds_all(model, indicators, signature)[j])


def rerank(model: MetaModel, query_id: str, indicators, signature) -> Ranking:
    """Score the whole universe by log-odds; descending, ties by image id."""
    scores = _log_odds_all(model, indicators, signature)
    return Ranking.from_scores(query_id, zip(model.image_ids, (float(s) for s in scores)))


def corpus_from_rankings(
    rankings,
    truth: GroundTruthTable,
    signatures: dict[str, np.ndarray],
    image_universe,
    top: int,
) -> TrainingCorpus:
    """Assemble a corpus from black-box ranking output plus ground truth."""
    universe = tuple(image_universe)
    position = {image_id: i for i, image_id in enumerate(universe)}
    bbox_rows, truth_rows, sig_rows = [], [], []
    for ranking in rankings:
        if ranking.query_id not in truth:
            raise ValueError(f"query {ranking.query_id!r} missing from ground truth")
        if ranking.query_id not in signatures:
            raise ValueError(f"query {ranking.query_id!r} missing from signatures")
        bbox_rows.append(blackbox_indicators(ranking, top, universe))
        row = np.zeros(len(universe), dtype=np.uint8)
        for image_id in truth.relevant(ranking.query_id):
            if image_id in position:
                row[position[image_id]] = 1
        truth_rows.append(row)
        sig_rows.append(np.asarray(signatures[ranking.query_id], dtype=np.float64))
    return TrainingCorpus(universe, np.stack(bbox_rows), np.stack(truth_rows), np.stack(sig_rows))


# ---------------------------------------------------------------------------
# persistence


def save_meta_model(model: MetaModel, path: str | Path) -> None:
    k, d = model.universe_size, model.signature_dim
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"META 1 {k} {d}\n")
        for j, image_id in enumerate(model.image_ids):
            fh.write(f"image {j} {image_id}\n")
        for j in range(k):
            fh.write(
                f"cond {j} {model.cond_support[j, 0]} {model.cond_relevant[j, 0]} "
                f"{model.cond_support[j, 1]} {model.cond_relevant[j, 1]}\n"
            )
        for j in range(k):
            vals = " ".join(
                str(model.pair_support[j, rj, gj]) for rj in (0, 1) for gj in (0, 1)
            )
            fh.write(f"paird {j} {vals}\n")
        for i in range(k):
            for j in range(k):
                vals = " ".join(
                    str(model.pair_retrieved[i, j, rj, gj]) for rj in (0, 1) for gj in (0, 1)
                )
                fh.write(f"pair {i} {j} {vals}\n")
        for j in range(k):
            for dim in range(d):
                fh.write(
                    f"vis {j} {dim} "
                    f"{float(model.vis_means[j, 0, dim])!r} {float(model.vis_stds[j, 0, dim])!r} "
                    f"{float(model.vis_means[j, 1, dim])!r} {float(model.vis_stds[j, 1, dim])!r}\n"
                )
        for dim in range(d):
            fh.write(
                f"visglobal {dim} "
                f"{float(model.global_mean[dim])!r} {float(model.global_std[dim])!r}\n"
            )


def load_meta_model(path: str | Path) -> MetaModel:
    lines = _content_lines(path)
    try:
        line_no, header = next(lines)
    except StopIteration:
        raise FileFormatError(path, 0, "empty meta model file")
    parts = header.split()
    if len(parts) != 4 or parts[0] != "META" or parts[1] != "1":
        raise FileFormatError(path, line_no, f"bad header {header!r}")
    k, d = int(parts[2]), int(parts[3])
    ids: list = [None] * k
    cond_support = np.zeros((k, 2), dtype=np.int64)
    cond_relevant = np.zeros((k, 2), dtype=np.int64)
    pair_retrieved = np.zeros((k, k, 2, 2), dtype=np.int64)
    pair_support = np.zeros((k, 2, 2), dtype=np.int64)
    vis_means = np.zeros((k, 2, d))
    vis_stds = np.zeros((k, 2, d))
    global_mean = np.zeros(d)
    global_std = np.zeros(d)
    for line_no, line in lines:
        tokens = line.split()
        kind = tokens[0]
        try:
            if kind == "image" and len(tokens) == 3:
                ids[int(tokens[1])] = tokens[2]
            elif kind == "cond" and len(tokens) == 6:
                j = int(tokens[1])
                cond_support[j, 0], cond_relevant[j, 0] = int(tokens[2]), int(tokens[3])
                cond_support[j, 1], cond_relevant[j, 1] = int(tokens[4]), int(tokens[5])
            elif kind == "paird" and len(tokens) == 6:
                j = int(tokens[1])
                pair_support[j] = np.asarray([int(t) for t in tokens[2:]]).reshape(2, 2)
            elif kind == "pair" and len(tokens) == 7:
                i, j = int(tokens[1]), int(tokens[2])
                pair_retrieved[i, j] = np.asarray([int(t) for t in tokens[3:]]).reshape(2, 2)
            elif kind == "vis" and len(tokens) == 7:
                j, dim = int(tokens[1]), int(tokens[2])
                vis_means[j, 0, dim], vis_stds[j, 0, dim] = float(tokens[3]), float(tokens[4])
                vis_means[j, 1, dim], vis_stds[j, 1, dim] = float(tokens[5]), float(tokens[6])
            elif kind == "visglobal" and len(tokens) == 4:
                dim = int(tokens[1])
                global_mean[dim], global_std[dim] = float(tokens[2]), float(tokens[3])
            else:
                raise FileFormatError(path, line_no, f"bad meta model line {line!r}")
        except (ValueError, IndexError) as exc:
            if isinstance(exc, FileFormatError):
                raise
            raise FileFormatError(path, line_no, f"unparsable meta model line {line!r}") from exc
    if any(i is None for i in ids):
        raise FileFormatError(path, 0, "meta model file missing image lines")
    return MetaModel(
        image_ids=tuple(ids),
        cond_support=cond_support,
        cond_relevant=cond_relevant,
        pair_retrieved=pair_retrieved,
        pair_support=pair_support,
        vis_means=vis_means,
        vis_stds=vis_stds,
        global_mean=global_mean,
        global_std=global_std,
    )


def load_signature_file(path: str | Path) -> dict[str, np.ndarray]:
    signatures: dict[str, np.ndarray] = {}
    width = None
    for line_no, line in _content_lines(path):
        tokens = line.split()
        if len(tokens) < 2:
            raise FileFormatError(path, line_no, f"bad signature line {line!r}")
        image_id = tokens[0]
        if image_id in signatures:
            raise FileFormatError(path, line_no, f"duplicate signature for {image_id!r}")
        try:
            values = np.asarray([float(t) for t in tokens[1:]])
        except ValueError:
            raise FileFormatError(path, line_no, f"unparsable signature line {line!r}") from None
        if width is None:
            width = values.shape[0]
        elif values.shape[0] != width:
            raise FileFormatError(
                path, line_no, f"signature length {values.shape[0]} != {width}"
            )
        signatures[image_id] = values
    return signatures


def write_signature_file(signatures: dict[str, np.ndarray], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, values in signatures.items():
            fh.write(image_id + " " + " ".join(repr(float(v)) for v in values) + "\n")
