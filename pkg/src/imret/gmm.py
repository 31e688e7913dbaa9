"""Diagonal-covariance Gaussian mixtures.

EM fitting (k-means initialized, variance-floored), per-point densities and
responsibilities in log space, the closed-form KL divergence between single
Gaussians, and the closed-form C2 distance between mixtures built from
pairwise Gaussian product integrals.

Model file format: ``GMM 1 <d> <Q>`` header, then per component a weight
line, a mean line and a variance line (reals via repr, bit-exact round trip).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import clustering

__all__ = [
    "Gaussian",
    "GaussianMixture",
    "EmConfig",
    "EmFit",
    "fit_gmm",
    "em_fit",
    "fit_ubm",
    "log_pdf",
    "log_pdf_array",
    "responsibilities",
    "log_responsibilities_matrix",
    "kl_gaussian",
    "gaussian_product_integral",
    "c2_distance",
    "save_gmm",
    "load_gmm",
]

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


def _vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Gaussian:
    """Single diagonal-covariance Gaussian."""

    mean: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        mean = _vector(self.mean, "mean")
        variances = _vector(self.variances, "variances")
        if mean.shape != variances.shape:
            raise ValueError("mean and variances must have the same length")
        if not np.all(variances > 0):
            raise ValueError("variances must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variances", variances)

    @property
    def dimension(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class GaussianMixture:
    """Weights, means and diagonal variances for Q components."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        weights = _vector(self.weights, "weights")
        means = np.array(self.means, dtype=np.float64)
        variances = np.array(self.variances, dtype=np.float64)
        if means.ndim != 2 or means.shape != variances.shape:
            raise ValueError("means and variances must be matching (Q, d) arrays")
        if weights.shape[0] != means.shape[0] or weights.shape[0] < 1:
            raise ValueError("weights length must equal the component count")
        if not np.all(weights > 0):
            raise ValueError("weights must be strictly positive")
        if abs(float(weights.sum()) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {float(weights.sum())!r}")
        if not np.all(variances > 0):
            raise ValueError("variances must be strictly positive")
        means.setflags(write=False)
        variances.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)

    @property
    def component_count(self) -> int:
        return self.weights.shape[0]

    @property
    def dimension(self) -> int:
        return self.means.shape[1]

    def component(self, q: int) -> Gaussian:
        return Gaussian(self.means[q], self.variances[q])


@dataclass(frozen=True)
class EmConfig:
    """EM fitting knobs.

    ``variance_floor`` is a fraction of each dimension's sample variance
    (absolute for constant dimensions); ``tolerance`` is the mean
    log-likelihood delta that counts as converged.
    """

    max_iterations: int = 100
    tolerance: float = 1e-6
    variance_floor: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.tolerance <= 0 or self.variance_floor <= 0:
            raise ValueError("tolerance and variance_floor must be positive")


@dataclass(frozen=True)
class EmFit:
    mixture: GaussianMixture
    log_likelihoods: tuple[float, ...]
    iterations: int
    converged: bool


def _component_log_pdfs(mixture: GaussianMixture, points: np.ndarray) -> np.ndarray:
    """(n, Q) log N(x | mu_q, Sigma_q) for diagonal Sigma."""
    var = mixture.variances  # (Q, d)
    log_norm = -0.5 * (mixture.dimension * _LOG_2PI + np.log(var).sum(axis=1))  # (Q,)
    diff = points[:, None, :] - mixture.means[None, :, :]  # (n, Q, d)
    quad = np.einsum("nqd,qd->nq", diff * diff, 1.0 / var)
    return log_norm[None, :] - 0.5 * quad


def _points(mixture: GaussianMixture, x) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if arr.shape[1] != mixture.dimension:
        raise ValueError(f"point dimension {arr.shape[1]} != mixture dimension {mixture.dimension}")
    return arr


def log_pdf_array(mixture: GaussianMixture, points) -> np.ndarray:
    """log of the mixture density at each row of ``points``."""
    pts = _points(mixture, points)
    joint = np.log(mixture.weights)[None, :] + _component_log_pdfs(mixture, pts)
    peak = joint.max(axis=1)
    return peak + np.log(np.exp(joint - peak[:, None]).sum(axis=1))


def log_pdf(mixture: GaussianMixture, x) -> float:
    return float(log_pdf_array(mixture, [np.asarray(x, dtype=np.float64)])[0])


def log_responsibilities_matrix(mixture: GaussianMixture, points) -> np.ndarray:
    """(n, Q) log posterior component probabilities, log-sum-exp normalized."""
    pts = _points(mixture, points)
    joint = np.log(mixture.weights)[None, :] + _component_log_pdfs(mixture, pts)
    peak = joint.max(axis=1)
    norm = peak + np.log(np.exp(joint - peak[:, None]).sum(axis=1))
    return joint - norm[:, None]


def responsibilities(mixture: GaussianMixture, x) -> np.ndarray:
    """Posterior component probabilities for one point; sums to 1."""
    gamma = np.exp(log_responsibilities_matrix(mixture, [np.asarray(x, dtype=np.float64)])[0])
    return gamma / gamma.sum()


def em_fit(vectors, component_count: int, config: EmConfig = EmConfig()) -> EmFit:
    """Fit a diagonal GMM with EM and return the full fit record.

    Initialization is k-means with the same seed; per-cluster statistics seed
    the first E step. Mean log-likelihood is checked non-decreasing (within
    1e-9) every iteration; a component that collapses to zero responsibility
    is reseeded from the lowest-likelihood point, which restarts that check.
    """
    points = np.asarray(vectors, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError(f"expected a non-empty (n, d) array, got shape {points.shape}")
    n, d = points.shape
    q = component_count
    if q < 1:
        raise ValueError("component_count must be positive")
    if np.unique(points, axis=0).shape[0] < q:
        raise ValueError(f"need at least {q} distinct vectors, have fewer")

    data_var = points.var(axis=0)
    floor = np.where(data_var > 0, config.variance_floor * data_var, config.variance_floor)

    init = clustering.kmeans(points, q, seed=config.seed, max_iterations=50)
    assign = np.asarray(init.assignments)
    weights = np.zeros(q)
    means = np.array(init.representatives, dtype=np.float64)
    variances = np.zeros((q, d))
    for c in range(q):
        mask = assign == c
        weights[c] = mask.sum() / n
        if mask.any():
            means[c] = points[mask].mean(axis=0)
            variances[c] = np.maximum(points[mask].var(axis=0), floor)
        else:
            variances[c] = np.maximum(data_var, floor)
            weights[c] = 1.0 / n
    weights = weights / weights.sum()

    history: list[float] = []
    previous = -math.inf
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        mixture = GaussianMixture(weights, means, variances)
        joint = np.log(weights)[None, :] + _component_log_pdfs(mixture, points)
        peak = joint.max(axis=1)
        log_norm = peak + np.log(np.exp(joint - peak[:, None]).sum(axis=1))
        ll = float(log_norm.mean())
        if ll < previous - 1e-9:
            raise RuntimeError(
                f"EM mean log-likelihood decreased ({previous} -> {ll}); "
                "internal invariant broken"
            )
        history.append(ll)
        if math.isfinite(previous) and abs(ll - previous) < config.tolerance:
            converged = True
            break
        previous = ll

        resp = np.exp(joint - log_norm[:, None])  # (n, Q)
        counts = resp.sum(axis=0)
        collapsed = np.flatnonzero(counts < 1e-10)
        if collapsed.size:
            worst = np.argsort(log_norm, kind="stable")
            for c, idx in zip(collapsed, worst):
                log.info("EM component %d collapsed; reseeding from point %d", c, int(idx))
                means[c] = points[int(idx)]
                variances[c] = np.maximum(data_var, floor)
                weights[c] = 1.0 / n
            keep = np.setdiff1d(np.arange(q), collapsed)
            for c in keep:
                weights[c] = counts[c] / n
                means[c] = resp[:, c] @ points / counts[c]
                second = resp[:, c] @ (points * points) / counts[c]
                variances[c] = np.maximum(second - means[c] ** 2, floor)
            weights = weights / weights.sum()
            previous = -math.inf  # reseeding restarts the monotonicity chain
            continue
        weights = counts / n
        means = (resp.T @ points) / counts[:, None]
        second = (resp.T @ (points * points)) / counts[:, None]
        variances = np.maximum(second - means * means, floor)

    return EmFit(
        mixture=GaussianMixture(weights, means, variances),
        log_likelihoods=tuple(history),
        iterations=iterations,
        converged=converged,
    )


def fit_gmm(vectors, component_count: int, config: EmConfig = EmConfig()) -> GaussianMixture:
    return em_fit(vectors, component_count, config).mixture


def fit_ubm(database, component_count: int, config: EmConfig = EmConfig()) -> GaussianMixture:
    """Fit one large mixture on the pooled vectors of every database image.

    Sets are pooled in sorted image_id order so the fit does not depend on
    database file order.
    """
    ordered = sorted(database.sets, key=lambda s: s.image_id)
    if not ordered:
        raise ValueError("database has no feature sets")
    pooled = np.concatenate([s.array for s in ordered], axis=0)
    return fit_gmm(pooled, component_count, config)


def kl_gaussian(p: Gaussian, q: Gaussian) -> float:
    """KL(p || q) between diagonal Gaussians, summed over dimensions."""
    if p.dimension != q.dimension:
        raise ValueError("dimension mismatch")
    ratio = p.variances / q.variances
    diff = q.mean - p.mean
    per_dim = 0.5 * (ratio + diff * diff / q.variances - 1.0 + np.log(q.variances / p.variances))
    return float(per_dim.sum())


def gaussian_product_integral(p: Gaussian, q: Gaussian) -> float:
    """The integral of the product of two diagonal Gaussian densities."""
    if p.dimension != q.dimension:
        raise ValueError("dimension mismatch")
    combined = p.variances + q.variances
    diff = p.mean - q.mean
    log_value = -0.5 * (
        p.dimension * _LOG_2PI + np.log(combined).sum() + (diff * diff / combined).sum()
    )
    return float(np.exp(log_value))


def _cross_integral(p: GaussianMixture, q: GaussianMixture) -> float:
    """Mixture-weighted sum of pairwise product integrals.

    Terms are sorted before summation so the value is independent of
    argument order (exact symmetry of the C2 distance).
    """
    terms = []
    for i in range(p.component_count):
        pi = p.component(i)
        for j in range(q.component_count):
            terms.append(
                float(p.weights[i]) * float(q.weights[j])
                * gaussian_product_integral(pi, q.component(j))
            )
    return float(np.sort(np.asarray(terms)).sum())


def c2_distance(p: GaussianMixture, q: GaussianMixture) -> float:
    """Closed-form C2 distance -log(2 S_pq / (S_pp + S_qq)); 0 for p == q."""
    if p.dimension != q.dimension:
        raise ValueError("dimension mismatch")
    s_pq = _cross_integral(p, q)
    s_pp = _cross_integral(p, p)
    s_qq = _cross_integral(q, q)
    return -math.log(2.0 * s_pq / (s_pp + s_qq)) + 0.0


def save_gmm(mixture: GaussianMixture, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"GMM 1 {mixture.dimension} {mixture.component_count}\n")
        for c in range(mixture.component_count):
            fh.write(repr(float(mixture.weights[c])) + "\n")
            fh.write(" ".join(repr(float(v)) for v in mixture.means[c]) + "\n")
            fh.write(" ".join(repr(float(v)) for v in mixture.variances[c]) + "\n")


def load_gmm(path: str | Path) -> GaussianMixture:
    from .store import FileFormatError, _content_lines

    lines = _content_lines(path)
    try:
        line_no, header = next(lines)
    except StopIteration:
        raise FileFormatError(path, 0, "empty model file (missing GMM header)")
    parts = header.split()
    if len(parts) != 4 or parts[0] != "GMM" or parts[1] != "1":
        raise FileFormatError(path, line_no, f"bad header {header!r}, expected 'GMM 1 <d> <Q>'")
    d, q = int(parts[2]), int(parts[3])
    weights = np.zeros(q)
    means = np.zeros((q, d))
    variances = np.zeros((q, d))
    for c in range(q):
        for row, target, width in (
            ("weight", weights, 1),
            ("mean", means, d),
            ("variance", variances, d),
        ):
            try:
                line_no, line = next(lines)
            except StopIteration:
                raise FileFormatError(path, line_no, f"truncated model: missing {row} of component {c}")
            values = line.split()
            if len(values) != width:
                raise FileFormatError(
                    path, line_no, f"{row} line has {len(values)} values, expected {width}"
                )
            if width == 1:
                target[c] = float(values[0])
            else:
                target[c] = [float(v) for v in values]
    return GaussianMixture(weights, means, variances)
