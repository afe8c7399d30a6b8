"""Analytic probability models, score fields, denoising, and the affine DSM fit.

The data model throughout is a weighted mixture of isotropic Gaussians
(:class:`GmmModel`). It serves three roles at once: target distribution,
exact score source (noise-free or noise-convolved), and exact sampler.
A single component is just a Gaussian, which covers the white
high-dimensional scenario as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DegenerateDataError, UsageError
from .rng import RandomSource

_LOG_TWO_PI = math.log(2.0 * math.pi)


def _as_point(point, dim: int) -> np.ndarray:
    x = np.asarray(point, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.ndim != 1 or x.shape[0] != dim:
        raise UsageError(f"expected a point of dimension {dim}, got shape {x.shape}")
    return x


def _as_points(points, dim: int) -> tuple[np.ndarray, bool]:
    """Coerce to (n, dim); returns (array, was_single_point)."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise UsageError(f"expected a point of dimension {dim}, got shape {x.shape}")
        return x.reshape(1, dim), True
    if x.ndim != 2 or x.shape[1] != dim:
        raise UsageError(f"expected points of dimension {dim}, got shape {x.shape}")
    return x, False


@dataclass(frozen=True)
class GmmModel:
    """Weighted mixture of isotropic Gaussians in R^dim.

    Parameters
    ----------
    weights : (K,) array
        Mixing weights; nonnegative, summing to 1 within 1e-12.
    means : (K, dim) array
        Component means.
    variances : (K,) array
        Per-component isotropic variances (covariance = variance * I).
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.asarray(self.means, dtype=float)
        if m.ndim == 1:
            m = m.reshape(len(w), -1)
        v = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if w.ndim != 1 or m.ndim != 2 or v.ndim != 1:
            raise UsageError("weights and variances must be 1-D, means 2-D")
        if not (len(w) == m.shape[0] == len(v)) or len(w) == 0:
            raise UsageError("weights, means, and variances must have one entry per component")
        if np.any(w < 0.0):
            raise UsageError("mixture weights must be nonnegative")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise UsageError(f"mixture weights must sum to 1 within 1e-12, got {w.sum()!r}")
        if w.max() <= 0.0:
            raise UsageError("at least one mixture weight must be positive")
        if np.any(v <= 0.0):
            raise UsageError("component variances must be positive")
        if m.shape[1] < 1:
            raise UsageError("model dimension must be at least 1")
        for name, arr in (("weights", w), ("means", m), ("variances", v)):
            if not np.all(np.isfinite(arr)):
                raise UsageError(f"{name} must be finite")
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def components(self) -> list[tuple[float, np.ndarray, float]]:
        """(weight, mean, variance) triples, as in the on-disk schema."""
        return [
            (float(w), self.means[k].copy(), float(v))
            for k, (w, v) in enumerate(zip(self.weights, self.variances))
        ]

    def covariance(self) -> np.ndarray:
        """Exact covariance of the mixture."""
        mean = self.weights @ self.means
        centered = self.means - mean
        scatter = (self.weights[:, None] * centered).T @ centered
        return float(self.weights @ self.variances) * np.eye(self.dim) + scatter


def gaussian_model(dim: int, variance: float = 1.0, mean=None) -> GmmModel:
    """Single-component model: N(mean, variance * I)."""
    if mean is None:
        mean = np.zeros(int(dim))
    mean = np.asarray(mean, dtype=float).reshape(1, -1)
    return GmmModel(np.array([1.0]), mean, np.array([float(variance)]))


def canonical_gmm(kernels: int) -> GmmModel:
    """The 2-D benchmark family used by the experiments.

    ``kernels`` equally weighted isotropic components with means on the
    unit circle (at the origin for a single kernel), phase pi/4, and
    kernel variance chosen so every coordinate of the mixture has
    variance exactly 1.0: variance 1.0 for K=1, 0.5 for K>=2. Adjacent
    kernels then sit 2-3 standard deviations apart and overlap slightly.
    """
    k = int(kernels)
    if not 1 <= k <= 16:
        raise UsageError(f"kernel count must be in [1, 16], got {kernels}")
    if k == 1:
        return gaussian_model(2, variance=1.0)
    angles = np.pi / 4.0 + 2.0 * np.pi * np.arange(k) / k
    means = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    weights = np.full(k, 1.0 / k)
    weights = weights / weights.sum()
    return GmmModel(weights, means, np.full(k, 0.5))


# ---------------------------------------------------------------------------
# Densities and scores
# ---------------------------------------------------------------------------


def _log_weights(model: GmmModel) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(model.weights > 0.0, np.log(model.weights), -np.inf)


def _component_log_likelihoods(model: GmmModel, points: np.ndarray) -> np.ndarray:
    """log(w_k) + log N(x | m_k, v_k I) for each point/component, (n, K)."""
    diff = points[:, None, :] - model.means[None, :, :]
    sq = np.square(diff).sum(axis=-1)
    log_norm = -0.5 * model.dim * (_LOG_TWO_PI + np.log(model.variances))
    return _log_weights(model) + log_norm - 0.5 * sq / model.variances


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    hi = np.max(a, axis=axis, keepdims=True)
    hi = np.where(np.isfinite(hi), hi, 0.0)
    return np.squeeze(hi, axis) + np.log(np.sum(np.exp(a - hi), axis=axis))


def gmm_log_pdf(model: GmmModel, point) -> float:
    """Log-density of the mixture at ``point``, via log-sum-exp."""
    pts, _ = _as_points(point, model.dim)
    return float(_logsumexp(_component_log_likelihoods(model, pts), axis=1)[0])


def gmm_log_pdf_batch(model: GmmModel, points) -> np.ndarray:
    """Log-density at each row of ``points`` (n, dim)."""
    pts, _ = _as_points(points, model.dim)
    return _logsumexp(_component_log_likelihoods(model, pts), axis=1)


class _GmmScore:
    """Responsibility-weighted score of a mixture, tuned for per-step calls.

    Per-model constants are precomputed once; a single-component model
    short-circuits to the linear Gaussian score.
    """

    def __init__(self, model: GmmModel):
        self.model = model
        self._dim = model.dim
        self._means = model.means
        self._inv_var = 1.0 / model.variances
        self._log_w_norm = _log_weights(model) - 0.5 * model.dim * (
            _LOG_TWO_PI + np.log(model.variances)
        )
        self._single = model.n_components == 1

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 0 or pts.shape[-1] != self._dim or pts.ndim > 2:
            raise UsageError(f"expected points of dimension {self._dim}, got shape {pts.shape}")
        if self._single:
            return (self._means[0] - pts) * self._inv_var[0]
        if pts.ndim == 1:
            diff = pts - self._means
            log_lik = self._log_w_norm - 0.5 * self._inv_var * np.square(diff).sum(axis=1)
            log_lik -= log_lik.max()
            resp = np.exp(log_lik)
            return -(resp * self._inv_var / resp.sum()) @ diff
        diff = pts[:, None, :] - self._means[None, :, :]
        log_lik = self._log_w_norm - 0.5 * self._inv_var * np.square(diff).sum(axis=-1)
        log_lik -= log_lik.max(axis=1, keepdims=True)
        resp = np.exp(log_lik)
        resp /= resp.sum(axis=1, keepdims=True)
        return -((resp * self._inv_var)[:, :, None] * diff).sum(axis=1)


def gmm_score(model: GmmModel, point) -> np.ndarray:
    """Gradient of :func:`gmm_log_pdf` at ``point``.

    Computed analytically through the component responsibilities
    (softmax of component log-likelihoods), not by differencing.
    """
    pts, single = _as_points(point, model.dim)
    out = _GmmScore(model)(pts)
    return out[0] if single else out


def noisy_model(model: GmmModel, sigma2: float) -> GmmModel:
    """Model of data convolved with N(0, sigma2 * I).

    Same weights and means; every component variance grows by
    ``sigma2``. The score of the returned model is the exact
    noisy-data score of the input model at that noise level.
    """
    s2 = float(sigma2)
    if s2 <= 0.0:
        raise UsageError(f"noise variance must be positive, got {sigma2!r}")
    return GmmModel(model.weights, model.means, model.variances + s2)


@dataclass(frozen=True)
class ScoreField:
    """A vector field point -> gradient of a log-density.

    ``noise_variance`` records the variance of Gaussian noise convolved
    into the underlying density (0 means the noise-free score). The
    evaluator accepts a single point of shape (dim,) and, for batch use,
    an (n, dim) array of points.
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    noise_variance: float
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise UsageError("score field dimension must be positive")
        if self.noise_variance < 0.0:
            raise UsageError("noise variance tag must be nonnegative")

    def __call__(self, point) -> np.ndarray:
        return self.evaluator(point)


@dataclass(frozen=True)
class _ZeroScoreEvaluator:
    dim: int

    def __call__(self, point):
        pts, single = _as_points(point, self.dim)
        return np.zeros(self.dim) if single else np.zeros_like(pts)


def score_field(model: GmmModel) -> ScoreField:
    """Noise-free score field of ``model``."""
    return ScoreField(_GmmScore(model), noise_variance=0.0, dim=model.dim)


def noisy_score_field(model: GmmModel, sigma2: float) -> ScoreField:
    """Exact noisy-data score field of ``model`` at noise level ``sigma2``."""
    convolved = noisy_model(model, sigma2)
    return ScoreField(_GmmScore(convolved), noise_variance=float(sigma2), dim=model.dim)


def zero_score_field(dim: int) -> ScoreField:
    """Identically-zero field (score of an improper flat density)."""
    return ScoreField(_ZeroScoreEvaluator(int(dim)), noise_variance=0.0, dim=int(dim))


# ---------------------------------------------------------------------------
# Denoising
# ---------------------------------------------------------------------------


def tweedie_denoise(noisy_score: ScoreField, sigma2: float, x_noisy) -> np.ndarray:
    """Posterior-mean denoiser: x_noisy + sigma2 * score(x_noisy).

    With the exact noisy-data score this equals E{x | x_noisy} for data
    observed under additive N(0, sigma2 * I) noise, the MSE-optimal
    denoiser.
    """
    s2 = float(sigma2)
    if s2 <= 0.0:
        raise UsageError(f"noise variance must be positive, got {sigma2!r}")
    pts, single = _as_points(x_noisy, noisy_score.dim)
    out = pts + s2 * np.asarray(noisy_score(pts), dtype=float).reshape(pts.shape)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Sample sets and exact sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleSet:
    """Ordered draws in R^dim with provenance."""

    points: np.ndarray
    dim: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[1] != self.dim:
            raise UsageError(f"points must have shape (n, {self.dim}), got {pts.shape}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def exact_sample(model: GmmModel, n: int, rng: RandomSource) -> SampleSet:
    """``n`` i.i.d. draws from the mixture.

    Component indices come from ``n`` uniforms against the cumulative
    weights, then one standard-normal block of shape (n, dim) is scaled
    and shifted per chosen component. Deterministic given the seed.
    """
    n = int(n)
    if n < 1:
        raise UsageError(f"sample count must be >= 1, got {n}")
    cum = np.cumsum(model.weights)
    cum[-1] = 1.0
    idx = np.searchsorted(cum, rng.uniform(n), side="right")
    z = rng.standard_normal((n, model.dim))
    pts = model.means[idx] + np.sqrt(model.variances[idx])[:, None] * z
    return SampleSet(pts, model.dim, provenance={"generator": "exact", "seed": rng.seed, "n": n})


# ---------------------------------------------------------------------------
# Closed-form denoising-regression fit of an affine score
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineScore:
    """Affine vector field z -> matrix @ z + offset with symmetric matrix.

    Score fields are gradients, so their Jacobians are symmetric; the
    family is restricted accordingly.
    """

    matrix: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=float)
        b = np.asarray(self.offset, dtype=float).reshape(-1)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != b.shape[0]:
            raise UsageError("matrix must be square and match the offset length")
        if np.max(np.abs(a - a.T)) > 1e-10:
            raise UsageError("affine score matrix must be symmetric within 1e-10")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "matrix", a)
        object.__setattr__(self, "offset", b)

    @property
    def dim(self) -> int:
        return self.offset.shape[0]

    def __call__(self, point):
        pts, single = _as_points(point, self.dim)
        out = pts @ self.matrix.T + self.offset
        return out[0] if single else out

    def as_score_field(self, noise_variance: float) -> ScoreField:
        return ScoreField(self, noise_variance=float(noise_variance), dim=self.dim)


def dsm_fit_affine(samples: SampleSet, sigma2: float, rng: RandomSource) -> AffineScore:
    """Fit the affine score that minimizes the denoising regression loss.

    Draws one noise vector per sample point, forms pairs
    (x, x_noisy = x + sigma * n), and minimizes

        sum_i || x_i - (x_noisy_i + sigma2 * (A x_noisy_i + b)) ||^2

    exactly over symmetric A and offset b. Eliminating b reduces the
    problem to the Lyapunov equation C A + A C = G + G^T in the centered
    second-moment matrix C of the noisy points, solved in C's eigenbasis.
    In the large-sample limit on Gaussian data the solution is
    -(cov(x) + sigma2 I)^{-1} with zero offset.
    """
    s2 = float(sigma2)
    if s2 <= 0.0:
        raise UsageError(f"noise variance must be positive, got {sigma2!r}")
    x = samples.points
    n, dim = x.shape
    if n < dim + 1:
        raise DegenerateDataError(
            f"need at least dim+1 = {dim + 1} samples to fit an affine score, got {n}"
        )
    noise = rng.standard_normal((n, dim))
    x_noisy = x + math.sqrt(s2) * noise
    # Targets of the regression: the score it should reproduce,
    # (x - x_noisy) / sigma2 = -n / sigma.
    y = (x - x_noisy) / s2

    z_mean = x_noisy.mean(axis=0)
    y_mean = y.mean(axis=0)
    zc = x_noisy - z_mean
    yc = y - y_mean
    scatter = zc.T @ zc
    cross = yc.T @ zc

    eigvals, eigvecs = np.linalg.eigh(scatter)
    if eigvals[0] <= max(1e-12 * eigvals[-1], 0.0):
        raise DegenerateDataError("noisy sample scatter is singular; cannot fit an affine score")
    rhs = eigvecs.T @ (cross + cross.T) @ eigvecs
    a_eig = rhs / (eigvals[:, None] + eigvals[None, :])
    matrix = eigvecs @ a_eig @ eigvecs.T
    matrix = 0.5 * (matrix + matrix.T)
    offset = y_mean - matrix @ z_mean
    return AffineScore(matrix, offset)


# ---------------------------------------------------------------------------
# Plain-text model files
# ---------------------------------------------------------------------------

_MODEL_FILE_HEADER = "# gmm model: dim, weights, variances, mean.<k> entries"


def save_gmm_model(model: GmmModel, path) -> None:
    """Write ``model`` to a plain-text key-value file.

    Schema: ``dim = <int>``, ``weights = <w_0> ... <w_{K-1}>``,
    ``variances = <v_0> ...``, and one ``mean.<k> = <coord> ...`` line
    per component. Blank lines and ``#`` comments are ignored on read.
    """
    lines = [_MODEL_FILE_HEADER]
    lines.append(f"dim = {model.dim}")
    lines.append("weights = " + " ".join(repr(float(w)) for w in model.weights))
    lines.append("variances = " + " ".join(repr(float(v)) for v in model.variances))
    for k in range(model.n_components):
        lines.append(f"mean.{k} = " + " ".join(repr(float(c)) for c in model.means[k]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_gmm_model(path) -> GmmModel:
    """Read a model written by :func:`save_gmm_model`."""
    entries: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key in entries:
                raise UsageError(f"{path}:{lineno}: duplicate key {key!r}")
            entries[key] = value.strip()

    def _pop(key: str) -> str:
        if key not in entries:
            raise UsageError(f"{path}: missing required key {key!r}")
        return entries.pop(key)

    try:
        dim = int(_pop("dim"))
        weights = np.array([float(t) for t in _pop("weights").split()])
        variances = np.array([float(t) for t in _pop("variances").split()])
        means = np.empty((len(weights), dim))
        for k in range(len(weights)):
            coords = [float(t) for t in _pop(f"mean.{k}").split()]
            if len(coords) != dim:
                raise UsageError(f"{path}: mean.{k} must have {dim} coordinates")
            means[k] = coords
    except ValueError as exc:
        raise UsageError(f"{path}: malformed numeric value ({exc})") from exc
    if entries:
        raise UsageError(f"{path}: unknown keys {sorted(entries)}")
    return GmmModel(weights, means, variances)
