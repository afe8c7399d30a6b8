"""Closed-form covariance theory for Gaussian targets.

For a zero-mean Gaussian score ``score(z) = -inv(sigma_score) @ z`` the
noise-corrected iteration is linear, so the chain covariance obeys an
exact recursion

    next = M @ cur @ M + sigma2 * M @ M + (2 mu - sigma2) * I,
    M = I - mu * inv(sigma_score),

whose fixed point has the closed form

    stationary = -sigma2 * I + sigma_score @ inv(I - (mu / 2) * inv(sigma_score)).

Setting the correction noise ``sigma2`` to zero recovers plain Langevin
on whatever score is supplied, so the same formula yields all three
arms: the corrected sampler on the noisy score, the misspecified basic
sampler on the noisy score, and the oracle sampler on the true score.
Their first-order biases against the data covariance are (mu/2) I,
(sigma2_data + mu/2) I, and (mu/2) I; at the half-denoising step size
mu = sigma2/2 the basic-to-corrected ratio is exactly five.

The correction noise is a separate argument from the score's own noise
level throughout: the recursion holds for any (score covariance,
correction) pairing, matched or not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import UsageError

_STATIONARY_TOL = 1e-10
_MAX_FIXED_POINT_ITERATIONS = 10_000


def _as_spd(matrix, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Validate symmetry and positive-definiteness; return (matrix, eigvals, eigvecs)."""
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise UsageError(f"{name} must be a square matrix, got shape {m.shape}")
    if np.max(np.abs(m - m.T)) > 1e-10 * max(1.0, np.max(np.abs(m))):
        raise UsageError(f"{name} must be symmetric")
    eigvals, eigvecs = np.linalg.eigh(m)
    if eigvals[0] <= 0.0:
        raise UsageError(f"{name} must be positive definite (min eigenvalue {eigvals[0]!r})")
    return m, eigvals, eigvecs


def contraction_matrix(sigma_score, mu: float) -> np.ndarray:
    """M = I - mu * inv(sigma_score)."""
    m, eigvals, eigvecs = _as_spd(sigma_score, "sigma_score")
    d = 1.0 - float(mu) / eigvals
    return (eigvecs * d) @ eigvecs.T


def contraction_check(sigma_score, mu: float) -> float:
    """Spectral norm of M = I - mu * inv(sigma_score).

    A value in (0, 1) certifies global convergence of the Gaussian
    covariance recursion: a perturbation of the fixed point contracts
    by at least the squared norm per iteration, whatever its size.
    """
    _, eigvals, _ = _as_spd(sigma_score, "sigma_score")
    mu = float(mu)
    if mu <= 0.0:
        raise UsageError(f"step size mu must be positive, got {mu!r}")
    return float(np.max(np.abs(1.0 - mu / eigvals)))


def covariance_recursion_step(sigma_cur, sigma_score, mu: float, sigma2: float) -> np.ndarray:
    """One exact covariance update of the Gaussian iteration."""
    mu = float(mu)
    sigma2 = float(sigma2)
    if not mu >= sigma2 / 2.0 >= 0.0:
        raise UsageError(f"need mu >= sigma2/2 >= 0, got mu = {mu!r}, sigma2 = {sigma2!r}")
    cur = np.atleast_2d(np.asarray(sigma_cur, dtype=float))
    m = contraction_matrix(sigma_score, mu)
    dim = m.shape[0]
    if cur.shape != m.shape:
        raise UsageError(f"sigma_cur must have shape {m.shape}, got {cur.shape}")
    return m @ cur @ m + sigma2 * (m @ m) + (2.0 * mu - sigma2) * np.eye(dim)


def stationary_covariance(sigma_score, mu: float, sigma2_correction: float) -> np.ndarray:
    """Fixed point of the covariance recursion, in closed form.

    ``sigma2_correction`` is the iteration's own correction noise; zero
    recovers plain Langevin driven by the given score covariance.
    Agrees with iterating :func:`covariance_recursion_step` to
    convergence.
    """
    _, eigvals, eigvecs = _as_spd(sigma_score, "sigma_score")
    mu = float(mu)
    sigma2 = float(sigma2_correction)
    if mu <= 0.0:
        raise UsageError(f"step size mu must be positive, got {mu!r}")
    if sigma2 < 0.0:
        raise UsageError("sigma2_correction must be nonnegative")
    bracket = eigvals - mu / 2.0
    if np.any(np.abs(bracket) <= 1e-14 * np.max(eigvals)):
        raise UsageError("I - (mu/2) inv(sigma_score) is singular for this step size")
    d = -sigma2 + eigvals**2 / bracket
    return (eigvecs * d) @ eigvecs.T


def iterate_to_fixed_point(
    sigma_score,
    mu: float,
    sigma2: float,
    start: Optional[np.ndarray] = None,
    tol: float = _STATIONARY_TOL,
    max_iterations: int = _MAX_FIXED_POINT_ITERATIONS,
) -> tuple[np.ndarray, int]:
    """Iterate the covariance recursion until successive iterates agree.

    Returns (fixed point, iterations used). Stops when the Frobenius
    distance between iterates drops below ``tol``.
    """
    m, _, _ = _as_spd(sigma_score, "sigma_score")
    norm_m = contraction_check(sigma_score, mu)
    if norm_m >= 1.0:
        raise UsageError(
            f"covariance recursion does not contract (spectral norm {norm_m!r}); reduce mu"
        )
    cur = np.zeros_like(m) if start is None else np.atleast_2d(np.asarray(start, dtype=float))
    for iteration in range(1, max_iterations + 1):
        nxt = covariance_recursion_step(cur, sigma_score, mu, sigma2)
        if float(np.linalg.norm(nxt - cur)) < tol:
            return nxt, iteration
        cur = nxt
    raise UsageError(f"covariance recursion did not converge in {max_iterations} iterations")


@dataclass(frozen=True)
class BiasPredictions:
    """First-order stationary biases at a given (mu, sigma2) pairing.

    ``proposed`` and ``oracle`` are (mu/2) I; ``basic`` run with the
    noisy score but no correction is (sigma2 + mu/2) I. ``ratio``
    is the predicted basic-to-proposed ratio (sigma2 + mu/2) / (mu/2),
    exactly 5 at mu = sigma2/2.
    """

    proposed: np.ndarray
    basic: np.ndarray
    oracle: np.ndarray
    ratio: float


def bias_predictions(sigma_x, mu: float, sigma2: float) -> BiasPredictions:
    """First-order bias matrices for the three arms and their ratio."""
    sx = np.atleast_2d(np.asarray(sigma_x, dtype=float))
    mu = float(mu)
    sigma2 = float(sigma2)
    if mu <= 0.0 or sigma2 <= 0.0:
        raise UsageError("mu and sigma2 must be positive")
    eye = np.eye(sx.shape[0])
    half_step = (mu / 2.0) * eye
    return BiasPredictions(
        proposed=half_step,
        basic=(sigma2 + mu / 2.0) * eye,
        oracle=half_step,
        ratio=(sigma2 + mu / 2.0) / (mu / 2.0),
    )


@dataclass(frozen=True)
class GaussianTheoryReport:
    """Stationary covariance, bias, and convergence certificate for one arm."""

    stationary_cov: np.ndarray
    bias: np.ndarray
    predicted_first_order_bias: np.ndarray
    spectral_norm_m: float
    converged_in: int

    def to_dict(self) -> dict:
        return {
            "stationary_cov": self.stationary_cov.tolist(),
            "bias": self.bias.tolist(),
            "predicted_first_order_bias": self.predicted_first_order_bias.tolist(),
            "spectral_norm_m": self.spectral_norm_m,
            "converged_in": self.converged_in,
        }


def gaussian_theory_report(
    sigma_x, sigma_score, mu: float, sigma2_correction: float
) -> GaussianTheoryReport:
    """Full report for one arm: data covariance ``sigma_x``, score
    covariance ``sigma_score``, step ``mu``, correction ``sigma2_correction``.

    The first-order prediction generalizes the three named arms:
    bias = sigma_score - sigma2_correction * I - sigma_x + (mu/2) I.
    """
    sx = np.atleast_2d(np.asarray(sigma_x, dtype=float))
    ss = np.atleast_2d(np.asarray(sigma_score, dtype=float))
    if sx.shape != ss.shape:
        raise UsageError("sigma_x and sigma_score must have the same shape")
    norm_m = contraction_check(sigma_score, mu)
    if norm_m >= 1.0:
        raise UsageError(f"no stationary covariance: spectral norm of M is {norm_m!r} >= 1")
    stationary = stationary_covariance(sigma_score, mu, sigma2_correction)
    _, converged_in = iterate_to_fixed_point(sigma_score, mu, sigma2_correction)
    eye = np.eye(sx.shape[0])
    predicted = ss - float(sigma2_correction) * eye - sx + (float(mu) / 2.0) * eye
    return GaussianTheoryReport(
        stationary_cov=stationary,
        bias=stationary - sx,
        predicted_first_order_bias=predicted,
        spectral_norm_m=norm_m,
        converged_in=converged_in,
    )


def arm_stationary_values(sigma2: float, mu: Optional[float], dim: int) -> dict[str, float]:
    """Per-coordinate stationary variances of the three arms on white data.

    Data is N(0, I_dim); the noisy score covariance is (1 + sigma2) I.
    Returns the proposed, misspecified-basic, and oracle stationary
    variances plus the exact basic-to-proposed bias ratio. ``mu``
    defaults to the half-denoising step sigma2 / 2.
    """
    sigma2 = float(sigma2)
    if sigma2 <= 0.0:
        raise UsageError(f"sigma2 must be positive, got {sigma2!r}")
    mu = sigma2 / 2.0 if mu is None else float(mu)
    eye = np.eye(int(dim))
    noisy_cov = (1.0 + sigma2) * eye
    proposed = float(stationary_covariance(noisy_cov, mu, sigma2)[0, 0])
    basic = float(stationary_covariance(noisy_cov, mu, 0.0)[0, 0])
    oracle = float(stationary_covariance(eye, mu, 0.0)[0, 0])
    return {
        "mu": mu,
        "sigma2": sigma2,
        "dim": int(dim),
        "proposed_stationary_var": proposed,
        "basic_stationary_var": basic,
        "oracle_stationary_var": oracle,
        "proposed_bias": proposed - 1.0,
        "basic_bias": basic - 1.0,
        "oracle_bias": oracle - 1.0,
        "basic_over_proposed_bias_ratio": (basic - 1.0) / (proposed - 1.0),
        "first_order_ratio": (sigma2 + mu / 2.0) / (mu / 2.0),
        "spectral_norm_m": contraction_check(noisy_cov, mu),
    }
