"""Truncated-Gaussian class probabilities, expected centers, discrete
decoding, and the structured KL between tied-covariance messages."""

from __future__ import annotations

import numpy as np
import scipy.linalg
from scipy.special import erf

from .solver import NotPositiveDefiniteError
from .validation import check_choice, check_positive

EPS_PROB = 1e-12
SIGMA_FLOOR = 1e-4


def truncated_cdf(x, mu, sigma):
    """Gaussian CDF clamped to the coding interval: 0 below -1, 1 above 1."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    interior = 0.5 * (1.0 + erf((x - mu) / (np.sqrt(2.0) * sigma)))
    out = np.where(x <= -1.0, 0.0, np.where(x >= 1.0, 1.0, interior))
    return out if out.ndim else float(out)


def class_probabilities(mu, sigma, grid, mask=None, eps_prob=EPS_PROB):
    """Per-class masses from Gaussian parameters, shape (..., K).

    Each class receives the Gaussian mass of its interval under the
    truncated CDF, floored at eps_prob and renormalized.  Masked entries
    carry the null distribution (all mass on class 1).
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if mask is None:
        valid = np.ones(mu.shape, dtype=bool)
    else:
        valid = np.asarray(mask) > 0
    if np.any(sigma[valid] <= 0):
        raise ValueError("sigma must be positive on valid entries")
    safe_sigma = np.where(sigma > 0, sigma, 1.0)
    bounds = grid.boundaries  # K+1 points; cdf telescopes to exactly 1
    cdf = truncated_cdf(bounds, mu[..., None], safe_sigma[..., None])
    raw = np.clip(cdf[..., 1:] - cdf[..., :-1], eps_prob, None)
    probs = raw / raw.sum(axis=-1, keepdims=True)
    null = np.zeros(grid.K)
    null[0] = 1.0
    probs = np.where(valid[..., None], probs, null)
    return probs


def expected_center(probs, grid):
    """Expectation of the class center under per-entry class probabilities."""
    return np.asarray(probs, dtype=float) @ grid.centers


def decode_discrete(probs, mode="argmax", rng=None):
    """Pick 1-based class indices, deterministically or by sampling.

    Argmax ties break toward the lowest class index.
    """
    check_choice("mode", mode, ("argmax", "sample"))
    probs = np.asarray(probs, dtype=float)
    if mode == "argmax":
        return np.argmax(probs, axis=-1) + 1
    if rng is None:
        raise ValueError("sample mode requires an rng")
    cum = np.cumsum(probs, axis=-1)
    cum /= cum[..., -1:]
    u = rng.random(probs.shape[:-1] + (1,))
    return (u > cum).sum(axis=-1) + 1


def structured_kl(z, z_hat, obs, beta):
    """Tied-covariance message KL: (beta/2) (z - z_hat)^T obs (z - z_hat)."""
    check_positive("beta", beta, strict=False)
    d = np.asarray(z, dtype=float) - np.asarray(z_hat, dtype=float)
    return float(0.5 * beta * d @ obs.matvec(d))


def general_gaussian_kl(m1, m2, sigma_dense):
    """KL between Gaussians sharing a dense covariance: 0.5 dm^T Sigma^-1 dm.

    The trace and log-determinant terms cancel for equal covariances; this
    is the small-dimension oracle for structured_kl.
    """
    sigma = np.asarray(sigma_dense, dtype=float)
    d = np.asarray(m2, dtype=float) - np.asarray(m1, dtype=float)
    try:
        factor = scipy.linalg.cho_factor(sigma, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"covariance is not SPD: {exc}")
    return float(0.5 * d @ scipy.linalg.cho_solve(factor, d))
