"""Accuracy schedules, flow-state sampling, and Bayesian fusion in natural
parameters.

The cumulative accuracy beta(t) = sigma1^(-2t) - 1 starts at zero and grows
monotonically; per-step increments alpha telescope across a partition of
[0, 1].  A belief state carries natural parameters (h, accumulated beta)
against fixed prior/observation precisions; its mean is the solution of the
SPD system (prior + beta * obs) theta = h.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .solver import SolverConfig, sample_noise_with_covariance, solve_spd
from .validation import check_choice, check_positive

CHANNELS = ("node", "edge")
WEIGHT_CONVENTIONS = ("algorithmic", "continuous")


@dataclass(frozen=True)
class Schedule:
    sigma1_node: float = 0.2
    sigma1_edge: float = 0.2
    steps: int = 1000
    t_min: float = 1e-4

    def __post_init__(self):
        for name in ("sigma1_node", "sigma1_edge"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.t_min < 1.0:
            raise ValueError("t_min must lie in (0, 1)")

    def sigma1(self, channel):
        check_choice("channel", channel, CHANNELS)
        return self.sigma1_node if channel == "node" else self.sigma1_edge


def clamp_time(schedule, t):
    return np.maximum(t, schedule.t_min)


def beta_at(schedule, channel, t):
    """Cumulative accuracy sigma1^(-2t) - 1; zero at t = 0."""
    s = schedule.sigma1(channel)
    return s ** (-2.0 * np.asarray(t, dtype=float)) - 1.0


def alpha_increment(schedule, channel, t_prev, t):
    """Accuracy revealed between t_prev and t; nonnegative, telescoping."""
    if np.any(np.asarray(t_prev) > np.asarray(t)):
        raise ValueError("t_prev must not exceed t")
    return np.maximum(beta_at(schedule, channel, t)
                      - beta_at(schedule, channel, t_prev), 0.0)


def loss_weight(schedule, channel, t, convention="algorithmic"):
    """Per-time loss weight.

    "algorithmic" is the stepwise weight -ln(sigma1) * sigma1^(-2t) used by
    the training loop; "continuous" is the integrand weight
    alpha(t) * beta(t) / 2 with alpha = d beta / dt.  They differ by a factor
    of beta(t); both are exposed because neither subsumes the other.
    """
    check_choice("convention", convention, WEIGHT_CONVENTIONS)
    s = schedule.sigma1(channel)
    t = np.asarray(t, dtype=float)
    growth = s ** (-2.0 * t)
    if convention == "algorithmic":
        return -np.log(s) * growth
    alpha = -2.0 * np.log(s) * growth
    return alpha * (growth - 1.0) / 2.0


def sample_flow_state(z, prior, obs, beta, rng, solver_cfg=None, mask=None,
                      size=None, stats=None):
    """Draw the belief state at accuracy beta for a fixed target z.

    Solves (prior + beta*obs) theta = beta*obs z + noise, where the noise
    term has covariance beta * obs (drawn through an operator factor), then
    zeroes masked entries.  ``z`` may be (D,) or (D, m); with ``size`` given
    and z a vector, m independent draws are returned as columns.
    """
    check_positive("beta", beta, strict=False)
    z = np.asarray(z, dtype=float)
    if beta == 0.0:
        theta = np.zeros(z.shape if size is None else (z.shape[0], size))
        return theta
    m = size if size is not None else (z.shape[1] if z.ndim == 2 else None)
    rhs = beta * obs.matvec(z)
    if rhs.ndim == 1 and m is not None:
        rhs = np.repeat(rhs[:, None], m, axis=1)
    noise = sample_noise_with_covariance(obs, beta, "precision", rng, size=m)
    rhs = rhs + noise
    theta, _ = solve_spd((prior, obs, beta), rhs, solver_cfg or SolverConfig(),
                         stats=stats)
    if mask is not None:
        mvals = np.asarray(mask, dtype=float)
        theta = theta * (mvals[:, None] if theta.ndim == 2 else mvals)
    return theta


class BeliefState:
    """Natural parameters of the Gaussian belief against fixed precisions.

    ``h`` may be a vector or a (D, m) matrix of independent chains sharing
    the same accumulated accuracy.  Fusing invalidates the cached mean.
    """

    def __init__(self, prior, obs, h, beta_acc=0.0):
        self.prior = prior
        self.obs = obs
        self.h = np.asarray(h, dtype=float)
        self.beta_acc = float(beta_acc)
        self._mean = None

    @classmethod
    def from_prior_mean(cls, prior, obs, theta0=None):
        """Initialize with h = prior @ theta0 (theta0 = 0 by default)."""
        if theta0 is None:
            return cls(prior, obs, np.zeros(prior.dim))
        theta0 = np.asarray(theta0, dtype=float)
        return cls(prior, obs, prior.matvec(theta0))

    def precision(self):
        return self.prior.add_scaled(self.obs, self.beta_acc)

    def fuse(self, y, alpha):
        """Additive Bayesian update: h += alpha * obs @ y, beta += alpha."""
        check_positive("alpha", alpha, strict=False)
        if alpha == 0.0:
            return self
        self.h = self.h + alpha * self.obs.matvec(np.asarray(y, dtype=float))
        self.beta_acc += float(alpha)
        self._mean = None
        return self

    def posterior_mean(self, solver_cfg=None, stats=None):
        """Solve (prior + beta_acc * obs) theta = h; repeated calls reuse it."""
        if self._mean is None:
            theta, _ = solve_spd((self.prior, self.obs, self.beta_acc), self.h,
                                 solver_cfg or SolverConfig(), stats=stats)
            self._mean = theta
        return self._mean


def init_state(prior, obs, theta0=None):
    return BeliefState.from_prior_mean(prior, obs, theta0)


def bayes_fuse(state, y, alpha):
    return state.fuse(y, alpha)


def posterior_mean(state, solver_cfg=None, stats=None):
    return state.posterior_mean(solver_cfg, stats=stats)


def diagonal_fusion_reference(w_prior, w_obs, beta, theta0, y):
    """Per-entry fusion (wp*theta0 + beta*wo*y) / (wp + beta*wo).

    With w_obs = 1 this is the classical factorized update with precision
    w_prior and accuracy beta.
    """
    w_prior = np.asarray(w_prior, dtype=float)
    w_obs = np.asarray(w_obs, dtype=float)
    if np.any(w_prior <= 0) or np.any(w_obs <= 0):
        raise ValueError("precisions must be positive")
    check_positive("beta", beta, strict=False)
    return (w_prior * theta0 + beta * w_obs * np.asarray(y, dtype=float)) \
        / (w_prior + beta * w_obs)


def classical_update(mu, rho, y, alpha):
    """Factorized-belief update: (mu, rho) -> ((rho mu + alpha y)/(rho+alpha), rho+alpha)."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0):
        raise ValueError("rho must be positive")
    check_positive("alpha", alpha, strict=False)
    rho_new = rho + alpha
    return (rho * np.asarray(mu, dtype=float) + alpha * np.asarray(y, dtype=float)) / rho_new, rho_new


def posterior_energy(theta0, prior, y, obs, beta, u):
    """0.5 ||u - theta0||^2_prior + (beta/2) ||y - u||^2_obs."""
    u = np.asarray(u, dtype=float)
    d0 = u - np.asarray(theta0, dtype=float)
    dy = np.asarray(y, dtype=float) - u
    return float(0.5 * d0 @ prior.matvec(d0) + 0.5 * beta * dy @ obs.matvec(dy))


def posterior_energy_gradient(theta0, prior, y, obs, beta, u):
    """Gradient of the fusion energy; zero exactly at the posterior mean."""
    u = np.asarray(u, dtype=float)
    return prior.matvec(u - theta0) - beta * obs.matvec(np.asarray(y) - u)
