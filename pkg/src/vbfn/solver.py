"""SPD linear solves in operator form (preconditioned CG) or dense Cholesky,
plus colored Gaussian noise drawn through operator factors.

The solve path is deterministic and RNG-free; noise sampling takes an
explicit Generator.  Solutions for a matrix of right-hand sides are computed
column-wise in one vectorized CG sweep.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .structure import PrecisionOperator
from .validation import check_choice, check_positive

_TINY = 1e-30


class NotPositiveDefiniteError(RuntimeError):
    """Cholesky failure; ``pivot`` names the offending leading minor."""

    def __init__(self, message, pivot=-1):
        super().__init__(message)
        self.pivot = pivot


@dataclass(frozen=True)
class SolverConfig:
    method: str = "cg"
    cg_tol: float = 1e-6
    cg_max_iter: int = 50
    preconditioner: str = "jacobi"
    dense_cap: int = 4096

    def __post_init__(self):
        check_choice("method", self.method, ("cg", "cholesky"))
        check_choice("preconditioner", self.preconditioner, ("none", "jacobi"))
        check_positive("cg_tol", self.cg_tol)
        if self.cg_max_iter < 1:
            raise ValueError("cg_max_iter must be >= 1")


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    final_relative_residual: float
    converged: bool


@dataclass
class SolveStats:
    """Running counters a caller may thread through repeated solves."""

    solves: int = 0
    failures: int = 0
    iterations: int = 0

    def record(self, report):
        self.solves += 1
        self.iterations += report.iterations
        if not report.converged:
            self.failures += 1


def _materialize(operator):
    if isinstance(operator, PrecisionOperator):
        return operator
    prior, obs, beta = operator
    return prior.add_scaled(obs, beta)


def solve_spd(operator, b, cfg=None, stats=None):
    """Solve P x = b for an SPD operator P.

    ``operator`` is a PrecisionOperator or an (prior, obs, beta) triple.
    ``b`` may be a vector or a (D, m) matrix of right-hand sides; the report
    then summarizes the worst column.  A zero right-hand side returns zero
    without iterating.  On CG non-convergence the best iterate is returned
    with converged=False; the caller decides the policy.
    """
    cfg = cfg or SolverConfig()
    op = _materialize(operator)
    b = np.asarray(b, dtype=float)
    single = b.ndim == 1
    B = b[:, None] if single else b
    if B.shape[0] != op.dim:
        raise ValueError(f"rhs has leading dim {B.shape[0]}, expected {op.dim}")
    if not np.all(np.isfinite(B)):
        raise ValueError("right-hand side contains non-finite entries")

    if cfg.method == "cholesky":
        X, report = _cholesky_solve(op, B, cfg)
    else:
        X, report = _pcg(op, B, cfg)
    if stats is not None:
        stats.record(report)
    return (X[:, 0] if single else X), report


def _pcg(op, B, cfg):
    D, m = B.shape
    bnorm = np.linalg.norm(B, axis=0)
    scale = np.maximum(bnorm, _TINY)
    active = bnorm > 0.0

    X = np.zeros_like(B)
    if not active.any():
        return X, SolveReport(0, 0.0, True)

    if cfg.preconditioner == "jacobi":
        d = op.diagonal()
        if np.any(d <= 0):
            raise ValueError("Jacobi preconditioner needs a positive diagonal")
        minv = 1.0 / d
    else:
        minv = np.ones(D)

    R = B.copy()
    Z = minv[:, None] * R
    P = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    iterations = 0
    for k in range(1, cfg.cg_max_iter + 1):
        AP = op.matvec(P)
        pAp = np.einsum("ij,ij->j", P, AP)
        safe = active & (pAp > 0)
        alpha = np.where(safe, rz / np.where(pAp > 0, pAp, 1.0), 0.0)
        X += alpha * P
        R -= alpha * AP
        iterations = k
        rel = np.linalg.norm(R, axis=0) / scale
        active = active & (rel > cfg.cg_tol) & safe
        if not active.any():
            break
        Z = minv[:, None] * R
        rz_new = np.einsum("ij,ij->j", R, Z)
        beta = np.where(active, rz_new / np.where(rz > 0, rz, 1.0), 0.0)
        P = Z + beta * P
        rz = rz_new

    final = np.linalg.norm(B - op.matvec(X), axis=0) / scale
    worst = float(final.max())
    return X, SolveReport(iterations, worst, bool(worst <= cfg.cg_tol))


@dataclass
class CholeskyFactor:
    """Lower-triangular factor handle with L L^T equal to the operator."""

    dim: int
    _factor: object = field(repr=False)

    def lower(self):
        return np.tril(self._factor[0])

    def solve(self, b):
        return scipy.linalg.cho_solve(self._factor, np.asarray(b, dtype=float))


def cholesky_factor(op, dense_cap=4096):
    """Dense Cholesky of an operator; fails loudly on a non-positive pivot."""
    if op.dim > dense_cap:
        raise ValueError(f"dense factorization capped at {dense_cap}, dim={op.dim}")
    dense = op.to_dense()
    try:
        factor = scipy.linalg.cho_factor(dense, lower=True)
    except np.linalg.LinAlgError as exc:
        pivot = _pivot_from_message(str(exc))
        raise NotPositiveDefiniteError(
            f"operator is not positive definite (pivot {pivot})", pivot)
    return CholeskyFactor(dim=op.dim, _factor=factor)


def factor_solve(factor, b):
    return factor.solve(b)


def _pivot_from_message(msg):
    m = re.search(r"(\d+)", msg)
    return int(m.group(1)) if m else -1


def _cholesky_solve(op, B, cfg):
    factor = cholesky_factor(op, cfg.dense_cap)
    X = factor.solve(B)
    bnorm = np.maximum(np.linalg.norm(B, axis=0), _TINY)
    rel = float((np.linalg.norm(B - op.matvec(X), axis=0) / bnorm).max())
    return X, SolveReport(0, rel, True)


def sample_noise_with_covariance(op, scale, direction, rng, size=None,
                                 dense_cap=4096):
    """Draw Gaussian noise whose covariance is tied to an SPD operator.

    direction "precision" gives covariance scale * op (the cumulative
    message noise); "covariance" gives covariance (scale * op)^{-1} (the
    incremental message noise).  Any factor B with B B^T = op is valid
    since only the covariance is contracted.
    """
    check_positive("scale", scale)
    check_choice("direction", direction, ("precision", "covariance"))
    m = 1 if size is None else int(size)
    eps = rng.standard_normal((op.dim, m))
    if op.is_diagonal:
        d = op.diag
        if np.any(d <= 0):
            raise ValueError("diagonal operator must be positive")
        root = np.sqrt(scale * d)[:, None]
        out = eps * root if direction == "precision" else eps / root
    else:
        if op.dim > dense_cap:
            raise ValueError(
                f"non-diagonal noise factor capped at {dense_cap}, dim={op.dim}")
        L = cholesky_factor(op, dense_cap).lower()
        if direction == "precision":
            out = np.sqrt(scale) * (L @ eps)
        else:
            out = scipy.linalg.solve_triangular(L.T, eps, lower=False) / np.sqrt(scale)
    return out[:, 0] if size is None else out
