"""Dependency graphs over representation entries and the precision operators
they induce.

The dependency graph couples entries of the graph representation itself
(node entries to incident edge entries, mirrored edge entries to each other,
or entries within one channel) and never reads sample adjacency values, so
the resulting precisions are sample-agnostic.  The weighted combinatorial
Laplacian of the dependency graph, masked and floored, gives strictly
positive definite prior and observation precisions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graphs import upper_triangle_pairs
from .validation import check_choice, check_positive

OBS_MODES = ("prior", "diag_prior", "identity")


@dataclass(frozen=True)
class DependencyGraph:
    """Undirected weighted graph over D representation entries.

    Edges are stored once with u < v and no duplicate pairs; parallel
    couplings emitted by a builder are merged by summing their weights.
    """

    dim: int
    edges_u: np.ndarray
    edges_v: np.ndarray
    weights: np.ndarray

    @property
    def edge_count(self):
        return int(self.edges_u.shape[0])

    def edge_set(self):
        return {(int(u), int(v)): float(w)
                for u, v, w in zip(self.edges_u, self.edges_v, self.weights)}


def _merge_edges(dim, pairs, weights):
    """Normalize to u < v, merge duplicates by summing weights."""
    if not pairs:
        e = np.zeros(0, dtype=np.int64)
        return DependencyGraph(dim=dim, edges_u=e, edges_v=e.copy(),
                               weights=np.zeros(0))
    uv = np.asarray(pairs, dtype=np.int64)
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("dependency edge weights must be nonnegative")
    u = np.minimum(uv[:, 0], uv[:, 1])
    v = np.maximum(uv[:, 0], uv[:, 1])
    if np.any(u == v):
        raise ValueError("dependency graph has a self-loop")
    if u.size and (u.min() < 0 or v.max() >= dim):
        raise ValueError("dependency edge index out of range")
    key = u * dim + v
    uniq, inv = np.unique(key, return_inverse=True)
    merged = np.zeros(uniq.shape[0])
    np.add.at(merged, inv, w)
    return DependencyGraph(dim=dim, edges_u=(uniq // dim).astype(np.int64),
                           edges_v=(uniq % dim).astype(np.int64),
                           weights=merged)


def build_joint_dependency(n, d_x, d_a, lambda_x, lambda_a, include_symmetry=True):
    """Couplings over all entries of X then A (D = n*d_x + n^2*d_a).

    Incidence couplings tie each node entry (i, c) to every edge entry
    (i, j, c') it touches, with weight lambda_x; both endpoints of an edge
    entry contribute one coupling each, so an entry (i, i, c') accumulates
    weight 2*lambda_x on its single incident pair.  Symmetry couplings tie
    (i, j, c) to (j, i, c) for i < j with weight lambda_a.
    """
    check_positive("n", n)
    check_positive("lambda_x", lambda_x, strict=False)
    check_positive("lambda_a", lambda_a, strict=False)
    n, d_x, d_a = int(n), int(d_x), int(d_a)
    dim = n * d_x + n * n * d_a

    def x_idx(i, c):
        return i * d_x + c

    def a_idx(i, j, c):
        return n * d_x + (i * n + j) * d_a + c

    pairs, weights = [], []
    for i in range(n):
        for j in range(n):
            for cp in range(d_a):
                a = a_idx(i, j, cp)
                for c in range(d_x):
                    pairs.append((x_idx(i, c), a))
                    weights.append(float(lambda_x))
                    pairs.append((x_idx(j, c), a))
                    weights.append(float(lambda_x))
    if include_symmetry:
        for i in range(n):
            for j in range(i + 1, n):
                for c in range(d_a):
                    pairs.append((a_idx(i, j, c), a_idx(j, i, c)))
                    weights.append(float(lambda_a))
    return _merge_edges(dim, pairs, weights)


def build_node_dependency_complete(n, d_x, lambda_x):
    """Complete graph over the n node slots within each feature channel."""
    check_positive("n", n)
    check_positive("lambda_x", lambda_x, strict=False)
    n, d_x = int(n), int(d_x)
    iu, ju = upper_triangle_pairs(n)
    pairs, weights = [], []
    for c in range(d_x):
        for i, j in zip(iu, ju):
            pairs.append((i * d_x + c, j * d_x + c))
            weights.append(float(lambda_x))
    return _merge_edges(n * d_x, pairs, weights)


def build_edge_dependency_line_complete(n, d_a, lambda_a):
    """Line graph of K_n over upper-triangle edge slots, per channel.

    Two slots are coupled with weight lambda_a iff their node pairs share
    exactly one endpoint.  For n < 2 the graph is empty with dimension 0.
    """
    check_positive("lambda_a", lambda_a, strict=False)
    n, d_a = int(n), int(d_a)
    iu, ju = upper_triangle_pairs(max(n, 0))
    n_slots = iu.shape[0]
    pairs, weights = [], []
    for a in range(n_slots):
        for b in range(a + 1, n_slots):
            shared = len({iu[a], ju[a]} & {iu[b], ju[b]})
            if shared == 1:
                for c in range(d_a):
                    pairs.append((a * d_a + c, b * d_a + c))
                    weights.append(float(lambda_a))
    return _merge_edges(n_slots * d_a, pairs, weights)


@dataclass
class PrecisionOperator:
    """Sparse symmetric operator stored as a diagonal plus off-diagonals.

    Off-diagonal entries are stored once with u < v.  ``shift`` records the
    diagonal floor (epsilon) added outside the masking at construction time,
    which lets observation precisions be derived from a prior without
    rebuilding the Laplacian.
    """

    dim: int
    diag: np.ndarray
    off_rows: np.ndarray
    off_cols: np.ndarray
    off_vals: np.ndarray
    shift: float = 0.0
    _csr: object = field(default=None, repr=False, compare=False)

    @property
    def is_diagonal(self):
        return self.off_rows.shape[0] == 0

    @property
    def nnz(self):
        return self.dim + 2 * int(self.off_rows.shape[0])

    def _matrix(self):
        if self._csr is None:
            rows = np.concatenate([np.arange(self.dim), self.off_rows, self.off_cols])
            cols = np.concatenate([np.arange(self.dim), self.off_cols, self.off_rows])
            vals = np.concatenate([self.diag, self.off_vals, self.off_vals])
            self._csr = sp.csr_matrix((vals, (rows, cols)), shape=(self.dim, self.dim))
        return self._csr

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.dim:
            raise ValueError(f"operand has leading dim {v.shape[0]}, expected {self.dim}")
        if self.is_diagonal:
            return self.diag[:, None] * v if v.ndim == 2 else self.diag * v
        return self._matrix() @ v

    def __matmul__(self, v):
        return self.matvec(v)

    def diagonal(self):
        return self.diag.copy()

    def to_dense(self):
        out = np.diag(self.diag.astype(float))
        out[self.off_rows, self.off_cols] += self.off_vals
        out[self.off_cols, self.off_rows] += self.off_vals
        return out

    def add_scaled(self, other, scale):
        """Return self + scale * other as a new operator."""
        if other.dim != self.dim:
            raise ValueError("dimension mismatch in operator sum")
        rows = np.concatenate([self.off_rows, other.off_rows])
        cols = np.concatenate([self.off_cols, other.off_cols])
        vals = np.concatenate([self.off_vals, scale * other.off_vals])
        key = rows * self.dim + cols
        uniq, inv = np.unique(key, return_inverse=True)
        merged = np.zeros(uniq.shape[0])
        np.add.at(merged, inv, vals)
        keep = merged != 0.0
        return PrecisionOperator(
            dim=self.dim, diag=self.diag + scale * other.diag,
            off_rows=(uniq // self.dim)[keep].astype(np.int64),
            off_cols=(uniq % self.dim)[keep].astype(np.int64),
            off_vals=merged[keep], shift=self.shift + scale * other.shift)

    @classmethod
    def identity(cls, dim):
        e = np.zeros(0, dtype=np.int64)
        return cls(dim=dim, diag=np.ones(dim), off_rows=e, off_cols=e.copy(),
                   off_vals=np.zeros(0), shift=1.0)

    @classmethod
    def from_diagonal(cls, diag, shift=0.0):
        diag = np.asarray(diag, dtype=float)
        e = np.zeros(0, dtype=np.int64)
        return cls(dim=diag.shape[0], diag=diag.copy(), off_rows=e,
                   off_cols=e.copy(), off_vals=np.zeros(0), shift=shift)

    @classmethod
    def from_dense(cls, mat, shift=0.0):
        mat = np.asarray(mat, dtype=float)
        if mat.shape[0] != mat.shape[1] or not np.allclose(mat, mat.T, atol=1e-12):
            raise ValueError("dense operator must be square symmetric")
        iu, ju = upper_triangle_pairs(mat.shape[0])
        vals = mat[iu, ju]
        keep = vals != 0.0
        return cls(dim=mat.shape[0], diag=np.diag(mat).copy(),
                   off_rows=iu[keep], off_cols=ju[keep], off_vals=vals[keep],
                   shift=shift)


@dataclass(frozen=True)
class MaskOperator:
    """Binary diagonal mask; idempotent by construction."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("mask values must be binary")
        object.__setattr__(self, "values", v.astype(float))

    @property
    def dim(self):
        return int(self.values.shape[0])


def _mask_values(mask, dim):
    if mask is None:
        return np.ones(dim)
    if isinstance(mask, MaskOperator):
        return mask.values
    return MaskOperator(np.asarray(mask).reshape(-1)).values


def laplacian(dep):
    """Weighted combinatorial Laplacian of a dependency graph (PSD)."""
    diag = np.zeros(dep.dim)
    np.add.at(diag, dep.edges_u, dep.weights)
    np.add.at(diag, dep.edges_v, dep.weights)
    return PrecisionOperator(dim=dep.dim, diag=diag,
                             off_rows=dep.edges_u.copy(),
                             off_cols=dep.edges_v.copy(),
                             off_vals=-dep.weights.copy(), shift=0.0)


def dirichlet_energy(dep, s):
    """Sum over stored edges of w * (s_u - s_v)^2; equals s^T L s."""
    s = np.asarray(s, dtype=float)
    if s.shape != (dep.dim,):
        raise ValueError(f"signal must have shape ({dep.dim},), got {s.shape}")
    d = s[dep.edges_u] - s[dep.edges_v]
    return float(np.sum(dep.weights * d * d))


def build_prior_precision(dep, mask, eps):
    """Masked Laplacian plus an eps floor: M L M + eps I, strictly PD."""
    check_positive("eps", eps)
    m = _mask_values(mask, dep.dim)
    lap = laplacian(dep)
    diag = m * lap.diag * m + eps
    vals = m[lap.off_rows] * m[lap.off_cols] * lap.off_vals
    keep = vals != 0.0
    return PrecisionOperator(dim=dep.dim, diag=diag,
                             off_rows=lap.off_rows[keep],
                             off_cols=lap.off_cols[keep],
                             off_vals=vals[keep], shift=float(eps))


def build_obs_precision(prior, mode, eps_obs=None):
    """Observation precision derived from the prior's masked Laplacian.

    mode "prior" keeps the full coupling with its own floor eps_obs;
    "diag_prior" keeps only the heterogeneous diagonal of that operator;
    "identity" is the independent channel.
    """
    check_choice("mode", mode, OBS_MODES)
    if mode == "identity":
        return PrecisionOperator.identity(prior.dim)
    check_positive("eps_obs", eps_obs)
    base_diag = prior.diag - prior.shift + eps_obs
    if mode == "prior":
        return PrecisionOperator(dim=prior.dim, diag=base_diag,
                                 off_rows=prior.off_rows.copy(),
                                 off_cols=prior.off_cols.copy(),
                                 off_vals=prior.off_vals.copy(),
                                 shift=float(eps_obs))
    return PrecisionOperator.from_diagonal(base_diag, shift=float(eps_obs))


def matvec(op, v):
    return op.matvec(v)


def op_diag(op):
    """Operator diagonal, the Jacobi preconditioner input."""
    return op.diagonal()


@dataclass(frozen=True)
class SpectralEstimate:
    lambda_min: float
    lambda_max: float
    converged: bool


def _power_iteration(apply_fn, dim, iters, tol):
    v = np.ones(dim) / np.sqrt(dim)
    lam = 0.0
    for _ in range(iters):
        w = apply_fn(v)
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, True
        v = w / nw
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return lam_new, True
        lam = lam_new
    return lam, False


def spectral_bounds(op, iters=200, tol=1e-8):
    """Power-iteration estimates of the extreme eigenvalues of an SPD op."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    lmax, conv_max = _power_iteration(op.matvec, op.dim, iters, tol)
    shifted = lambda v: lmax * v - op.matvec(v)
    mu, conv_min = _power_iteration(shifted, op.dim, iters, tol)
    return SpectralEstimate(lambda_min=lmax - mu, lambda_max=lmax,
                            converged=conv_max and conv_min)


def _extreme_eigs(op, dense_cutoff, iters, tol):
    if op.is_diagonal:
        return float(op.diag.min()), float(op.diag.max())
    if op.dim <= dense_cutoff:
        w = np.linalg.eigvalsh(op.to_dense())
        return float(w[0]), float(w[-1])
    est = spectral_bounds(op, iters=iters, tol=tol)
    return est.lambda_min, est.lambda_max


def condition_bound(prior, obs, beta, dense_cutoff=512, iters=200, tol=1e-8):
    """Upper bound on the condition number of prior + beta * obs.

    Exact when the extreme eigenvalues are exact (dense path); with power
    iteration the result is an estimate of the bound.
    """
    check_positive("beta", beta, strict=False)
    lo_p, hi_p = _extreme_eigs(prior, dense_cutoff, iters, tol)
    lo_o, hi_o = _extreme_eigs(obs, dense_cutoff, iters, tol)
    return (hi_p + beta * hi_o) / (lo_p + beta * lo_o)
