"""CG/Cholesky solves and operator-factored noise sampling."""

import numpy as np
import pytest

from vbfn.solver import (NotPositiveDefiniteError, SolverConfig, SolveStats,
                         cholesky_factor, factor_solve,
                         sample_noise_with_covariance, solve_spd)
from vbfn.structure import PrecisionOperator


def _spd(rng, dim):
    a = rng.normal(size=(dim, dim))
    return PrecisionOperator.from_dense(a @ a.T + dim * np.eye(dim))


class TestSolve:
    def test_identity_solve(self):
        rng = np.random.default_rng(0)
        b = rng.normal(size=6)
        x, report = solve_spd(PrecisionOperator.identity(6), b)
        np.testing.assert_allclose(x, b, atol=1e-12)
        assert report.iterations <= 1 and report.converged

    def test_hand_solve(self):
        op = PrecisionOperator.from_dense(np.array([[2.0, 1], [1, 2]]))
        x, _ = solve_spd(op, np.array([3.0, 3.0]))
        np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-9)

    def test_zero_rhs_short_circuits(self):
        op = PrecisionOperator.from_dense(np.array([[2.0, 1], [1, 2]]))
        x, report = solve_spd(op, np.zeros(2))
        assert np.all(x == 0.0) and report.iterations == 0 and report.converged

    def test_finite_termination_on_distinct_eigenvalues(self):
        # unpreconditioned CG needs at most one iteration per distinct
        # eigenvalue in exact arithmetic
        rng = np.random.default_rng(1)
        values = np.array([1.0, 1.0, 3.0, 3.0, 7.0, 7.0, 7.0, 10.0])
        op = PrecisionOperator.from_diagonal(values)
        cfg = SolverConfig(cg_tol=1e-10, cg_max_iter=50, preconditioner="none")
        x, report = solve_spd(op, rng.normal(size=8), cfg)
        assert report.converged
        assert report.iterations <= len(np.unique(values))

    def test_cg_meets_residual_contract_on_random_dense(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            dim = int(rng.integers(2, 257))
            op = _spd(rng, dim)
            b = rng.normal(size=dim)
            x_cg, rep = solve_spd(op, b, SolverConfig(cg_max_iter=max(100, dim)))
            assert rep.converged
            assert np.linalg.norm(op.matvec(x_cg) - b) <= 1e-6 * np.linalg.norm(b)

    def test_cg_matches_cholesky_on_fused_operators(self):
        # the operator family the model actually solves: Laplacian-floored
        # priors plus beta-scaled observation precisions
        from vbfn.structure import (build_node_dependency_complete,
                                    build_obs_precision, build_prior_precision)
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(8, 129))
            dep = build_node_dependency_complete(n, 1, float(rng.uniform(0.1, 1)))
            mask = (rng.random(n) < 0.8).astype(float)
            prior = build_prior_precision(dep, mask, 1e-2)
            obs = build_obs_precision(prior, "diag_prior", 1e-2)
            beta = float(rng.uniform(0.0, 24.0))
            b = rng.normal(size=n)
            x_cg, rep = solve_spd((prior, obs, beta), b,
                                  SolverConfig(cg_max_iter=max(100, n)))
            x_ch, _ = solve_spd((prior, obs, beta), b,
                                SolverConfig(method="cholesky"))
            assert rep.converged
            assert np.linalg.norm(x_cg - x_ch) <= 1e-6 * np.linalg.norm(x_ch)

    def test_matrix_rhs(self):
        rng = np.random.default_rng(3)
        op = _spd(rng, 12)
        B = rng.normal(size=(12, 5))
        X, report = solve_spd(op, B, SolverConfig(cg_max_iter=100))
        assert report.converged
        np.testing.assert_allclose(op.matvec(X), B, atol=1e-4)

    def test_non_convergence_reports_best_iterate(self):
        rng = np.random.default_rng(4)
        op = _spd(rng, 64)
        b = rng.normal(size=64)
        stats = SolveStats()
        x, report = solve_spd(op, b, SolverConfig(cg_max_iter=1, cg_tol=1e-14),
                              stats=stats)
        assert not report.converged
        assert report.final_relative_residual > 1e-14
        assert np.all(np.isfinite(x))
        assert stats.failures == 1

    def test_report_invariant(self):
        rng = np.random.default_rng(5)
        cfg = SolverConfig()
        for _ in range(20):
            op = _spd(rng, 16)
            _, report = solve_spd(op, rng.normal(size=16), cfg)
            if report.converged:
                assert report.final_relative_residual <= cfg.cg_tol

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        op = _spd(rng, 32)
        b = rng.normal(size=32)
        x1, _ = solve_spd(op, b)
        x2, _ = solve_spd(op, b)
        assert np.array_equal(x1, x2)

    def test_triple_operand(self):
        rng = np.random.default_rng(7)
        prior, obs = _spd(rng, 8), _spd(rng, 8)
        b = rng.normal(size=8)
        x, _ = solve_spd((prior, obs, 2.0), b, SolverConfig(cg_tol=1e-10,
                                                            cg_max_iter=100))
        dense = prior.to_dense() + 2.0 * obs.to_dense()
        np.testing.assert_allclose(x, np.linalg.solve(dense, b), atol=1e-7)


class TestCholesky:
    def test_diagonal_roots(self):
        factor = cholesky_factor(PrecisionOperator.from_diagonal([4.0, 9.0]))
        np.testing.assert_allclose(factor.lower(), np.diag([2.0, 3.0]))

    def test_textbook_factorization(self):
        factor = cholesky_factor(
            PrecisionOperator.from_dense(np.array([[2.0, 1], [1, 2]])))
        expected = np.array([[np.sqrt(2), 0], [1 / np.sqrt(2), np.sqrt(1.5)]])
        np.testing.assert_allclose(factor.lower(), expected, atol=1e-12)

    def test_refactor_round_trip(self):
        rng = np.random.default_rng(8)
        op = _spd(rng, 10)
        L = cholesky_factor(op).lower()
        np.testing.assert_allclose(L @ L.T, op.to_dense(), atol=1e-12)

    def test_factor_solve(self):
        rng = np.random.default_rng(9)
        op = _spd(rng, 10)
        b = rng.normal(size=10)
        x = factor_solve(cholesky_factor(op), b)
        np.testing.assert_allclose(op.matvec(x), b, atol=1e-9)

    def test_non_spd_names_pivot(self):
        bad = PrecisionOperator.from_dense(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(NotPositiveDefiniteError) as err:
            cholesky_factor(bad)
        assert err.value.pivot == 2

    def test_dense_cap(self):
        with pytest.raises(ValueError, match="capped"):
            cholesky_factor(PrecisionOperator.identity(10), dense_cap=4)


class TestNoise:
    def test_identity_standard_normal(self):
        rng = np.random.default_rng(10)
        op = PrecisionOperator.identity(2)
        for direction in ("precision", "covariance"):
            draws = sample_noise_with_covariance(op, 1.0, direction, rng,
                                                 size=100_000)
            cov = np.cov(draws)
            stderr = np.sqrt((1.0 + np.eye(2)) / 100_000)
            assert np.all(np.abs(cov - np.eye(2)) <= 3 * stderr + 3e-3)

    def test_diagonal_covariance_direction(self):
        rng = np.random.default_rng(11)
        op = PrecisionOperator.from_diagonal([4.0])
        draws = sample_noise_with_covariance(op, 1.0, "covariance", rng,
                                             size=100_000)
        assert abs(draws.var() - 0.25) <= 4 * 0.25 * np.sqrt(2 / 100_000)

    def test_precision_direction_matches_operator(self):
        rng = np.random.default_rng(12)
        dense = np.array([[2.0, 1.0], [1.0, 2.0]])
        op = PrecisionOperator.from_dense(dense)
        draws = sample_noise_with_covariance(op, 1.0, "precision", rng,
                                             size=100_000)
        cov = np.cov(draws)
        stderr = np.sqrt((np.outer(np.diag(dense), np.diag(dense))
                          + dense ** 2) / 100_000)
        assert np.all(np.abs(cov - dense) <= 4 * stderr)

    def test_scale_enters_covariance(self):
        rng = np.random.default_rng(13)
        op = PrecisionOperator.from_diagonal([1.0])
        draws = sample_noise_with_covariance(op, 5.0, "precision", rng,
                                             size=50_000)
        assert abs(draws.var() - 5.0) <= 5.0 * 4 * np.sqrt(2 / 50_000)

    def test_nonpositive_scale_rejected(self):
        rng = np.random.default_rng(14)
        with pytest.raises(ValueError):
            sample_noise_with_covariance(PrecisionOperator.identity(2), 0.0,
                                         "precision", rng)
