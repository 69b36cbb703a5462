import logging

import numpy as np
import pytest

from hypothesis import given, settings, strategies
from sklearn.model_selection import KFold

from ivgl.exceptions import InvalidInputError
from ivgl.graph import UNNORMALIZED, Graph, build_ring, laplacian
from ivgl.solver import (
    MIN_PATH_LENGTH,
    Problem,
    SolverConfig,
    augment,
    cv_graph_lasso,
    cv_lasso,
    duality_gap,
    fold_ids,
    graph_lasso,
    graph_lasso_objective,
    kkt_violation,
    lasso_cd,
    lasso_objective,
    lasso_path,
    soft_threshold,
)


def make_data(seed, n=40, p=8, active=3, noise=0.5):
    """Centered design and response with a sparse signal."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    beta = np.zeros(p)
    beta[:active] = rng.uniform(0.5, 2.0, active) * rng.choice([-1.0, 1.0], active)
    y = X @ beta + noise * rng.standard_normal(n)
    return X - X.mean(axis=0), y - y.mean(), beta


def raw_config(**changes):
    """Solver config without standardization, for comparisons on the data as given."""
    return SolverConfig(standardize=False, tol=1e-12).replace(**changes)


def brute_force(X, y, L, lambda1, lambda2, radius=2.0):
    """Coarse-to-fine grid minimization of the graph-constrained objective (m <= 3)."""
    n, m = X.shape
    gram = X.T @ X / n + 2 * lambda2 * L.matrix
    linear = X.T @ y / n

    def objective(points):
        quadratic = np.einsum("ij,jk,ik->i", points, gram, points)
        return 0.5 * quadratic - points @ linear + lambda1 * np.abs(points).sum(axis=1)

    center = np.zeros(m)
    for half_width, step in [(radius, 0.04), (0.2, 0.004), (0.02, 0.0004), (0.002, 0.0001)]:
        axes = [np.arange(c - half_width, c + half_width + step / 2, step) for c in center]
        points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, m)
        center = points[np.argmin(objective(points))]
    return center


class TestSoftThreshold:
    def test_values(self):
        assert soft_threshold(3.0, 1.0) == 2.0
        assert soft_threshold(-3.0, 1.0) == -2.0
        assert soft_threshold(0.5, 1.0) == 0.0
        assert soft_threshold(1.0, 1.0) == 0.0

    def test_negative_threshold(self):
        with pytest.raises(InvalidInputError) as raise_context:
            soft_threshold(1.0, -0.1)
        assert "nonnegative" in str(raise_context)


class TestSolverConfig:
    def test_defaults_from_settings(self):
        """The test settings use 3 folds and a 20 point grid."""
        cfg = SolverConfig()
        assert cfg.cv_folds == 3
        assert cfg.lambda_grid_size == 20
        assert cfg.lambda2_grid == (0.1, 1.0)

    def test_invalid(self):
        with pytest.raises(InvalidInputError):
            SolverConfig(cv_folds=1)
        with pytest.raises(InvalidInputError):
            SolverConfig(lambda2_grid=(-1.0,))
        with pytest.raises(InvalidInputError):
            SolverConfig(tol=0)


class TestLasso:
    def test_orthonormal_design_closed_form(self):
        """With ``X'X/n = I`` the solution is the soft-thresholded ``X'y/n``."""
        rng = np.random.default_rng(0)
        n, p = 50, 6
        raw = rng.standard_normal((n, p))
        Q, _ = np.linalg.qr(raw - raw.mean(axis=0))
        X = np.sqrt(n) * Q
        y = X @ np.array([1.0, -0.8, 0.3, 0.0, 0.0, 0.05]) + 0.1 * rng.standard_normal(n)
        y = y - y.mean()
        lambda_ = 0.2

        fit = lasso_cd(X, y, lambda_, raw_config())
        expected = [soft_threshold(value, lambda_) for value in X.T @ y / n]
        np.testing.assert_allclose(fit.beta, expected, atol=1e-8)
        assert fit.converged

    def test_zero_above_lambda_max(self):
        X, y, _ = make_data(1)
        problem = Problem(X, y, raw_config())
        top = problem.lambda_max()
        assert not problem.solve(top * 1.0001).beta.any()
        assert problem.solve(top * 0.9).beta.any()

    def test_lambda_grid(self):
        X, y, _ = make_data(2)
        grid = Problem(X, y, raw_config(lambda_grid_size=5, lambda_min_ratio=0.01)).lambda_grid()
        assert grid.size == 5
        assert grid[0] == pytest.approx(Problem(X, y, raw_config()).lambda_max())
        assert grid[-1] == pytest.approx(grid[0] * 0.01)

    def test_zero_column(self):
        """A constant column gets a zero coefficient."""
        X, y, _ = make_data(3)
        X[:, 4] = 2.0
        fit = lasso_cd(X, y, 0.01)
        assert fit.beta[4] == 0.0

    def test_objective_trace_is_non_increasing(self):
        X, y, _ = make_data(4)
        fit = lasso_cd(X, y, 0.05, raw_config())
        assert np.all(np.diff(fit.objective_trace) <= 1e-12)
        assert fit.objective == pytest.approx(lasso_objective(X, y, fit.beta, 0.05), abs=1e-10)

    def test_intercept_for_prediction(self):
        """Data are centered for the fit, the intercept restores the means."""
        X, y, _ = make_data(5)
        fit = lasso_cd(X + 3.0, y + 10.0, 0.05, raw_config())
        centered = lasso_cd(X, y, 0.05, raw_config())
        np.testing.assert_allclose(fit.beta, centered.beta, atol=1e-8)
        np.testing.assert_allclose(fit.predict(X + 3.0), centered.predict(X) + 10.0, atol=1e-8)

    def test_mismatched_rows(self):
        with pytest.raises(InvalidInputError) as raise_context:
            lasso_cd(np.ones((5, 2)), np.ones(4), 0.1)
        assert "5 rows" in str(raise_context)

    def test_non_finite_values(self):
        X = np.ones((5, 2))
        X[0, 0] = np.nan
        with pytest.raises(InvalidInputError) as raise_context:
            lasso_cd(X, np.ones(5), 0.1)
        assert "non-finite" in str(raise_context)

    def test_not_converged(self, caplog):
        """Running out of sweeps is reported, not raised."""
        X, y, _ = make_data(6)
        with caplog.at_level(logging.WARNING, logger="ivgl.solver"):
            fit = lasso_cd(X, y, 0.001, raw_config(max_sweeps=1))
        assert not fit.converged
        assert "did not converge" in caplog.text

    @settings(max_examples=30, deadline=None)
    @given(strategies.integers(0, 10**6), strategies.floats(0.01, 0.5))
    def test_kkt_certificate(self, seed, lambda_):
        """Every returned fit satisfies the optimality conditions."""
        X, y, _ = make_data(seed)
        fit = lasso_cd(X, y, lambda_, raw_config())
        assert fit.converged
        assert fit.kkt_violation <= 1e-6
        assert kkt_violation(X, y, fit.beta, lambda_) <= 1e-6

    def test_kkt_with_standardization(self):
        """Standardizing is a LASSO with column-wise penalty weights on the raw data."""
        X, y, _ = make_data(7)
        X = X * np.array([1.0, 5.0, 0.2, 1.0, 3.0, 1.0, 0.5, 2.0])
        fit = lasso_cd(X, y, 0.05, SolverConfig(tol=1e-12))
        assert kkt_violation(X, y, fit.beta, 0.05, weights=X.std(axis=0)) <= 1e-5

    def test_path_matches_cold_starts(self):
        X, y, _ = make_data(8)
        lambdas = [0.5, 0.2, 0.1, 0.05]
        fits = lasso_path(X, y, lambdas, raw_config())
        for lambda_, fit in zip(lambdas, fits):
            assert fit.lambda_ == lambda_
            cold = lasso_cd(X, y, lambda_, raw_config())
            np.testing.assert_allclose(fit.beta, cold.beta, atol=1e-6)

    def test_no_penalty_is_least_squares(self):
        """With more rows than columns, ``lambda = 0`` gives the least-squares fit."""
        X, y, _ = make_data(20, n=50, p=5)
        fit = lasso_cd(X, y, 0.0, raw_config())
        expected, *_ = np.linalg.lstsq(X, y, rcond=None)
        assert fit.converged
        np.testing.assert_allclose(fit.beta, expected, atol=1e-5)

    def test_objective_on_the_given_scale(self):
        """With standardization, ``objective`` is the unweighted objective of the given data."""
        X, y, _ = make_data(21)
        X = X * np.array([1.0, 5.0, 0.2, 1.0, 3.0, 1.0, 0.5, 2.0])
        fit = lasso_cd(X, y, 0.05, SolverConfig(tol=1e-12))
        assert fit.standardized
        assert fit.objective == pytest.approx(lasso_objective(X, y, fit.beta, 0.05), abs=1e-10)
        residual = y - X @ fit.beta
        weighted = residual @ residual / (2 * X.shape[0])
        weighted += 0.05 * np.abs(X.std(axis=0) * fit.beta).sum()
        assert fit.objective_trace[-1] == pytest.approx(weighted, abs=1e-10)

    def test_duality_gap_at_solution(self):
        X, y, _ = make_data(22)
        fit = lasso_cd(X, y, 0.05, raw_config())
        assert 0.0 <= duality_gap(X, y, fit.beta, 0.05) <= 1e-6
        assert fit.duality_gap == pytest.approx(duality_gap(X, y, fit.beta, 0.05), abs=1e-12)
        assert duality_gap(X, y, np.zeros(8), 0.05) > 1e-3

    def test_stops_on_duality_gap(self):
        """An unreachable optimality tolerance does not prevent convergence on the gap."""
        X, y, _ = make_data(23)
        cfg = raw_config(kkt_tol=1e-300, gap_tol=1e-6)
        fit = lasso_cd(X, y, 0.05, cfg)
        assert fit.converged
        assert fit.duality_gap <= 1e-6 * (y @ y) / (2 * X.shape[0])

    def test_path_is_sorted_decreasing(self):
        X, y, _ = make_data(9)
        fits = lasso_path(X, y, [0.05, 0.5, 0.2], raw_config())
        assert [fit.lambda_ for fit in fits] == [0.5, 0.2, 0.05]


class TestPathTruncation:
    def setup_method(self):
        rng = np.random.default_rng(24)
        # more columns than rows: the fit saturates before the end of the grid
        self.X = rng.standard_normal((20, 40))
        self.y = self.X[:, :3] @ np.array([1.0, -1.0, 0.5]) + 0.1 * rng.standard_normal(20)

    def test_stops_when_saturated(self):
        problem = Problem(self.X, self.y, raw_config(lambda_grid_size=100, lambda_min_ratio=1e-4))
        grid = problem.lambda_grid()
        fits = problem.path(grid)
        assert MIN_PATH_LENGTH <= len(fits) < grid.size
        assert problem.deviance_ratio(fits[-1].beta) > 0.9

        # the kept solutions are those of the full path
        full = problem.path(grid[: len(fits)], truncate=False)
        for fit, expected in zip(fits, full):
            np.testing.assert_array_equal(fit.beta, expected.beta)

    def test_disabled(self):
        cfg = raw_config(lambda_grid_size=8, lambda_min_ratio=1e-3, truncate_path=False)
        fits = lasso_path(self.X, self.y, cfg=cfg)
        assert len(fits) == 8

    def test_short_paths_are_kept(self):
        X, y, _ = make_data(25)
        fits = lasso_path(X, y, [0.5, 0.2, 0.1, 1e-6], raw_config())
        assert len(fits) == 4


class TestGraphLasso:
    def setup_method(self):
        self.L = laplacian(build_ring(8), UNNORMALIZED)

    def test_relabeling_nodes_permutes_the_solution(self):
        """Permuting the columns and the graph nodes together permutes the coefficients."""
        X, y, _ = make_data(26)
        permutation = np.array([5, 2, 7, 0, 3, 6, 1, 4])
        inverse = np.argsort(permutation)
        fit = graph_lasso(X, y, self.L, 0.05, 0.3, raw_config())
        moved_L = laplacian(build_ring(8).relabel(inverse), UNNORMALIZED)
        moved = graph_lasso(X[:, permutation], y, moved_L, 0.05, 0.3, raw_config())
        np.testing.assert_allclose(moved.beta, fit.beta[permutation], atol=1e-6)

    def test_objective_on_the_given_scale(self):
        X, y, _ = make_data(27)
        X = X * np.linspace(0.5, 3.0, 8)
        fit = graph_lasso(X, y, self.L, 0.05, 0.5, SolverConfig(tol=1e-12))
        expected = graph_lasso_objective(X, y, self.L, fit.beta, 0.05, 0.5)
        assert fit.objective == pytest.approx(expected, abs=1e-10)

    def test_no_graph_penalty_is_lasso(self):
        """``lambda2 = 0`` gives the LASSO solution, on 50 random instances."""
        for seed in range(50):
            X, y, _ = make_data(seed, n=30)
            lambda1 = 0.02 + 0.01 * (seed % 10)
            expected = lasso_cd(X, y, lambda1)
            fit = graph_lasso(X, y, self.L, lambda1, 0.0)
            np.testing.assert_allclose(fit.beta, expected.beta, atol=1e-8)

    def test_augmentation_identity(self):
        """The stacked LASSO objective equals the graph objective, on 50 random instances."""
        rng = np.random.default_rng(10)
        for seed in range(50):
            X, y, _ = make_data(seed, n=25)
            beta = rng.standard_normal(8)
            lambda1, lambda2 = rng.uniform(0.01, 1.0, 2)
            Xa, ya = augment(X, y, self.L, lambda2)
            residual = ya - Xa @ beta
            stacked = residual @ residual / (2 * X.shape[0]) + lambda1 * np.abs(beta).sum()
            expected = graph_lasso_objective(X, y, self.L, beta, lambda1, lambda2)
            assert stacked == pytest.approx(expected, rel=1e-10, abs=1e-10)

    def test_objective_at_solution(self):
        X, y, _ = make_data(11)
        fit = graph_lasso(X, y, self.L, 0.05, 0.3, raw_config())
        expected = graph_lasso_objective(X, y, self.L, fit.beta, 0.05, 0.3)
        assert fit.objective == pytest.approx(expected, abs=1e-10)
        assert fit.lambda2 == 0.3

    @settings(max_examples=20, deadline=None)
    @given(strategies.integers(0, 10**6), strategies.floats(0.01, 0.3), strategies.floats(0, 2))
    def test_kkt_certificate(self, seed, lambda1, lambda2):
        X, y, _ = make_data(seed)
        fit = graph_lasso(X, y, self.L, lambda1, lambda2, raw_config())
        assert fit.converged
        Xa, ya = augment(X, y, self.L, lambda2)
        assert kkt_violation(Xa, ya, fit.beta, lambda1, denom=X.shape[0]) <= 1e-6

    def test_graph_penalty_on_unscaled_coefficients(self):
        """With standardization, the graph term still applies to the returned ``beta``."""
        X, y, _ = make_data(12)
        X = X * np.linspace(0.5, 3.0, 8)
        fit = graph_lasso(X, y, self.L, 0.05, 0.5, SolverConfig(tol=1e-12))
        Xa, ya = augment(X, y, self.L, 0.5)
        violation = kkt_violation(Xa, ya, fit.beta, 0.05, denom=X.shape[0], weights=X.std(axis=0))
        assert violation <= 1e-5

    def test_graph_penalty_pulls_neighbors_together(self):
        X, y, _ = make_data(13)
        loose = graph_lasso(X, y, self.L, 0.01, 0.0, raw_config())
        tight = graph_lasso(X, y, self.L, 0.01, 50.0, raw_config())
        assert self.L.quadratic_form(tight.beta) < self.L.quadratic_form(loose.beta)

    @pytest.mark.parametrize("m, seed", [(1, 0), (2, 1), (2, 2), (3, 3)])
    def test_brute_force(self, m, seed):
        """Small problems match an exhaustive grid search within 0.002 per coordinate."""
        rng = np.random.default_rng(seed)
        n = 30
        X = rng.standard_normal((n, m))
        y = X @ rng.uniform(-1, 1, m) + 0.3 * rng.standard_normal(n)
        X, y = X - X.mean(axis=0), y - y.mean()
        L = laplacian(Graph.from_edges(m, [(j, j + 1) for j in range(m - 1)]), UNNORMALIZED)
        fit = graph_lasso(X, y, L, 0.05, 0.2, raw_config())
        np.testing.assert_allclose(fit.beta, brute_force(X, y, L, 0.05, 0.2), atol=0.002)

    def test_laplacian_size_mismatch(self):
        with pytest.raises(InvalidInputError) as raise_context:
            graph_lasso(np.ones((5, 3)), np.ones(5), self.L, 0.1, 0.1)
        assert "Laplacian" in str(raise_context)

    def test_negative_lambda2(self):
        with pytest.raises(InvalidInputError):
            graph_lasso(np.ones((5, 8)), np.ones(5), self.L, 0.1, -0.1)


class TestCrossValidation:
    def test_folds_are_balanced(self):
        folds = fold_ids(10, 3, 0)
        assert sorted(np.bincount(folds).tolist()) == [3, 3, 4]
        np.testing.assert_array_equal(folds, fold_ids(10, 3, 0))

    def test_cv_lasso_is_deterministic(self):
        X, y, _ = make_data(14, n=60)
        first_lambda, first = cv_lasso(X, y)
        second_lambda, second = cv_lasso(X, y)
        assert first_lambda == second_lambda
        np.testing.assert_array_equal(first.beta, second.beta)
        assert first.lambda_ == first_lambda

    def test_cv_lasso_selects_signal(self):
        X, y, beta = make_data(15, n=80, noise=0.2)
        _, fit = cv_lasso(X, y)
        assert set(np.flatnonzero(beta)) <= set(fit.support)

    def test_cv_lasso_given_grid(self):
        X, y, _ = make_data(16)
        lambda_, _ = cv_lasso(X, y, lambdas=[0.01, 0.1, 1.0])
        assert lambda_ in (0.01, 0.1, 1.0)

    def test_folds_follow_kfold(self):
        """Each fold is the held-out part of a shuffled ``KFold`` split."""
        folds = fold_ids(12, 4, 7)
        splits = KFold(n_splits=4, shuffle=True, random_state=7).split(np.empty((12, 1)))
        for fold, (_train, test) in enumerate(splits):
            np.testing.assert_array_equal(np.flatnonzero(folds == fold), np.sort(test))

    def test_one_standard_error_rule(self):
        """The 1se rule never selects a smaller ``lambda`` than the minimum rule."""
        X, y, _ = make_data(28, n=60)
        smallest, _ = cv_lasso(X, y)
        largest, fit = cv_lasso(X, y, rule="1se")
        assert largest >= smallest
        assert fit.lambda_ == largest

    def test_unknown_rule(self):
        X, y, _ = make_data(29)
        with pytest.raises(InvalidInputError) as raise_context:
            cv_lasso(X, y, rule="2se")
        assert "Unknown selection rule" in str(raise_context)

    def test_too_few_rows(self):
        with pytest.raises(InvalidInputError) as raise_context:
            cv_lasso(np.ones((2, 3)), np.ones(2))
        assert "at least 3 rows" in str(raise_context)

    def test_cv_graph_lasso(self):
        X, y, _ = make_data(17, n=60)
        L = laplacian(build_ring(8), UNNORMALIZED)
        lambda1, lambda2, fit = cv_graph_lasso(X, y, L, lambda2_grid=(0.0, 0.5))
        assert lambda2 in (0.0, 0.5)
        assert fit.lambda2 == lambda2
        assert fit.lambda_ == lambda1
        assert fit.converged

    def test_parallel_folds_match_serial(self):
        X, y, _ = make_data(18, n=45)
        serial = cv_lasso(X, y, SolverConfig(n_jobs=1))
        parallel = cv_lasso(X, y, SolverConfig(n_jobs=2))
        assert serial[0] == parallel[0]
        np.testing.assert_array_equal(serial[1].beta, parallel[1].beta)
