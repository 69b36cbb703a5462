# ivgl / Copyright Consortium Érudit <tech@erudit.org> / MIT License

"""
Coordinate-descent solvers for the LASSO and the graph-constrained LASSO.

Every solver minimizes

    (2n)^-1 ||y - X b||^2 + lambda1 ||b||_1 + lambda2 b' L b

on mean-centered data (and, when ``standardize`` is on, on columns scaled to
unit standard deviation, the graph term then being applied to the unscaled
coefficients). The graph term is folded into the least-squares term by
stacking ``sqrt(2 n lambda2) S`` under ``X``, ``S`` being the square-root
factor of ``L``, while keeping ``n`` (not the stacked row count) in the loss
denominator so both problems are the same.
"""

import dataclasses
import logging

from dataclasses import dataclass, field

import numpy as np

from joblib import Parallel, delayed
from numba import jit
from sklearn.model_selection import KFold

from ivgl.conf import setting
from ivgl.exceptions import InvalidInputError


logger = logging.getLogger("ivgl.solver")

# Tolerance tightening stops below this relative objective change
TOL_FLOOR = 1e-16

# A truncated path keeps at least this many solutions
MIN_PATH_LENGTH = 5
# Path stops once the fraction of explained variance reaches this value...
DEVIANCE_RATIO_MAX = 0.999
# ...or improves by less than this fraction from one lambda to the next
DEVIANCE_CHANGE_MIN = 1e-5

CV_RULES = ("min", "1se")


@dataclass(frozen=True)
class SolverConfig:
    """
    Options of the solvers. Defaults come from the ``IVGL_*`` settings (see
    ``ivgl.conf``), read when the config is created.
    """

    max_sweeps: int = field(default_factory=lambda: setting("IVGL_MAX_SWEEPS"))
    tol: float = field(default_factory=lambda: setting("IVGL_TOL"))
    kkt_tol: float = field(default_factory=lambda: setting("IVGL_KKT_TOL"))
    gap_tol: float = field(default_factory=lambda: setting("IVGL_GAP_TOL"))
    truncate_path: bool = field(default_factory=lambda: setting("IVGL_TRUNCATE_PATH"))
    standardize: bool = field(default_factory=lambda: setting("IVGL_STANDARDIZE"))
    intercept: bool = False
    lambda_grid_size: int = field(default_factory=lambda: setting("IVGL_LAMBDA_GRID_SIZE"))
    lambda_min_ratio: float = field(default_factory=lambda: setting("IVGL_LAMBDA_MIN_RATIO"))
    cv_folds: int = field(default_factory=lambda: setting("IVGL_CV_FOLDS"))
    lambda2_grid: tuple = field(default_factory=lambda: tuple(setting("IVGL_LAMBDA2_GRID")))
    n_jobs: int = field(default_factory=lambda: setting("IVGL_N_JOBS"))
    rng_seed: int = field(default_factory=lambda: setting("IVGL_SEED"))

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidInputError("tol must be positive, got %r" % self.tol)
        if self.max_sweeps < 1:
            raise InvalidInputError("max_sweeps must be at least 1, got %r" % self.max_sweeps)
        if self.cv_folds < 2:
            raise InvalidInputError("cv_folds must be at least 2, got %r" % self.cv_folds)
        if not 0 < self.lambda_min_ratio < 1:
            raise InvalidInputError(
                "lambda_min_ratio must be in (0, 1), got %r" % self.lambda_min_ratio
            )
        if self.lambda_grid_size < 1:
            raise InvalidInputError(
                "lambda_grid_size must be at least 1, got %r" % self.lambda_grid_size
            )
        if not self.lambda2_grid or min(self.lambda2_grid) < 0:
            raise InvalidInputError(
                "lambda2_grid must be a non-empty set of nonnegative values, got %r"
                % (self.lambda2_grid,)
            )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def as_dict(self):
        result = dataclasses.asdict(self)
        result["lambda2_grid"] = list(self.lambda2_grid)
        return result


@dataclass
class LassoFit:
    """
    Result of one solve. ``beta`` is on the scale of the given ``X``;
    ``intercept`` is only used to predict on new rows (data are centered).

    ``objective_trace`` and ``kkt_violation`` are measured on the problem
    actually solved: when ``standardized``, its l1 term weighs each
    coefficient by the standard deviation of its column. ``objective`` is
    always the unweighted objective at ``beta`` on the centered data.
    """

    beta: np.ndarray
    lambda_: float
    objective_trace: np.ndarray
    n_sweeps: int
    kkt_violation: float
    converged: bool
    intercept: float = 0.0
    lambda2: float = 0.0
    duality_gap: float = float("nan")
    standardized: bool = False
    objective_value: float = None

    @property
    def support(self):
        return np.flatnonzero(self.beta)

    @property
    def objective(self):
        if self.objective_value is not None:
            return self.objective_value
        return float(self.objective_trace[-1]) if self.objective_trace.size else float("nan")

    def predict(self, X):
        return np.asarray(X, dtype=float) @ self.beta + self.intercept


def soft_threshold(z, gamma):
    """``sign(z) * max(|z| - gamma, 0)``."""
    if gamma < 0:
        raise InvalidInputError("Threshold must be nonnegative, got %r" % gamma)
    return float(np.sign(z) * max(abs(z) - gamma, 0.0))


@jit(nopython=True, cache=True, nogil=True)
def _soft_threshold(z, gamma):
    if z > gamma:
        return z - gamma
    if z < -gamma:
        return z + gamma
    return 0.0


@jit(nopython=True, cache=True, nogil=True)
def _objective(residual, beta, penalties, denom):
    loss = 0.0
    for i in range(residual.shape[0]):
        loss += residual[i] * residual[i]
    penalty = 0.0
    for j in range(beta.shape[0]):
        penalty += penalties[j] * abs(beta[j])
    return loss / (2.0 * denom) + penalty


@jit(nopython=True, cache=True, nogil=True)
def _coordinate_descent(X, y, beta, penalties, denom, max_sweeps, tol, trace):
    """
    Cyclic coordinate descent on ``(2 denom)^-1 ||y - X beta||^2 +
    sum_j penalties_j |beta_j|``, ``beta`` being updated in place.

    Sweeps alternate between all coordinates and the active ones only; it
    stops after a full sweep with a relative objective change below ``tol``
    that left the active set untouched. The objective after each sweep is
    written in ``trace``.
    """
    n, m = X.shape
    col_sq = np.zeros(m)
    for j in range(m):
        total = 0.0
        for i in range(n):
            total += X[i, j] * X[i, j]
        col_sq[j] = total / denom

    residual = y.copy()
    for j in range(m):
        if beta[j] != 0.0:
            for i in range(n):
                residual[i] -= X[i, j] * beta[j]
    f_old = _objective(residual, beta, penalties, denom)
    full = True
    n_sweeps = 0
    converged = False

    while n_sweeps < max_sweeps:
        active_changed = False
        for j in range(m):
            old = beta[j]
            if col_sq[j] == 0.0 or (not full and old == 0.0):
                continue
            rho = 0.0
            for i in range(n):
                rho += X[i, j] * residual[i]
            rho = rho / denom + col_sq[j] * old
            new = _soft_threshold(rho, penalties[j]) / col_sq[j]
            if new != old:
                delta = new - old
                for i in range(n):
                    residual[i] -= X[i, j] * delta
                beta[j] = new
                if old == 0.0 or new == 0.0:
                    active_changed = True

        f = _objective(residual, beta, penalties, denom)
        trace[n_sweeps] = f
        n_sweeps += 1
        small = abs(f_old - f) <= tol * abs(f_old)
        f_old = f
        if small:
            if full and not active_changed:
                converged = True
                break
            full = True
        else:
            full = False

    return n_sweeps, converged


def _kkt_violation(X, y, beta, penalties, denom):
    gradient = X.T @ (X @ beta - y) / denom
    nonzero = beta != 0
    violation = np.where(
        nonzero,
        np.abs(gradient + penalties * np.sign(beta)),
        np.maximum(np.abs(gradient) - penalties, 0.0),
    )
    return float(violation.max()) if violation.size else 0.0


def _duality_gap(X, y, beta, penalties, denom):
    """
    Gap between the objective at ``beta`` and the dual objective at the
    residual scaled into the dual feasible set. Infinite when a coefficient
    is unpenalized (the dual set is then not reachable by scaling).
    """
    residual = y - X @ beta
    primal = residual @ residual / (2 * denom) + penalties @ np.abs(beta)
    correlations = np.abs(X.T @ residual) / denom
    if np.any((penalties == 0) & (correlations > 0)):
        return float("inf")
    ratios = correlations[penalties > 0] / penalties[penalties > 0]
    top = ratios.max() if ratios.size else 0.0
    dual_residual = residual / max(1.0, top)
    dual = (y @ y - (y - dual_residual) @ (y - dual_residual)) / (2 * denom)
    return float(max(primal - dual, 0.0))


def kkt_violation(X, y, beta, lambda_, denom=None, weights=None):
    """
    Largest violation of the optimality conditions of
    ``(2 denom)^-1 ||y - X beta||^2 + lambda sum_j weights_j |beta_j|`` at
    ``beta`` (``denom`` defaults to the number of rows, ``weights`` to 1).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if denom is None:
        denom = X.shape[0]
    penalties = lambda_ * (np.ones(X.shape[1]) if weights is None else np.asarray(weights))
    return _kkt_violation(X, y, beta, penalties, denom)


def duality_gap(X, y, beta, lambda_, denom=None, weights=None):
    """Duality gap of the same problem as ``kkt_violation``, at ``beta``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if denom is None:
        denom = X.shape[0]
    weights = np.ones(X.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    return _duality_gap(X, y, beta, lambda_ * weights, denom)


def as_matrix(values, name="X"):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim != 2:
        raise InvalidInputError("%s must be a 2D array, got %d dimensions" % (name, values.ndim))
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("%s contains non-finite values" % name)
    return values


def as_vector(values, name="y"):
    values = np.asarray(values, dtype=float).ravel()
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("%s contains non-finite values" % name)
    return values


def lasso_objective(X, y, beta, lambda_):
    """``(2n)^-1 ||y - X beta||^2 + lambda ||beta||_1``, on the data as given."""
    X, y, beta = np.asarray(X), np.asarray(y), np.asarray(beta)
    residual = y - X @ beta
    return float(residual @ residual / (2 * X.shape[0]) + lambda_ * np.abs(beta).sum())


def graph_lasso_objective(X, y, L, beta, lambda1, lambda2):
    """``(2n)^-1 ||y - X beta||^2 + lambda1 ||beta||_1 + lambda2 beta' L beta``."""
    return lasso_objective(X, y, beta, lambda1) + lambda2 * L.quadratic_form(beta)


def augment(X, y, L, lambda2):
    """
    Stack ``sqrt(2 n lambda2) S`` under ``X`` and zeros under ``y``: the LASSO
    objective on the stacked data, with ``n`` as loss denominator, is the
    graph-constrained objective on ``(X, y)``.
    """
    X, y = np.asarray(X, dtype=float), np.asarray(y, dtype=float)
    n = X.shape[0]
    rows = np.sqrt(2.0 * n * lambda2) * L.sqrt_factor
    return np.vstack([X, rows]), np.concatenate([y, np.zeros(rows.shape[0])])


class Problem:
    """
    A (graph-constrained) LASSO problem with data centered, optionally
    standardized, and augmented once, then solved for any ``lambda1``.
    """

    def __init__(self, X, y, cfg=None, L=None, lambda2=0.0):
        self.cfg = cfg or SolverConfig()
        X = as_matrix(X, "X")
        y = as_vector(y, "y")
        if X.shape[0] != y.shape[0]:
            raise InvalidInputError(
                "X has %d rows but y has %d entries" % (X.shape[0], y.shape[0])
            )
        if lambda2 < 0:
            raise InvalidInputError("lambda2 must be nonnegative, got %r" % lambda2)
        if L is not None and L.p != X.shape[1]:
            raise InvalidInputError(
                "Laplacian is %d x %d but X has %d columns" % (L.p, L.p, X.shape[1])
            )
        if lambda2 > 0 and L is None:
            raise InvalidInputError("A Laplacian is needed when lambda2 > 0")

        self.n, self.m = X.shape
        self.lambda2 = float(lambda2)
        self.x_mean = X.mean(axis=0)
        self.y_mean = y.mean()
        centered = X - self.x_mean
        self.scale = np.ones(self.m)
        if self.cfg.standardize:
            std = centered.std(axis=0)
            self.scale = np.where(std > 0, std, 1.0)
        scaled = centered / self.scale
        target = y - self.y_mean

        if self.lambda2 > 0:
            scaled, target = augment(scaled, target, L, self.lambda2)
            # augmented rows act on the unscaled coefficients
            scaled[self.n :] /= self.scale

        self.design = np.asfortranarray(scaled)
        self.target = np.ascontiguousarray(target)

    def lambda_max(self):
        """Smallest ``lambda1`` for which the solution is 0."""
        if self.n == 0:
            return 0.0
        correlations = self.design[: self.n].T @ self.target[: self.n] / self.n
        return float(np.abs(correlations).max()) if correlations.size else 0.0

    def lambda_grid(self):
        """Log-spaced grid from ``lambda_max`` down to ``lambda_min_ratio * lambda_max``."""
        top = self.lambda_max()
        if top <= 0:
            return np.array([0.0])
        return np.geomspace(top, top * self.cfg.lambda_min_ratio, self.cfg.lambda_grid_size)

    def solve(self, lambda1, beta_init=None):
        """Solve for ``lambda1``, starting from ``beta_init`` (unscaled) or 0."""
        if lambda1 < 0:
            raise InvalidInputError("lambda1 must be nonnegative, got %r" % lambda1)
        penalties = np.full(self.m, float(lambda1))
        coefs = np.zeros(self.m) if beta_init is None else np.asarray(beta_init) * self.scale
        coefs = np.ascontiguousarray(coefs, dtype=float)

        traces = []
        total = 0
        tol = self.cfg.tol
        converged = False
        while True:
            remaining = self.cfg.max_sweeps - total
            if remaining <= 0:
                break
            trace = np.empty(remaining)
            sweeps, converged = _coordinate_descent(
                self.design, self.target, coefs, penalties, float(self.n), remaining, tol, trace
            )
            traces.append(trace[:sweeps])
            total += sweeps
            if not converged or self._optimal(coefs, penalties) or tol <= TOL_FLOOR:
                break
            # the objective criterion was met before the optimality one
            tol = max(tol / 100, TOL_FLOOR)

        violation = _kkt_violation(self.design, self.target, coefs, penalties, self.n)
        gap = _duality_gap(self.design, self.target, coefs, penalties, self.n)
        converged = converged and self._optimal(coefs, penalties)
        if not converged:
            logger.warning(
                "Coordinate descent did not converge "
                "(lambda1=%g, lambda2=%g, sweeps=%d, kkt=%g, gap=%g)",
                lambda1,
                self.lambda2,
                total,
                violation,
                gap,
            )

        beta = coefs / self.scale
        residual = self.target - self.design @ coefs
        return LassoFit(
            beta=beta,
            lambda_=float(lambda1),
            objective_trace=np.concatenate(traces) if traces else np.empty(0),
            n_sweeps=total,
            kkt_violation=violation,
            converged=converged,
            intercept=float(self.y_mean - self.x_mean @ beta),
            lambda2=self.lambda2,
            duality_gap=gap,
            standardized=bool(self.cfg.standardize),
            objective_value=float(
                residual @ residual / (2 * self.n) + lambda1 * np.abs(beta).sum()
            ),
        )

    def _optimal(self, coefs, penalties):
        """Optimality conditions within ``kkt_tol``, or duality gap within ``gap_tol``."""
        if _kkt_violation(self.design, self.target, coefs, penalties, self.n) <= self.cfg.kkt_tol:
            return True
        gap = _duality_gap(self.design, self.target, coefs, penalties, self.n)
        scale = self.target @ self.target / (2 * self.n)
        return gap <= self.cfg.gap_tol * max(scale, np.finfo(float).tiny)

    def deviance_ratio(self, beta):
        """Fraction of the variance of the (centered) outcome explained by ``beta``."""
        target = self.target[: self.n]
        total = target @ target
        if total == 0:
            return 0.0
        residual = target - self.design[: self.n] @ (np.asarray(beta) * self.scale)
        return float(1.0 - residual @ residual / total)

    def path(self, lambdas, truncate=None):
        """
        Solve along ``lambdas`` (decreasing), warm-starting each from the
        previous. When ``truncate`` (``cfg.truncate_path`` if None), stop after
        at least ``MIN_PATH_LENGTH`` solutions once the fit saturates: nearly
        all the variance explained, no more progress, or as many nonzero
        coefficients as rows. The returned list is then shorter than ``lambdas``.
        """
        if truncate is None:
            truncate = self.cfg.truncate_path
        fits = []
        beta = None
        previous = 0.0
        for lambda1 in lambdas:
            fit = self.solve(lambda1, beta_init=beta)
            beta = fit.beta
            fits.append(fit)
            ratio = self.deviance_ratio(beta)
            if truncate and len(fits) >= MIN_PATH_LENGTH and (
                ratio >= DEVIANCE_RATIO_MAX
                or ratio - previous < DEVIANCE_CHANGE_MIN * ratio
                or fit.support.size >= self.n
            ):
                logger.debug(
                    "Path stopped at lambda1=%g after %d of %d values (explained %g, %d nonzero)",
                    lambda1,
                    len(fits),
                    len(lambdas),
                    ratio,
                    fit.support.size,
                )
                break
            previous = ratio
        return fits


def lasso_cd(X, y, lambda_, cfg=None, beta_init=None):
    """Minimize ``(2n)^-1 ||y - X beta||^2 + lambda ||beta||_1`` by cyclic coordinate descent."""
    return Problem(X, y, cfg).solve(lambda_, beta_init=beta_init)


def graph_lasso(X, y, L, lambda1, lambda2, cfg=None, beta_init=None):
    """
    Minimize ``(2n)^-1 ||y - X beta||^2 + lambda1 ||beta||_1 + lambda2 beta' L
    beta``. With ``lambda2 = 0`` this is exactly ``lasso_cd``.
    """
    return Problem(X, y, cfg, L=L, lambda2=lambda2).solve(lambda1, beta_init=beta_init)


def lasso_path(X, y, lambdas=None, cfg=None, L=None, lambda2=0.0, truncate=None):
    """
    Warm-started solutions along ``lambdas`` (the default grid when None),
    possibly truncated once the fit saturates (see ``Problem.path``).
    """
    problem = Problem(X, y, cfg, L=L, lambda2=lambda2)
    if lambdas is None:
        lambdas = problem.lambda_grid()
    return problem.path(np.sort(np.asarray(lambdas, dtype=float))[::-1], truncate=truncate)


def fold_ids(n, folds, seed):
    """Fold of each row: balanced, shuffled with ``seed``."""
    result = np.empty(n, dtype=int)
    splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    for fold, (_train, test) in enumerate(splitter.split(np.empty((n, 1)))):
        result[test] = fold
    return result


def _fold_errors(X, y, train, lambdas, cfg, L, lambda2):
    """Held-out sum of squared errors of the path fitted without the ``~train`` rows."""
    fits = Problem(X[train], y[train], cfg, L=L, lambda2=lambda2).path(lambdas)
    test = ~train
    return np.array([np.sum((y[test] - fit.predict(X[test])) ** 2) for fit in fits])


def _cv_curve(X, y, lambdas, cfg, L=None, lambda2=0.0):
    """
    Mean held-out squared error for each of ``lambdas`` and its standard
    error across folds. Fold paths may be truncated: both curves only cover
    the leading ``lambdas`` every fold reached.
    """
    n = X.shape[0]
    folds = fold_ids(n, cfg.cv_folds, cfg.rng_seed)
    errors = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_fold_errors)(X, y, folds != fold, lambdas, cfg, L, lambda2)
        for fold in range(cfg.cv_folds)
    )
    length = min(len(fold_errors) for fold_errors in errors)
    errors = np.array([fold_errors[:length] for fold_errors in errors])
    sizes = np.bincount(folds, minlength=cfg.cv_folds)[:, None]
    se = np.std(errors / sizes, axis=0, ddof=1) / np.sqrt(cfg.cv_folds)
    return errors.sum(axis=0) / n, se


def _select(curve, se, rule):
    """
    Index of the selected ``lambda`` on a decreasing grid: the smallest CV
    error (``min``), or the largest ``lambda`` within one standard error of
    it (``1se``). Ties go to the larger ``lambda``.
    """
    best = int(np.argmin(curve))
    if rule == "1se":
        return int(np.flatnonzero(curve <= curve[best] + se[best])[0])
    return best


def _check_cv(X, y, cfg, rule="min"):
    X = as_matrix(X, "X")
    y = as_vector(y, "y")
    if X.shape[0] < cfg.cv_folds:
        raise InvalidInputError(
            "Cross-validation needs at least %d rows, got %d" % (cfg.cv_folds, X.shape[0])
        )
    if rule not in CV_RULES:
        raise InvalidInputError(
            "Unknown selection rule %r, expected one of %s" % (rule, ", ".join(CV_RULES))
        )
    return X, y


def cv_lasso(X, y, cfg=None, lambdas=None, rule="min"):
    """
    Select ``lambda`` by K-fold cross-validation over a decreasing grid and
    refit on all rows. Returns ``(lambda_star, fit)``; ties go to the larger
    ``lambda``. ``rule`` is ``min`` or ``1se`` (see ``_select``).
    """
    cfg = cfg or SolverConfig()
    X, y = _check_cv(X, y, cfg, rule)
    problem = Problem(X, y, cfg)
    lambdas = problem.lambda_grid() if lambdas is None else np.sort(lambdas)[::-1]
    curve, se = _cv_curve(X, y, lambdas, cfg)
    best = _select(curve, se, rule)
    fit = problem.path(lambdas[: best + 1], truncate=False)[-1]
    logger.debug(
        "cv_lasso selected lambda=%g by the %s rule (cv error %g)", lambdas[best], rule, curve[best]
    )
    return float(lambdas[best]), fit


def cv_graph_lasso(X, y, L, lambda2_grid=None, cfg=None, lambdas=None, rule="min"):
    """
    Select ``(lambda1, lambda2)`` by K-fold cross-validation: a ``lambda1``
    path for each value of ``lambda2_grid`` (``cfg.lambda2_grid`` when None).
    Returns ``(lambda1_star, lambda2_star, fit)``; ties go to the first
    ``lambda2`` of the grid and to the larger ``lambda1``. With the ``1se``
    rule, the largest ``lambda1`` within one standard error of the best pair
    is taken on the ``lambda2`` of that pair.
    """
    cfg = cfg or SolverConfig()
    X, y = _check_cv(X, y, cfg, rule)
    if lambda2_grid is None:
        lambda2_grid = cfg.lambda2_grid

    best = None
    for lambda2 in lambda2_grid:
        problem = Problem(X, y, cfg, L=L, lambda2=lambda2)
        grid = problem.lambda_grid() if lambdas is None else np.sort(lambdas)[::-1]
        curve, se = _cv_curve(X, y, grid, cfg, L=L, lambda2=lambda2)
        index = _select(curve, se, "min")
        if best is None or curve[index] < best[0]:
            best = (curve[index], problem, grid, _select(curve, se, rule))

    error, problem, grid, index = best
    fit = problem.path(grid[: index + 1], truncate=False)[-1]
    logger.debug(
        "cv_graph_lasso selected lambda1=%g, lambda2=%g (cv error %g)",
        grid[index],
        problem.lambda2,
        error,
    )
    return float(grid[index]), problem.lambda2, fit
