# ivgl / Copyright Consortium Érudit <tech@erudit.org> / MIT License

"""
IVGL-S: joint estimation of the exposure effects ``beta`` and of the direct
effects ``alpha`` of invalid instruments, by alternating a LASSO of the
residualized outcome on the instruments (``alpha``-step) and a
graph-constrained LASSO of the residualized outcome on the exposures
(``beta``-step).
"""

import logging

from dataclasses import dataclass

import numpy as np

from scipy import linalg

from ivgl.conf import setting
from ivgl.exceptions import InvalidInputError
from ivgl.solver import CV_RULES, Problem, as_matrix, cv_lasso
from ivgl.two_stage import IVGLS, FitResult, IVGLEstimator


logger = logging.getLogger("ivgl.invalid_iv")

# Singular values below this fraction of the largest one are treated as 0
RANK_CUTOFF = 1e-10


@dataclass(frozen=True)
class Projector:
    """Orthogonal projector ``basis @ basis.T`` onto the column space of the instruments."""

    basis: np.ndarray

    @property
    def rank(self):
        return self.basis.shape[1]

    def apply(self, values):
        return self.basis @ (self.basis.T @ values)

    def matrix(self):
        return self.basis @ self.basis.T


@dataclass(frozen=True)
class AlternatingState:
    """Coefficients after one ``alpha``-step / ``beta``-step round."""

    beta: np.ndarray
    alpha: np.ndarray
    iteration: int
    delta: float
    converged: bool


def projector(Z):
    """Projector on ``span(Z)`` from a thin SVD, dropping singular values below the cutoff."""
    Z = as_matrix(Z, "Z")
    n = Z.shape[0]
    if Z.size == 0 or not np.any(Z):
        return Projector(basis=np.zeros((n, 0)))
    U, singular_values, _ = linalg.svd(Z, full_matrices=False)
    keep = singular_values > RANK_CUTOFF * singular_values[0]
    return Projector(basis=U[:, keep])


def objective_eq3(ds, L, beta, alpha, lambda1, lambda2, lambda3, proj=None):
    """
    ``1/2 ||P_Z (Y - X beta - Z alpha)||^2 + lambda1 ||beta||_1
    + lambda2 beta' L beta + lambda3 ||alpha||_1``.
    """
    ds.require_instruments()
    beta = np.asarray(beta, dtype=float).ravel()
    alpha = np.asarray(alpha, dtype=float).ravel()
    if beta.size != ds.p or alpha.size != ds.q:
        raise InvalidInputError(
            "Expected %d exposure and %d instrument coefficients, got %d and %d"
            % (ds.p, ds.q, beta.size, alpha.size)
        )
    if L is not None and L.p != ds.p:
        raise InvalidInputError("Laplacian has %d nodes but X has %d columns" % (L.p, ds.p))
    if proj is None:
        proj = projector(ds.Z)

    projected = proj.apply(ds.Y - ds.X @ beta - ds.Z @ alpha)
    value = 0.5 * float(projected @ projected)
    value += lambda1 * float(np.abs(beta).sum()) + lambda3 * float(np.abs(alpha).sum())
    if L is not None:
        value += lambda2 * L.quadratic_form(beta)
    return value


def _penalty_weights(matrix, standardize):
    if not standardize:
        return np.ones(matrix.shape[1])
    std = matrix.std(axis=0)
    return np.where(std > 0, std, 1.0)


class IVGLSEstimator(IVGLEstimator):
    """
    Alternating estimator:

        * ``alpha``-step: LASSO of ``Y - X_hat beta`` on ``Z``
        * ``beta``-step: graph-constrained LASSO of ``Y - Z alpha`` on ``X_hat``

    until the largest relative change of ``(beta, alpha)`` falls below
    ``alt_tol`` or after ``max_alt_iters`` rounds. Each step selects its
    penalties by cross-validation (the ``alpha``-step with ``alpha_rule``),
    unless ``fixed_lambdas`` gives ``(lambda1, lambda2, lambda3)``.

    With ``warm_start``, ``beta`` starts from a ``beta``-step at ``alpha = 0``
    (the IVGL fit), so the first ``alpha``-step only sees what the exposures
    leave unexplained. Without it, the alternation starts at ``(0, 0)``.
    """

    class Meta(IVGLEstimator.Meta):
        method_tag = IVGLS

        # Regress on the first-stage fitted exposures (False: on the raw exposures)
        use_fitted_exposures = True

        # Start ``beta`` from the IVGL fit instead of 0
        warm_start = True

        # Cross-validation rule of the alpha-step: "min" or "1se"
        alpha_rule = "1se"

        # Alternation limits, None to use the IVGL_MAX_ALT_ITERS and
        # IVGL_ALT_TOL settings, read when an estimator is created
        max_alt_iters = None
        alt_tol = None

    def __init__(
        self,
        cfg=None,
        max_alt_iters=None,
        alt_tol=None,
        fixed_lambdas=None,
        use_fitted_exposures=None,
        warm_start=None,
        alpha_rule=None,
    ):
        super(IVGLSEstimator, self).__init__(cfg)
        self.max_alt_iters = self._option(
            "max_alt_iters", max_alt_iters, setting("IVGL_MAX_ALT_ITERS")
        )
        self.alt_tol = self._option("alt_tol", alt_tol, setting("IVGL_ALT_TOL"))
        self.use_fitted_exposures = self._option("use_fitted_exposures", use_fitted_exposures)
        self.warm_start = self._option("warm_start", warm_start)
        self.alpha_rule = self._option("alpha_rule", alpha_rule)
        if self.max_alt_iters < 1:
            raise InvalidInputError("max_alt_iters must be at least 1")
        if self.alpha_rule not in CV_RULES:
            raise InvalidInputError(
                "Unknown alpha_rule %r, expected one of %s"
                % (self.alpha_rule, ", ".join(CV_RULES))
            )
        if fixed_lambdas is not None and len(fixed_lambdas) != 3:
            raise InvalidInputError("fixed_lambdas must be (lambda1, lambda2, lambda3)")
        self.fixed_lambdas = fixed_lambdas
        self.states_ = []

    def _option(self, name, value, fallback=None):
        """``value`` if given, else the ``Meta`` entry, else ``fallback``."""
        if value is not None:
            return value
        value = getattr(self.options, name)
        return fallback if value is None else value

    def needs_stage1(self):
        return self.use_fitted_exposures and super(IVGLSEstimator, self).needs_stage1()

    def alpha_step(self, Z, residual, alpha):
        """Return ``(lambda3, fit)``."""
        if self.fixed_lambdas is None:
            return cv_lasso(Z, residual, self.cfg, rule=self.alpha_rule)
        lambda3 = self.fixed_lambdas[2]
        return lambda3, Problem(Z, residual, self.cfg).solve(lambda3, beta_init=alpha)

    def beta_step(self, design, residual, L, beta):
        """Return ``(lambda1, lambda2, fit)``."""
        if self.fixed_lambdas is None:
            return self.second_stage(design, residual, L)
        lambda1, lambda2 = self.fixed_lambdas[0], self.fixed_lambdas[1]
        fit = Problem(design, residual, self.cfg, L=L, lambda2=lambda2).solve(
            lambda1, beta_init=beta
        )
        return lambda1, lambda2, fit

    def alternating_objective(self, ds, design, L, beta, alpha, lambdas):
        """
        Objective minimized by the alternation (at fixed penalties): the
        centered ``(2n)^-1`` least-squares loss plus the penalties, with the
        column weights of standardization.
        """
        lambda1, lambda2, lambda3 = lambdas
        residual = ds.Y - design @ beta - ds.Z @ alpha
        residual = residual - residual.mean()
        value = float(residual @ residual) / (2 * ds.n)
        weights = _penalty_weights(design, self.cfg.standardize)
        value += lambda1 * float(np.abs(weights * beta).sum())
        weights = _penalty_weights(ds.Z, self.cfg.standardize)
        value += lambda3 * float(np.abs(weights * alpha).sum())
        if L is not None:
            value += lambda2 * L.quadratic_form(beta)
        return value

    def fit(self, ds, L=None, stage1=None):
        self.check_dataset(ds, L)
        stage1 = self.first_stage(ds, stage1)
        design = self.get_design(ds, stage1)

        beta = np.zeros(ds.p)
        alpha = np.zeros(ds.q)
        lambdas = (0.0, 0.0, 0.0)
        trace = []
        converged = False
        self.states_ = []

        if self.warm_start:
            lambda1, lambda2, beta_fit = self.beta_step(design, ds.Y, L, beta)
            beta = beta_fit.beta
            lambdas = (lambda1, lambda2, 0.0)
            logger.debug("IVGL-S starts from %d nonzero exposure effects", beta_fit.support.size)

        for iteration in range(1, self.max_alt_iters + 1):
            lambda3, alpha_fit = self.alpha_step(ds.Z, ds.Y - design @ beta, alpha)
            new_alpha = alpha_fit.beta
            lambda1, lambda2, beta_fit = self.beta_step(design, ds.Y - ds.Z @ new_alpha, L, beta)
            new_beta = beta_fit.beta

            previous = np.concatenate([beta, alpha])
            current = np.concatenate([new_beta, new_alpha])
            delta = float(np.abs(current - previous).max() / max(1.0, np.abs(previous).max()))

            beta, alpha = new_beta, new_alpha
            lambdas = (lambda1, lambda2, lambda3)
            trace.append(self.alternating_objective(ds, design, L, beta, alpha, lambdas))
            converged = delta < self.alt_tol
            self.states_.append(
                AlternatingState(
                    beta=beta, alpha=alpha, iteration=iteration, delta=delta, converged=converged
                )
            )
            logger.debug(
                "IVGL-S round %d: delta=%g, |support(beta)|=%d, |support(alpha)|=%d",
                iteration,
                delta,
                np.count_nonzero(beta),
                np.count_nonzero(alpha),
            )
            if converged:
                break

        if not converged:
            logger.warning(
                "IVGL-S alternation did not converge in %d rounds (last change %g)",
                self.max_alt_iters,
                delta,
            )

        # the solvers use a (2n)^-1 loss, the reported objective a 1/2 one
        n = ds.n
        objective = objective_eq3(
            ds, L, beta, alpha, n * lambdas[0], n * lambdas[1], n * lambdas[2]
        )
        return FitResult(
            method_tag=self.options.method_tag,
            beta=beta,
            alpha=alpha,
            lambda1=lambdas[0],
            lambda2=lambdas[1],
            lambda3=lambdas[2],
            objective_trace=np.array(trace),
            objective=objective,
            converged=converged,
            iterations=len(self.states_),
            standardized=bool(self.cfg.standardize),
            stage1=stage1,
        )


def ivgls_fit(
    ds,
    L,
    cfg=None,
    max_alt_iters=None,
    alt_tol=None,
    fixed_lambdas=None,
    use_fitted_exposures=None,
):
    return IVGLSEstimator(
        cfg,
        max_alt_iters=max_alt_iters,
        alt_tol=alt_tol,
        fixed_lambdas=fixed_lambdas,
        use_fitted_exposures=use_fitted_exposures,
    ).fit(ds, L)
