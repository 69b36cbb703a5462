# ivgl / Copyright Consortium Érudit <tech@erudit.org> / MIT License

"""
Two-stage estimation: per-exposure LASSO of the exposures on the
instruments, then graph-constrained LASSO of the outcome on the fitted
exposures. Also the GL and IVL baselines and SIS screening.
"""

import logging

from dataclasses import dataclass, field

import numpy as np

from joblib import Parallel, delayed

from ivgl.exceptions import InvalidInputError
from ivgl.solver import SolverConfig, as_matrix, as_vector, cv_graph_lasso, cv_lasso


logger = logging.getLogger("ivgl.two_stage")

GL = "GL"
IVL = "IVL"
IVGL = "IVGL"
IVGLS = "IVGL-S"
METHOD_TAGS = (GL, IVL, IVGL, IVGLS)

# Version of the json document returned by ``FitResult.as_dict``
FIT_SCHEMA = 2


@dataclass(frozen=True)
class Dataset:
    """Outcome ``Y`` (n), exposures ``X`` (n x p), instruments ``Z`` (n x q, optional)."""

    Y: np.ndarray
    X: np.ndarray
    Z: np.ndarray = None
    node_names: tuple = None
    instrument_names: tuple = None

    def __post_init__(self):
        Y = as_vector(self.Y, "Y")
        X = as_matrix(self.X, "X")
        if X.shape[0] != Y.shape[0]:
            raise InvalidInputError("X has %d rows but Y has %d" % (X.shape[0], Y.shape[0]))
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", X)
        if self.Z is not None:
            Z = as_matrix(self.Z, "Z")
            if Z.shape[0] != Y.shape[0]:
                raise InvalidInputError("Z has %d rows but Y has %d" % (Z.shape[0], Y.shape[0]))
            object.__setattr__(self, "Z", Z)
        if self.node_names is not None:
            if len(self.node_names) != X.shape[1]:
                raise InvalidInputError("Expected %d node names" % X.shape[1])
            object.__setattr__(self, "node_names", tuple(self.node_names))
        if self.instrument_names is not None:
            if self.Z is None or len(self.instrument_names) != self.Z.shape[1]:
                raise InvalidInputError("Instrument names do not match the columns of Z")
            object.__setattr__(self, "instrument_names", tuple(self.instrument_names))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def q(self):
        return 0 if self.Z is None else self.Z.shape[1]

    def get_node_names(self):
        return self.node_names or tuple("x%d" % (j + 1) for j in range(self.p))

    def get_instrument_names(self):
        return self.instrument_names or tuple("z%d" % (l + 1) for l in range(self.q))

    def require_instruments(self):
        if self.Z is None or self.q == 0:
            raise InvalidInputError("This method needs an instrument matrix Z")


@dataclass(frozen=True)
class Stage1Fit:
    """First-stage coefficients ``A_hat`` (q x p) and fitted exposures ``X_hat = Z A_hat``."""

    A_hat: np.ndarray
    X_hat: np.ndarray
    per_column_lambda: np.ndarray


@dataclass(frozen=True)
class FitResult:
    method_tag: str
    beta: np.ndarray
    lambda1: float
    lambda2: float
    lambda3: float = None
    alpha: np.ndarray = None
    objective_trace: np.ndarray = field(default_factory=lambda: np.empty(0))
    objective: float = None
    converged: bool = True
    iterations: int = None
    standardized: bool = False
    stage1: Stage1Fit = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.method_tag not in METHOD_TAGS:
            raise InvalidInputError("Unknown method tag %r" % self.method_tag)

    @property
    def support(self):
        return np.flatnonzero(self.beta)

    @property
    def invalid_instruments(self):
        if self.alpha is None:
            return np.empty(0, dtype=int)
        return np.flatnonzero(self.alpha)

    def as_dict(self, node_names=None, instrument_names=None, seed=None):
        """
        JSON-ready document. Coefficients are keyed by name; ``support`` and
        ``invalid_instruments`` hold 1-based indices. ``objective`` is on the
        scale of the given data; ``standardized`` tells if the penalties were
        weighted by the column standard deviations while minimizing.
        """
        if node_names is None:
            node_names = ["x%d" % (j + 1) for j in range(self.beta.size)]
        result = {
            "schema": FIT_SCHEMA,
            "method": self.method_tag,
            "beta": {name: float(value) for name, value in zip(node_names, self.beta)},
            "alpha": None,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "lambda3": self.lambda3,
            "support": [int(j) + 1 for j in self.support],
            "invalid_instruments": [int(l) + 1 for l in self.invalid_instruments],
            "objective": self.objective,
            "converged": bool(self.converged),
            "standardized": bool(self.standardized),
            "seed": seed,
        }
        if self.alpha is not None:
            if instrument_names is None:
                instrument_names = ["z%d" % (l + 1) for l in range(self.alpha.size)]
            result["alpha"] = {
                name: float(value) for name, value in zip(instrument_names, self.alpha)
            }
        return result


def stage1_fit(Z, X, cfg=None):
    """
    Regress each exposure column on the instruments with a cross-validated
    LASSO. Columns are independent fits (run in parallel with ``n_jobs``).
    """
    cfg = cfg or SolverConfig()
    Z = as_matrix(Z, "Z")
    X = as_matrix(X, "X")
    if Z.shape[0] != X.shape[0]:
        raise InvalidInputError("Z has %d rows but X has %d" % (Z.shape[0], X.shape[0]))
    if Z.shape[0] < cfg.cv_folds:
        raise InvalidInputError(
            "The first stage needs at least %d rows, got %d" % (cfg.cv_folds, Z.shape[0])
        )

    fits = Parallel(n_jobs=cfg.n_jobs)(
        delayed(cv_lasso)(Z, X[:, j], cfg) for j in range(X.shape[1])
    )

    A_hat = np.zeros((Z.shape[1], 0))
    if fits:
        A_hat = np.column_stack([fit.beta for _lambda, fit in fits])
    per_column_lambda = np.array([lambda_ for lambda_, _fit in fits])
    return Stage1Fit(A_hat=A_hat, X_hat=Z @ A_hat, per_column_lambda=per_column_lambda)


def normalize_columns(X):
    """Scale each nonzero column to Euclidean norm ``sqrt(n)``."""
    norms = np.linalg.norm(X, axis=0)
    factors = np.where(norms > 0, np.sqrt(X.shape[0]) / np.where(norms > 0, norms, 1.0), 1.0)
    return X * factors


class EstimatorMetaClass(type):
    """Save the ``Meta`` entries of each estimator class in its ``options`` field."""

    def __new__(mcs, name, bases, attrs):
        klass = super(EstimatorMetaClass, mcs).__new__(mcs, name, bases, attrs)
        klass.options = klass._meta = klass.Meta()
        return klass


class Estimator(object, metaclass=EstimatorMetaClass):
    """
    Base of the estimators. A fit runs, in order:

        * ``check_dataset``
        * ``first_stage`` (None for non-instrumented methods, or the given
          ``stage1`` when the caller shares one between estimators)
        * ``get_design``: the matrix regressed on in the second stage
        * ``second_stage``: cross-validated graph-constrained LASSO
        * ``make_result``

    To change a behaviour, inherit, update ``Meta`` or one of these methods,
    and register the new class under its own name:

        class MyIVGL(IVGLEstimator):
            class Meta(IVGLEstimator.Meta):
                normalize_fitted = True

        MyIVGL.register("my-ivgl")
    """

    # internal use only: registered estimators by name
    _registry = {}

    options = None

    class Meta:
        # Tag of the method in the results
        method_tag = None

        # If the exposures are first regressed on the instruments
        instrumented = True

        # If the graph penalty is used (if not, lambda2 is fixed to 0)
        graph_penalty = True

        # If the fitted exposures are rescaled to norm sqrt(n) before the second stage
        normalize_fitted = False

    def __init__(self, cfg=None):
        self.cfg = cfg or SolverConfig()

    def check_dataset(self, ds, L):
        if self.options.instrumented:
            ds.require_instruments()
        if self.options.graph_penalty and L is None:
            raise InvalidInputError("%s needs a Laplacian" % self.options.method_tag)
        if L is not None and L.p != ds.p:
            raise InvalidInputError("Laplacian has %d nodes but X has %d columns" % (L.p, ds.p))

    def needs_stage1(self):
        """If the second stage regresses on first-stage fitted exposures."""
        return self.options.instrumented

    def first_stage(self, ds, stage1=None):
        """
        First-stage fit of ``ds``, or None when not needed. A ``stage1``
        already fitted on ``ds`` (with the same solver options) is reused.
        """
        if not self.needs_stage1():
            return None
        if stage1 is None:
            return stage1_fit(ds.Z, ds.X, self.cfg)
        if stage1.A_hat.shape != (ds.q, ds.p):
            raise InvalidInputError(
                "First-stage coefficients are %d x %d, expected %d x %d"
                % (stage1.A_hat.shape + (ds.q, ds.p))
            )
        return stage1

    def get_design(self, ds, stage1):
        if stage1 is None:
            return ds.X
        if self.options.normalize_fitted:
            return normalize_columns(stage1.X_hat)
        return stage1.X_hat

    def get_lambda2_grid(self):
        if not self.options.graph_penalty:
            return (0.0,)
        return self.cfg.lambda2_grid

    def second_stage(self, design, y, L):
        return cv_graph_lasso(design, y, L, lambda2_grid=self.get_lambda2_grid(), cfg=self.cfg)

    def make_result(self, lambda1, lambda2, fit, stage1):
        return FitResult(
            method_tag=self.options.method_tag,
            beta=fit.beta,
            lambda1=lambda1,
            lambda2=lambda2,
            objective_trace=fit.objective_trace,
            objective=fit.objective,
            converged=fit.converged,
            standardized=fit.standardized,
            stage1=stage1,
        )

    def fit(self, ds, L=None, stage1=None):
        self.check_dataset(ds, L)
        stage1 = self.first_stage(ds, stage1)
        design = self.get_design(ds, stage1)
        lambda1, lambda2, fit = self.second_stage(design, ds.Y, L)
        logger.debug(
            "%s fit: lambda1=%g, lambda2=%g, support size %d",
            self.options.method_tag,
            lambda1,
            lambda2,
            fit.support.size,
        )
        return self.make_result(lambda1, lambda2, fit, stage1)

    @classmethod
    def register(cls, name):
        """Make the class available under ``name`` (used by the CLI and simulations)."""
        if name in Estimator._registry:
            raise RuntimeError("An estimator is already registered as %r" % name)
        Estimator._registry[name] = cls
        return cls

    @staticmethod
    def get(name):
        try:
            return Estimator._registry[name]
        except KeyError:
            known = ", ".join(sorted(Estimator._registry))
            raise InvalidInputError("Unknown method %r, expected one of %s" % (name, known))

    @staticmethod
    def registered():
        return dict(Estimator._registry)


class GLEstimator(Estimator):
    """Graph-constrained LASSO on the raw exposures: associative, not causal."""

    class Meta(Estimator.Meta):
        method_tag = GL
        instrumented = False


class IVLEstimator(Estimator):
    """Two-stage estimator without the graph penalty."""

    class Meta(Estimator.Meta):
        method_tag = IVL
        graph_penalty = False


class IVGLEstimator(Estimator):
    """Two-stage estimator with the graph-constrained second stage."""

    class Meta(Estimator.Meta):
        method_tag = IVGL


def ivgl_fit(ds, L, cfg=None):
    return IVGLEstimator(cfg).fit(ds, L)


def ivl_fit(ds, cfg=None):
    return IVLEstimator(cfg).fit(ds)


def gl_fit(ds, L, cfg=None):
    return GLEstimator(cfg).fit(ds, L)


def _abs_correlations(Z, target):
    """Absolute Pearson correlation of each column of ``Z`` with ``target`` (0 if constant)."""
    Zc = Z - Z.mean(axis=0)
    tc = target - target.mean()
    denominator = np.linalg.norm(Zc, axis=0) * np.linalg.norm(tc)
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.abs(Zc.T @ tc) / denominator
    return np.where(denominator > 0, scores, 0.0)


def sis_scores(Z, X, aggregate="mean"):
    """
    Screening score of each instrument:

        * ``mean``: |corr(Z_l, per-row mean of the exposures)|
        * ``max``: max over exposures j of |corr(Z_l, X_j)|
    """
    Z = as_matrix(Z, "Z")
    X = as_matrix(X, "X")
    if Z.shape[0] != X.shape[0]:
        raise InvalidInputError("Z has %d rows but X has %d" % (Z.shape[0], X.shape[0]))

    if aggregate == "mean":
        scores = _abs_correlations(Z, X.mean(axis=1))
    elif aggregate == "max":
        scores = np.max([_abs_correlations(Z, column) for column in X.T], axis=0)
    else:
        raise InvalidInputError("Unknown aggregation %r, expected 'mean' or 'max'" % aggregate)

    constant = np.flatnonzero(Z.std(axis=0) == 0)
    if constant.size:
        logger.warning("%d instrument(s) have zero variance and get a score of 0", constant.size)
    return scores


def sis_screen(Z, X, k, aggregate="mean"):
    """
    Indices of the ``k`` instruments with the largest screening scores, by
    decreasing score (ties by ascending index).
    """
    scores = sis_scores(Z, X, aggregate=aggregate)
    if not 1 <= k <= scores.size:
        raise InvalidInputError("k must be in [1, %d], got %r" % (scores.size, k))
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:k]
