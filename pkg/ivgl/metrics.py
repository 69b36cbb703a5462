# ivgl / Copyright Consortium Érudit <tech@erudit.org> / MIT License

import math

from dataclasses import dataclass

import numpy as np

from scipy import linalg

from ivgl.exceptions import DiagnosticUnavailableError, InvalidInputError


@dataclass(frozen=True)
class SelectionOutcome:
    """Confusion counts of an estimated support against the true one, over the p nodes."""

    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise InvalidInputError("Selection counts must be nonnegative: %r" % (self,))

    @property
    def p(self):
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_supports(cls, selected, truth, p):
        selected, truth = set(selected), set(truth)
        tp = len(selected & truth)
        fp = len(selected - truth)
        fn = len(truth - selected)
        return cls(tp=tp, fp=fp, fn=fn, tn=p - tp - fp - fn)

    @classmethod
    def from_coefficients(cls, beta_hat, beta0):
        beta_hat, beta0 = _same_length(beta_hat, beta0)
        return cls.from_supports(np.flatnonzero(beta_hat), np.flatnonzero(beta0), beta0.size)


def _same_length(beta_hat, beta0):
    beta_hat = np.asarray(beta_hat, dtype=float).ravel()
    beta0 = np.asarray(beta0, dtype=float).ravel()
    if beta_hat.shape != beta0.shape:
        raise InvalidInputError(
            "Coefficient vectors differ in length: %d != %d" % (beta_hat.size, beta0.size)
        )
    return beta_hat, beta0


def mse(beta_hat, beta0):
    """Squared error averaged over the coordinates."""
    beta_hat, beta0 = _same_length(beta_hat, beta0)
    return float(np.mean((beta_hat - beta0) ** 2))


def mcc(outcome):
    """Matthews correlation coefficient, 0 when any margin is empty."""
    tp, fp, tn, fn = outcome.tp, outcome.fp, outcome.tn, outcome.fn
    denominator = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denominator == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denominator)


def sign_recovery(beta_hat, beta0):
    """True when both vectors have the same sign pattern (``sign(0) = 0``)."""
    beta_hat, beta0 = _same_length(beta_hat, beta0)
    return bool(np.array_equal(np.sign(beta_hat), np.sign(beta0)))


def irrepresentability(X, L, lambda2, S0, beta0_signs):
    """
    Network-irrepresentability value

        || (C[Sc, S] + lambda2 L[Sc, S]) (C[S, S] + lambda2 L[S, S])^-1 sign(beta0[S]) ||_inf

    with ``C = X' X / n``. The condition holds when the value is below 1.
    ``beta0_signs`` holds the signs of the ``S0`` entries (same order), or a
    full length-p sign vector.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    active = np.asarray(list(S0), dtype=int).ravel()
    if active.size == 0:
        raise InvalidInputError("The active set must not be empty")
    signs = np.asarray(beta0_signs, dtype=float).ravel()
    if signs.size != p and signs.size != active.size:
        raise InvalidInputError(
            "Expected %d or %d signs, got %d" % (active.size, p, signs.size)
        )
    # signs follow S0 as given, the blocks are taken in ascending node order
    order = np.argsort(active, kind="stable")
    active = active[order]
    signs = signs[active] if signs.size == p else signs[order]
    inactive = np.setdiff1d(np.arange(p), active)

    gram = X.T @ X / n
    if L is not None and lambda2:
        gram = gram + lambda2 * L.matrix
    inner = gram[np.ix_(active, active)]
    cross = gram[np.ix_(inactive, active)]

    if inactive.size == 0:
        return 0.0
    if np.linalg.cond(inner) > 1e12:
        raise DiagnosticUnavailableError("Active block is numerically singular")
    try:
        direction = linalg.solve(inner, signs, assume_a="sym")
    except (linalg.LinAlgError, ValueError) as error:
        raise DiagnosticUnavailableError("Singular active block: %s" % error)
    return float(np.abs(cross @ direction).max())
