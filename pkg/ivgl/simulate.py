# ivgl / Copyright Consortium Érudit <tech@erudit.org> / MIT License

"""
Simulated data for the two benchmark setups, and the replication driver.

* Setup 1: all instruments valid, ring graph, normalized Laplacian.
* Setup 2: the first ``n_invalid`` instruments have a direct effect on the
  outcome, distance graph over random 3D coordinates, unnormalized Laplacian.

Replicate ``r`` (1-based) uses seed ``base_seed + r``; every draw comes from
a Philox generator keyed by that seed, so a replicate is reproduced
identically whether the sweep runs serially or in parallel.
"""

import dataclasses
import logging
import math

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import pandas as pd

from joblib import Parallel, delayed

from ivgl.conf import is_debug_activated
from ivgl.estimators import get_estimator
from ivgl.exceptions import DiagnosticUnavailableError, InvalidInputError
from ivgl.graph import NORMALIZED, UNNORMALIZED, build_distance_graph, build_ring, laplacian
from ivgl.graph import contiguous_cluster
from ivgl.metrics import SelectionOutcome, irrepresentability, mcc, mse, sign_recovery
from ivgl.solver import SolverConfig
from ivgl.two_stage import Dataset, stage1_fit


logger = logging.getLogger("ivgl.simulate")

SETUPS = {"one": 1, "two": 2, 1: 1, 2: 2}

# Stream used to draw the coordinates shared by all replicates with ``fixed_graph``
GRAPH_STREAM = 7919

SUMMARY_COLUMNS = [
    "setup",
    "si",
    "s0",
    "method",
    "mean_mse",
    "se_mse",
    "median_mcc",
    "mcc_q1",
    "mcc_q3",
    "n_ok",
]

REPLICATE_COLUMNS = [
    "setup",
    "si",
    "s0",
    "seed",
    "replicate",
    "method",
    "mse",
    "mcc",
    "sign_recovery",
    "support_size",
    "tp",
    "fp",
    "irrepresentability",
    "lambda1",
    "lambda2",
    "lambda3",
    "converged",
    "invalid_recovered",
    "max_alpha_error",
    "ok",
    "error",
]


@dataclass(frozen=True)
class SimConfig:
    n: int = 100
    p: int = 70
    q: int = 500
    s0: int = 4
    si: float = 1
    setup: int = 1
    n_invalid: int = 10
    alpha_invalid_value: float = 5.0
    first_stage_density: float = 0.10
    gamma_range: tuple = (0.2, 0.7)
    beta_range: tuple = (0.5, 1.0)
    distance_threshold: float = 30.0
    coord_range: float = 100.0
    fixed_graph: bool = False
    n_replicates: int = 100
    base_seed: int = 0

    def __post_init__(self):
        if self.setup not in SETUPS:
            raise InvalidInputError("Unknown setup %r, expected 1 or 2" % (self.setup,))
        object.__setattr__(self, "setup", SETUPS[self.setup])
        object.__setattr__(self, "gamma_range", tuple(self.gamma_range))
        object.__setattr__(self, "beta_range", tuple(self.beta_range))
        if min(self.n, self.p, self.q) < 1:
            raise InvalidInputError("n, p and q must be positive")
        if not 1 <= self.s0 <= self.p:
            raise InvalidInputError("s0 must be in [1, p=%d], got %r" % (self.p, self.s0))
        if self.setup == 2 and not 0 <= self.n_invalid <= self.q:
            raise InvalidInputError("n_invalid must be in [0, q=%d]" % self.q)
        if not 0 < self.first_stage_density <= 1:
            raise InvalidInputError("first_stage_density must be in (0, 1]")
        if self.setup == 1 and self.p < 3:
            raise InvalidInputError("Setup 1 uses a ring graph and needs p >= 3")
        if self.n_replicates < 1:
            raise InvalidInputError("n_replicates must be at least 1")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def as_dict(self):
        result = dataclasses.asdict(self)
        result["gamma_range"] = list(self.gamma_range)
        result["beta_range"] = list(self.beta_range)
        return result

    @property
    def laplacian_kind(self):
        return NORMALIZED if self.setup == 1 else UNNORMALIZED

    def replicate_seeds(self):
        return [self.base_seed + r for r in range(1, self.n_replicates + 1)]


@dataclass(frozen=True)
class SimTruth:
    beta0: np.ndarray
    alpha0: np.ndarray
    A0: np.ndarray
    S0: tuple
    gamma_x: np.ndarray
    gamma_y: float
    U: np.ndarray
    graph: object
    epsilon: np.ndarray = field(repr=False)
    coords: np.ndarray = None

    def outcome(self, X, Z):
        """``Y = X beta0 + Z alpha0 + gamma_y U + epsilon``."""
        return X @ self.beta0 + Z @ self.alpha0 + self.gamma_y * self.U + self.epsilon


@dataclass(frozen=True)
class SimData:
    dataset: Dataset
    truth: SimTruth
    seed: int
    laplacian_kind: str = NORMALIZED

    @cached_property
    def laplacian(self):
        return laplacian(self.truth.graph, self.laplacian_kind)


def make_rng(*key):
    """Philox generator keyed by ``key`` (a seed, or a seed and a stream number)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def _signed_uniform(rng, bounds, size):
    magnitudes = rng.uniform(bounds[0], bounds[1], size)
    return magnitudes * rng.choice(np.array([-1.0, 1.0]), size)


def _first_stage_matrix(rng, q, p, density):
    """``q x p`` matrix with ``ceil(density q)`` standard normal entries per column."""
    per_column = math.ceil(round(density * q, 9))
    A0 = np.zeros((q, p))
    for j in range(p):
        rows = rng.choice(q, size=per_column, replace=False)
        A0[rows, j] = rng.standard_normal(per_column)
    return A0


def _effects(rng, cfg, S0):
    beta0 = np.zeros(cfg.p)
    beta0[list(S0)] = _signed_uniform(rng, cfg.beta_range, len(S0)) * cfg.si
    return beta0


def _instruments_and_exposure_model(rng, cfg):
    Z = rng.standard_normal((cfg.n, cfg.q))
    A0 = _first_stage_matrix(rng, cfg.q, cfg.p, cfg.first_stage_density)
    U = rng.standard_normal(cfg.n)
    gamma_x = _signed_uniform(rng, cfg.gamma_range, cfg.p)
    return Z, A0, U, gamma_x


def _assemble(rng, cfg, seed, Z, A0, U, gamma_x, S0, alpha0, graph, coords):
    beta0 = _effects(rng, cfg, S0)
    gamma_y = float(_signed_uniform(rng, cfg.gamma_range, 1)[0])
    noise_x = rng.standard_normal((cfg.n, cfg.p))
    epsilon = rng.standard_normal(cfg.n)

    X = Z @ A0 + np.outer(U, gamma_x) + noise_x
    truth = SimTruth(
        beta0=beta0,
        alpha0=alpha0,
        A0=A0,
        S0=tuple(sorted(int(j) for j in S0)),
        gamma_x=gamma_x,
        gamma_y=gamma_y,
        U=U,
        graph=graph,
        epsilon=epsilon,
        coords=coords,
    )
    return SimData(
        dataset=Dataset(Y=truth.outcome(X, Z), X=X, Z=Z),
        truth=truth,
        seed=seed,
        laplacian_kind=cfg.laplacian_kind,
    )


def gen_setup1(cfg, seed):
    """All instruments valid; the ``s0`` first nodes of a ring are active."""
    if cfg.setup != 1:
        raise InvalidInputError("gen_setup1 needs a setup 1 config")
    rng = make_rng(seed)
    Z, A0, U, gamma_x = _instruments_and_exposure_model(rng, cfg)
    graph = build_ring(cfg.p)
    S0 = tuple(range(cfg.s0))
    return _assemble(rng, cfg, seed, Z, A0, U, gamma_x, S0, np.zeros(cfg.q), graph, None)


def draw_coords(cfg, rng):
    return rng.uniform(0.0, cfg.coord_range, (cfg.p, 3))


def gen_setup2(cfg, seed):
    """
    The first ``n_invalid`` instruments act directly on the outcome; the active
    nodes form a contiguous cluster of a distance graph.
    """
    if cfg.setup != 2:
        raise InvalidInputError("gen_setup2 needs a setup 2 config")
    rng = make_rng(seed)
    Z, A0, U, gamma_x = _instruments_and_exposure_model(rng, cfg)
    if cfg.fixed_graph:
        coords = draw_coords(cfg, make_rng(cfg.base_seed, GRAPH_STREAM))
    else:
        coords = draw_coords(cfg, rng)
    graph = build_distance_graph(coords, cfg.distance_threshold)
    S0 = contiguous_cluster(graph, None, cfg.s0, rng)
    alpha0 = np.zeros(cfg.q)
    alpha0[: cfg.n_invalid] = cfg.alpha_invalid_value
    return _assemble(rng, cfg, seed, Z, A0, U, gamma_x, S0, alpha0, graph, coords)


def generate(cfg, seed):
    return gen_setup1(cfg, seed) if cfg.setup == 1 else gen_setup2(cfg, seed)


def _irrepresentability(sim, design, L, lambda2):
    try:
        return irrepresentability(
            design, L, lambda2, sim.truth.S0, np.sign(sim.truth.beta0[list(sim.truth.S0)])
        )
    except DiagnosticUnavailableError:
        return float("nan")


def evaluate(sim, result, cfg):
    """Metrics of one fit against the truth of its replicate."""
    truth = sim.truth
    outcome = SelectionOutcome.from_coefficients(result.beta, truth.beta0)
    design = sim.dataset.X if result.stage1 is None else result.stage1.X_hat
    record = {
        "mse": mse(result.beta, truth.beta0),
        "mcc": mcc(outcome),
        "sign_recovery": sign_recovery(result.beta, truth.beta0),
        "support_size": int(result.support.size),
        "tp": outcome.tp,
        "fp": outcome.fp,
        "irrepresentability": _irrepresentability(sim, design, sim.laplacian, result.lambda2),
        "lambda1": result.lambda1,
        "lambda2": result.lambda2,
        "lambda3": result.lambda3,
        "converged": bool(result.converged),
        "invalid_recovered": None,
        "max_alpha_error": None,
    }
    if result.alpha is not None and cfg.setup == 2 and cfg.n_invalid:
        invalid = np.arange(cfg.n_invalid)
        record["invalid_recovered"] = bool(np.all(result.alpha[invalid] != 0))
        record["max_alpha_error"] = float(
            np.abs(result.alpha[invalid] - truth.alpha0[invalid]).max()
        )
    return record


def run_replicate(cfg, seed, methods, solver_cfg=None):
    """
    Generate the replicate of ``seed`` and fit each of ``methods`` (registered
    estimator names). Failures are recorded in the rows, not raised (unless
    ``IVGL_DEBUG`` is on).
    """
    solver_cfg = solver_cfg or SolverConfig()
    base = {"setup": cfg.setup, "si": cfg.si, "s0": cfg.s0, "seed": seed}
    try:
        sim = generate(cfg, seed)
    except Exception as error:
        if is_debug_activated():
            raise
        logger.exception("Error when generating the replicate of seed %d", seed)
        return [dict(base, method=_tag(name), ok=False, error=str(error)) for name in methods]

    rows = []
    # one first stage for all the instrumented methods of the replicate
    stage1 = None
    for name in methods:
        estimator_class = get_estimator(name)
        row = dict(base, method=estimator_class.options.method_tag)
        try:
            estimator = estimator_class(solver_cfg)
            if stage1 is None and estimator.needs_stage1():
                stage1 = stage1_fit(sim.dataset.Z, sim.dataset.X, solver_cfg)
            result = estimator.fit(sim.dataset, sim.laplacian, stage1=stage1)
            row.update(evaluate(sim, result, cfg))
            row.update(ok=True, error="")
        except Exception as error:
            if is_debug_activated():
                raise
            logger.exception("Error when fitting %s on the replicate of seed %d", name, seed)
            row.update(ok=False, error=str(error))
        rows.append(row)
    return rows


def _tag(name):
    return get_estimator(name).options.method_tag


@dataclass
class SummaryTable:
    """Per-replicate rows, and their per-configuration summary."""

    replicates: pd.DataFrame

    @cached_property
    def summary(self):
        return summarize(self.replicates)

    def mcc_long(self):
        ok = self.replicates[self.replicates["ok"]]
        return ok[["setup", "si", "s0", "method", "replicate", "mcc"]].reset_index(drop=True)

    def to_csv(self, directory):
        self.summary.to_csv(directory / "summary.csv", index=False)
        self.replicates.to_csv(directory / "replicates.csv", index=False)
        self.mcc_long().to_csv(directory / "mcc_long.csv", index=False)

    @classmethod
    def concat(cls, tables):
        return cls(pd.concat([table.replicates for table in tables], ignore_index=True))


def summarize(replicates):
    """Mean and standard error of the MSE, quartiles of the MCC, per configuration and method."""
    rows = []
    keys = ["setup", "si", "s0", "method"]
    for key, group in replicates.groupby(keys, sort=False):
        ok = group[group["ok"]]
        n_ok = len(ok)
        mses = ok["mse"].astype(float) if n_ok else pd.Series(dtype=float)
        mccs = ok["mcc"].astype(float) if n_ok else pd.Series(dtype=float)
        rows.append(
            dict(
                zip(keys, key),
                mean_mse=mses.mean() if n_ok else float("nan"),
                se_mse=mses.std(ddof=1) / math.sqrt(n_ok) if n_ok > 1 else float("nan"),
                median_mcc=mccs.median() if n_ok else float("nan"),
                mcc_q1=mccs.quantile(0.25) if n_ok else float("nan"),
                mcc_q3=mccs.quantile(0.75) if n_ok else float("nan"),
                n_ok=n_ok,
            )
        )
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def run_replications(cfg, methods, solver_cfg=None, n_jobs=1, cache=None):
    """
    Run ``cfg.n_replicates`` replicates of one configuration and fit each of
    ``methods`` on each. Replicates run in parallel with ``n_jobs``; the rows
    are merged in replicate order. With a ``cache`` (a ``ReplicateCache``
    subclass), already computed replicates are reused.
    """
    methods = list(methods)
    if not methods:
        raise InvalidInputError("At least one method is needed")
    for name in methods:
        get_estimator(name)
    solver_cfg = solver_cfg or SolverConfig()
    seeds = cfg.replicate_seeds()

    caches = {}
    records = {}
    if cache is not None:
        for seed in seeds:
            caches[seed] = cache(cfg, seed, methods, solver_cfg)
            cached = caches[seed].get()
            if cached is not None:
                records[seed] = cached

    missing = [seed for seed in seeds if seed not in records]
    logger.info(
        "Setup %d, si=%s, s0=%d: %d replicate(s) to run, %d cached",
        cfg.setup,
        cfg.si,
        cfg.s0,
        len(missing),
        len(seeds) - len(missing),
    )
    computed = Parallel(n_jobs=n_jobs)(
        delayed(run_replicate)(cfg, seed, methods, solver_cfg) for seed in missing
    )
    for seed, rows in zip(missing, computed):
        records[seed] = rows
        if seed in caches and all(row["ok"] for row in rows):
            caches[seed].save(rows)

    table = []
    for replicate, seed in enumerate(seeds, start=1):
        for row in records[seed]:
            table.append(dict(row, replicate=replicate))
    return SummaryTable(pd.DataFrame(table, columns=REPLICATE_COLUMNS))


def run_grid(cfg, si_values, s0_values, methods, solver_cfg=None, n_jobs=1, cache=None):
    """``run_replications`` for each ``(si, s0)`` pair, in one table."""
    tables = [
        run_replications(
            cfg.replace(si=si, s0=s0), methods, solver_cfg=solver_cfg, n_jobs=n_jobs, cache=cache
        )
        for si in si_values
        for s0 in s0_values
    ]
    return SummaryTable.concat(tables)


__all__ = [
    "SimConfig",
    "SimData",
    "SimTruth",
    "SummaryTable",
    "evaluate",
    "gen_setup1",
    "gen_setup2",
    "generate",
    "make_rng",
    "run_grid",
    "run_replicate",
    "run_replications",
    "summarize",
]
