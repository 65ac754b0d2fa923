"""Simulation designs and evaluation metrics for method comparison.

The random-intercept design draws, for 50 clusters of 10 observations,

    y_ij = 1 + 2 x_i1 + 4 x_i2 + 3 x_ij3 + 5 x_ij4 + sum_{r>=5} 0 * x_ijr
           + gamma_0i + eps_ij

with x_i1, x_i2 cluster-constant, all covariates standard normal,
sigma = 0.4 and tau in {0.4, 0.8, 1.6}.  The random-slopes variant adds
slopes on x3 and x4 with an equicorrelated covariance (correlation 0.6).

Replicate jobs are independent; every job's random stream is derived from
(seed, design, replicate) through a counter-based generator, so results do
not depend on execution order.
"""

from __future__ import annotations

import dataclasses
import time
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .crossval import cv_select
from .engine import BoostConfig
from .errors import DataError
from .mle import ml_fit
from .model import Dataset, ParamState, make_dataset

TRUE_BETA0 = 1.0
TRUE_EFFECTS = (2.0, 4.0, 3.0, 5.0)   # beta_1..beta_4; everything else is 0
INFORMATIVE_IDX = (0, 1, 2, 3)        # 0-based columns of the informative effects
N_CLUSTER_CONSTANT = 2                # x1, x2 are drawn once per cluster

METHODS = ("boostlmm_a", "boostlmm_b", "ml_oracle", "legacy_nocorrection")


@dataclass(frozen=True)
class SimDesign:
    """One cell of the simulation grid."""

    p: int = 10
    tau: float = 0.4
    slopes: bool = False
    n_clusters: int = 50
    obs_per_cluster: int = 10
    sigma: float = 0.4
    cor_target: float = 0.6
    replicates: int = 20
    seed: int = 2024

    def __post_init__(self):
        if self.p < 4:
            raise DataError("designs need at least the four informative covariates")

    @property
    def name(self):
        return "slopes" if self.slopes else "intercept"

    def true_Q(self):
        t2 = self.tau**2
        if not self.slopes:
            return np.array([[t2]])
        off = self.cor_target * t2
        Q = np.full((3, 3), off)
        np.fill_diagonal(Q, t2)
        return Q

    def true_beta(self):
        beta = np.zeros(self.p)
        beta[list(INFORMATIVE_IDX)] = TRUE_EFFECTS
        return beta

    def _key(self):
        return (
            self.p, int(round(self.tau * 1e6)), int(self.slopes),
            self.n_clusters, self.obs_per_cluster,
            int(round(self.sigma * 1e6)), int(round(self.cor_target * 1e6)),
        )


def _job_seeds(design: SimDesign, replicate, seed=None):
    root = design.seed if seed is None else seed
    ss = np.random.SeedSequence([root, *design._key(), replicate])
    data_ss, fold_ss = ss.spawn(2)
    rng = np.random.Generator(np.random.Philox(data_ss))
    fold_seed = int(fold_ss.generate_state(1)[0])
    return rng, fold_seed


def gen_dataset(design: SimDesign, replicate, seed=None):
    """Draw one replicate; deterministic given (seed, design, replicate).

    Returns the dataset together with the generating parameter state.
    """
    rng, _ = _job_seeds(design, replicate, seed)
    n, n_i, p = design.n_clusters, design.obs_per_cluster, design.p
    N = n * n_i

    x_const = rng.standard_normal((n, N_CLUSTER_CONSTANT))
    X = np.empty((N, p))
    X[:, :N_CLUSTER_CONSTANT] = np.repeat(x_const, n_i, axis=0)
    X[:, N_CLUSTER_CONSTANT:] = rng.standard_normal((N, p - N_CLUSTER_CONSTANT))

    Q = design.true_Q()
    L = np.linalg.cholesky(Q + 1e-15 * np.eye(Q.shape[0]))
    gamma = rng.standard_normal((n, Q.shape[0])) @ L.T
    eps = design.sigma * rng.standard_normal(N)

    beta = design.true_beta()
    slope_cols = ("x3", "x4") if design.slopes else ()
    Z = np.column_stack([np.ones(N)] + [X[:, 2 + j] for j in range(len(slope_cols))])
    y = TRUE_BETA0 + X @ beta + np.einsum("nq,nq->n", Z, np.repeat(gamma, n_i, axis=0)) + eps

    cluster_ids = np.repeat(np.arange(1, n + 1), n_i)
    colnames = [f"x{r}" for r in range(1, p + 1)]
    data = make_dataset(y, cluster_ids, X, colnames, slope_cols=slope_cols)
    truth = ParamState(beta0=TRUE_BETA0, beta=beta, gamma=gamma, sigma2=design.sigma**2, Q=Q)
    return data, truth


@dataclass(frozen=True)
class SimMetrics:
    """Per-replicate evaluation of one fitted model against the truth."""

    mse_beta: float
    mse_tau: float
    mse_Q: float
    false_positive_rate: float
    m_star: float
    wall_time_seconds: float


def false_positives(beta_hat, informative_idx=INFORMATIVE_IDX):
    """Fraction of noninformative covariates carrying a nonzero estimate."""
    beta_hat = np.asarray(beta_hat)
    mask = np.ones(beta_hat.shape[0], dtype=bool)
    mask[list(informative_idx)] = False
    denom = int(mask.sum())
    return float(np.count_nonzero(beta_hat[mask])) / denom if denom else 0.0


def evaluate(state: ParamState, truth: ParamState, design: SimDesign, m_star, wall_time):
    full_true = np.concatenate(([truth.beta0], truth.beta))
    full_hat = np.concatenate(([state.beta0], state.beta))
    tau_hat = float(np.sqrt(max(state.Q[0, 0], 0.0)))
    return SimMetrics(
        mse_beta=float(np.sum((full_true - full_hat) ** 2)),
        mse_tau=(design.tau - tau_hat) ** 2,
        mse_Q=float(np.sum((truth.Q - state.Q) ** 2)),
        false_positive_rate=false_positives(state.beta),
        m_star=m_star,
        wall_time_seconds=wall_time,
    )


def _method_config(method, nu, m_stop, seed):
    if method == "boostlmm_a":
        return BoostConfig(nu=nu, m_stop=m_stop, start_mode="zero_ranef", seed=seed)
    if method == "boostlmm_b":
        return BoostConfig(nu=nu, m_stop=m_stop, start_mode="ml_intercept_ranef", seed=seed)
    if method == "legacy_nocorrection":
        return BoostConfig.legacy(nu=nu, m_stop=m_stop, seed=seed)
    raise DataError(f"unknown method {method!r}")


def run_replicate(design: SimDesign, method, replicate, seed=None, nu=0.1, m_stop=500, k=5):
    """Fit one method on one replicate and score it."""
    data, truth = gen_dataset(design, replicate, seed)
    _, fold_seed = _job_seeds(design, replicate, seed)
    t0 = time.perf_counter()
    if method == "ml_oracle":
        if design.p >= data.n_obs:
            raise DataError("dense ML fit skipped: p >= N")
        state = ml_fit(data)
        m_star = np.nan
    else:
        config = _method_config(method, nu, m_stop, fold_seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            curve, state = cv_select(data, config, k=k, seed=fold_seed)
        m_star = curve.m_star
    elapsed = time.perf_counter() - t0
    metrics = evaluate(state, truth, design, m_star, elapsed)
    if method == "ml_oracle":
        # the dense fit never produces exact zeros; selection rates are
        # meaningless for it
        metrics = dataclasses.replace(metrics, false_positive_rate=np.nan)
    return metrics


def run_study(designs, methods=METHODS, replicates=None, seed=None,
              nu=0.1, m_stop=500, k=5, n_jobs=1, progress=False):
    """Mean metrics per (design, method) cell, as the exportable table.

    Per-replicate failures are recorded, not fatal; the dense ML baseline is
    skipped when p >= N (high-dimensional cells).
    """
    designs = [designs] if isinstance(designs, SimDesign) else list(designs)
    if isinstance(methods, str):
        methods = [methods]

    jobs = []
    for design in designs:
        reps = design.replicates if replicates is None else replicates
        for method in methods:
            if method == "ml_oracle" and design.p >= design.n_clusters * design.obs_per_cluster:
                continue
            for rep in range(reps):
                jobs.append((design, method, rep))

    def _run(job):
        design, method, rep = job
        try:
            return job, run_replicate(design, method, rep, seed=seed, nu=nu, m_stop=m_stop, k=k), None
        except Exception as exc:  # recorded per-cell, never fatal
            return job, None, f"{type(exc).__name__}: {exc}"

    if n_jobs == 1:
        outcomes = []
        for i, job in enumerate(jobs):
            outcomes.append(_run(job))
            if progress:
                design, method, rep = job
                print(f"[{i + 1}/{len(jobs)}] {design.name} tau={design.tau} "
                      f"p={design.p} {method} rep={rep}", flush=True)
    else:
        from joblib import Parallel, delayed

        outcomes = Parallel(n_jobs=n_jobs)(delayed(_run)(job) for job in jobs)

    cells = {}
    for (design, method, _rep), metrics, failure in outcomes:
        cell = cells.setdefault((design, method), {"design": design, "method": method,
                                                       "metrics": [], "failures": 0})
        if failure is None:
            cell["metrics"].append(metrics)
        else:
            cell["failures"] += 1

    rows = []
    for cell in cells.values():
        design, ms = cell["design"], cell["metrics"]

        def mean(attr):
            vals = [getattr(m, attr) for m in ms]
            if not vals or np.isnan(vals).all():
                return np.nan
            return float(np.nanmean(vals))

        rows.append({
            "design": design.name,
            "tau": design.tau,
            "p": design.p,
            "method": cell["method"],
            "mse_beta": mean("mse_beta"),
            "mse_tau": mean("mse_tau"),
            "mse_Q": mean("mse_Q"),
            "fp_rate": mean("false_positive_rate"),
            "m_star": mean("m_star"),
            "time_s": mean("wall_time_seconds"),
            "failures": cell["failures"],
        })
    return pd.DataFrame(rows)
