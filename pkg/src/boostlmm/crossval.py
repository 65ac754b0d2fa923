"""Cluster-wise k-fold cross-validation and stopping-iteration selection.

Clusters are partitioned into k fairly equal folds.  Each fold is scored by
the marginal quadratic form

    (1/N_l) r' (I + Z_l Q* Z_l')^{-1} r,   Q* = Q_hat / sigma2_hat,

with r the fixed-part prediction residual of the held-out observations, and
the curve is the fold average per iteration.  The model returned for the
chosen iteration m* is a full-data refit truncated at m*, not an average of
fold models.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .engine import BoostConfig, BoostTrace, boost_fit
from .errors import DataError, SingularMatrixError
from .model import Dataset, ParamState, subset_clusters


@dataclass(frozen=True)
class FoldPlan:
    """Cluster-to-fold assignment; fold sizes differ by at most one."""

    k: int
    assignment: np.ndarray  # (n,) fold label per cluster position


@dataclass(frozen=True)
class CvCurve:
    """Cross-validation values per iteration and the argmin iteration.

    ``values[j]`` scores iteration m = j+1; ties break toward smaller m.
    """

    values: np.ndarray
    m_star: int


def partition_clusters(n, k, seed) -> FoldPlan:
    """Seeded uniform shuffle of the clusters, then round-robin assignment."""
    if k > n:
        raise DataError(f"cannot split {n} clusters into {k} folds")
    if k < 2:
        raise DataError(f"fold count must be at least 2, got {k}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    assignment = np.empty(n, dtype=int)
    assignment[perm] = np.arange(n) % k
    return FoldPlan(k=k, assignment=assignment)


def cv_criterion(heldout: Dataset, beta_hat, Q_hat, sigma2_hat):
    """Per-fold quadratic form for estimates fitted on the fold's complement.

    ``beta_hat`` has the intercept first (length p+1), matching rows of a
    boosting trace's coefficient path.
    """
    beta_hat = np.asarray(beta_hat, dtype=float)
    Qstar = np.atleast_2d(np.asarray(Q_hat, dtype=float)) / float(sigma2_hat)
    r = heldout.y - beta_hat[0] - heldout.X @ beta_hat[1:]
    total = 0.0
    for s, e in heldout.cluster_slices():
        Zi = heldout.Z[s:e]
        B = np.eye(e - s) + Zi @ Qstar @ Zi.T
        try:
            total += r[s:e] @ np.linalg.solve(B, r[s:e])
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError("singular held-out weight matrix") from exc
    return float(total) / heldout.n_obs


class _HeldoutWorkspace:
    """Held-out clusters stacked by common size for batched evaluation."""

    def __init__(self, heldout: Dataset):
        self.N = heldout.n_obs
        self.groups = []
        sizes = heldout.cluster_sizes
        Xf = np.column_stack([np.ones(heldout.n_obs), heldout.X])
        for size in np.unique(sizes):
            idx = np.flatnonzero(sizes == size)
            rows = np.concatenate(
                [np.arange(heldout.cluster_starts[i], heldout.cluster_starts[i] + size) for i in idx]
            )
            g = idx.shape[0]
            self.groups.append((
                heldout.y[rows].reshape(g, size),
                Xf[rows].reshape(g, size, -1),
                heldout.Z[rows].reshape(g, size, -1),
                np.eye(int(size)),
            ))

    def value(self, beta_full, Qstar):
        total = 0.0
        for Y, Xf, Z, eye in self.groups:
            r = Y - Xf @ beta_full
            B = eye + np.einsum("gsq,qr,gtr->gst", Z, Qstar, Z)
            total += float(np.einsum("gs,gs->", r, np.linalg.solve(B, r[..., None])[..., 0]))
        return total / self.N


def _fold_values(trace: BoostTrace, heldout: Dataset):
    """CV values of one fold for every iteration m = 1..m_stop."""
    ws = _HeldoutWorkspace(heldout)
    m_stop = trace.m_stop
    vals = np.empty(m_stop)
    for m in range(1, m_stop + 1):
        Qstar = trace.Q_path[m] / trace.sigma2_path[m]
        vals[m - 1] = ws.value(trace.beta_path[m], Qstar)
    return vals


def _fit_fold(data, config, plan, fold):
    train_idx = np.flatnonzero(plan.assignment != fold)
    test_idx = np.flatnonzero(plan.assignment == fold)
    train = subset_clusters(data, train_idx)
    held = subset_clusters(data, test_idx)
    assert not set(train.cluster_labels.tolist()) & set(held.cluster_labels.tolist())
    trace = boost_fit(train, config)
    return _fold_values(trace, held)


def cv_curve(data: Dataset, config: BoostConfig, k, seed, n_jobs=1) -> CvCurve:
    """Fold-averaged cross-validation curve over the boosting path."""
    if config.m_stop < 1:
        raise DataError("cross-validation needs m_stop >= 1")
    plan = partition_clusters(data.n_clusters, k, seed)
    if n_jobs == 1:
        per_fold = [_fit_fold(data, config, plan, fold) for fold in range(k)]
    else:
        from joblib import Parallel, delayed

        per_fold = Parallel(n_jobs=n_jobs)(
            delayed(_fit_fold)(data, config, plan, fold) for fold in range(k)
        )
    values = np.mean(per_fold, axis=0)
    return CvCurve(values=values, m_star=int(np.argmin(values)) + 1)


def cv_select(data: Dataset, config: BoostConfig, k, seed, n_jobs=1):
    """Pick m* by cross-validation and refit on the full data up to m*.

    Returns ``(curve, state)`` with ``state`` the full-data parameters after
    m* iterations.
    """
    curve = cv_curve(data, config, k, seed, n_jobs=n_jobs)
    trace = boost_fit(data, dataclasses.replace(config, m_stop=curve.m_star))
    return curve, trace.final_state()
