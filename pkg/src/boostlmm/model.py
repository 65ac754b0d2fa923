"""Core domain types for the clustered Gaussian linear mixed model.

The model for cluster i = 1..n with observations j = 1..n_i is

    y_ij = beta0 + x_ij' beta + z_ij' gamma_i + eps_ij,

with eps_ij ~ N(0, sigma2) and gamma_i ~ N(0, Q).  ``Dataset`` holds the
(cluster-sorted) design, ``ParamState`` a full parameter vector, and
``CorrectionOperator`` the projection machinery used to keep random
intercepts orthogonal to cluster-constant covariates.

All types are immutable value objects; the likelihood functions are pure.
"""

from __future__ import annotations

import numbers
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, SingularMatrixError

# Within-cluster range below this is treated as constant (float round-trip
# through file formats).
CONSTANT_TOL = 1e-12

# Ridge added to Q before inversion when its smallest eigenvalue drops below
# this (EM updates can drive Q near-singular on degenerate data).
Q_RIDGE = 1e-10

#: Spec string for the constant-one intercept column of the random-effect design.
INTERCEPT_COL = "1"


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    """Long-format clustered data, rows grouped contiguously by cluster.

    Construct through :func:`make_dataset`, which sorts rows, materializes
    the random-effect design and flags cluster-constant covariate columns.
    """

    y: np.ndarray                 # (N,) responses
    cluster_id: np.ndarray        # (N,) original cluster labels, sorted
    X: np.ndarray                 # (N, p) fixed-effect design
    colnames: tuple               # p fixed-effect column names
    Z: np.ndarray                 # (N, q) random-effect design, column 0 is ones
    z_cols: tuple                 # q column specs, first is INTERCEPT_COL
    cluster_constant_idx: frozenset  # 0-based indices of cluster-constant columns
    # derived cluster structure
    cluster_labels: np.ndarray = field(repr=False)   # (n,) unique labels in order
    cluster_starts: np.ndarray = field(repr=False)   # (n,) row offsets
    cluster_sizes: np.ndarray = field(repr=False)    # (n,)
    cluster_index: np.ndarray = field(repr=False)    # (N,) row -> cluster position

    @property
    def n_obs(self):
        return self.y.shape[0]

    @property
    def n_clusters(self):
        return self.cluster_labels.shape[0]

    @property
    def n_fixed(self):
        return self.X.shape[1]

    @property
    def n_random(self):
        return self.Z.shape[1]

    def cluster_slices(self):
        """Iterate (start, stop) row ranges, one per cluster."""
        for s, size in zip(self.cluster_starts, self.cluster_sizes):
            yield int(s), int(s + size)


def _sort_by_cluster(ids):
    ids = np.asarray(ids)
    try:
        order = np.argsort(ids, kind="stable")
    except TypeError:
        order = np.argsort(ids.astype(str), kind="stable")
    return order


def make_dataset(y, cluster_ids, X, colnames, slope_cols=(), cluster_constant=None,
                 _min_clusters=2):
    """Assemble a :class:`Dataset`, sorting rows stably by cluster id.

    ``slope_cols`` names fixed-effect columns that also enter the
    random-effect design after the implicit intercept column.  When
    ``cluster_constant`` is None the constant columns are auto-detected;
    otherwise it is a collection of column names or 0-based indices and
    each named column is validated to actually be constant per cluster.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DataError(f"X must be (N, p) with N = len(y); got {X.shape} vs N={y.shape[0]}")
    colnames = tuple(str(c) for c in colnames)
    if len(colnames) != X.shape[1]:
        raise DataError(f"{len(colnames)} column names for {X.shape[1]} columns")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
        raise DataError("non-finite values in response or design")
    if y.shape[0] == 0:
        raise DataError("empty data")

    ids = np.asarray(cluster_ids)
    if ids.shape[0] != y.shape[0]:
        raise DataError("cluster_ids length mismatch")
    order = _sort_by_cluster(ids)
    y, ids, X = y[order], ids[order], X[order]

    change = np.empty(ids.shape[0], dtype=bool)
    change[0] = True
    change[1:] = ids[1:] != ids[:-1]
    starts = np.flatnonzero(change)
    labels = ids[starts]
    sizes = np.diff(np.append(starts, ids.shape[0]))
    if labels.shape[0] < _min_clusters:
        raise DataError("mixed model requires >= 2 clusters")
    cluster_index = np.repeat(np.arange(labels.shape[0]), sizes)

    name_to_idx = {c: k for k, c in enumerate(colnames)}
    z_cols = [INTERCEPT_COL]
    Zparts = [np.ones((y.shape[0], 1))]
    for c in slope_cols:
        if c not in name_to_idx:
            raise DataError(f"random-slope column {c!r} not among fixed-effect columns")
        z_cols.append(c)
        Zparts.append(X[:, [name_to_idx[c]]])
    Z = np.hstack(Zparts)

    if cluster_constant is None:
        const_idx = _detect_constant_columns(X, starts)
    else:
        const_idx = set()
        for c in cluster_constant:
            k = c if isinstance(c, numbers.Integral) else name_to_idx.get(c)
            if k is None or not 0 <= k < X.shape[1]:
                raise DataError(f"unknown cluster-constant column {c!r}")
            const_idx.add(int(k))
        bad = const_idx - _detect_constant_columns(X, starts)
        if bad:
            names = [colnames[k] for k in sorted(bad)]
            raise DataError(f"columns flagged cluster-constant but varying within a cluster: {names}")

    return Dataset(
        y=_readonly(y),
        cluster_id=_readonly(ids),
        X=_readonly(X),
        colnames=colnames,
        Z=_readonly(Z),
        z_cols=tuple(z_cols),
        cluster_constant_idx=frozenset(const_idx),
        cluster_labels=_readonly(labels),
        cluster_starts=_readonly(starts),
        cluster_sizes=_readonly(sizes),
        cluster_index=_readonly(cluster_index),
    )


def _detect_constant_columns(X, starts):
    if X.shape[1] == 0:
        return set()
    hi = np.maximum.reduceat(X, starts, axis=0)
    lo = np.minimum.reduceat(X, starts, axis=0)
    rng = (hi - lo).max(axis=0)
    return set(np.flatnonzero(rng <= CONSTANT_TOL).tolist())


def detect_cluster_constant(data: Dataset):
    """Column indices whose within-cluster range is zero (tolerance 1e-12)."""
    return frozenset(_detect_constant_columns(data.X, data.cluster_starts))


def subset_clusters(data: Dataset, keep):
    """New Dataset restricted to the clusters at positions ``keep`` (in order).

    Column flags are inherited from the parent dataset.  A subset may hold a
    single cluster (leave-one-cluster-out evaluation slices); fitting still
    requires at least two.
    """
    keep = np.asarray(keep, dtype=int)
    rows = np.concatenate(
        [np.arange(data.cluster_starts[i], data.cluster_starts[i] + data.cluster_sizes[i]) for i in keep]
    )
    slope_cols = data.z_cols[1:]
    return make_dataset(
        data.y[rows],
        data.cluster_id[rows],
        data.X[rows],
        data.colnames,
        slope_cols=slope_cols,
        cluster_constant=sorted(data.cluster_constant_idx),
        _min_clusters=1,
    )


def drop_fixed_effects(data: Dataset):
    """Intercept-plus-random-effects view of the data (p = 0).

    The random-effect design is carried over unchanged so the random
    structure is preserved.
    """
    return Dataset(
        y=data.y,
        cluster_id=data.cluster_id,
        X=_readonly(np.empty((data.n_obs, 0))),
        colnames=(),
        Z=data.Z,
        z_cols=data.z_cols,
        cluster_constant_idx=frozenset(),
        cluster_labels=data.cluster_labels,
        cluster_starts=data.cluster_starts,
        cluster_sizes=data.cluster_sizes,
        cluster_index=data.cluster_index,
    )


@dataclass(frozen=True)
class ParamState:
    """Full parameter vector: intercept, fixed effects, per-cluster random
    effects, residual variance and random-effects covariance."""

    beta0: float
    beta: np.ndarray    # (p,)
    gamma: np.ndarray   # (n, q)
    sigma2: float
    Q: np.ndarray       # (q, q) symmetric positive definite

    def __post_init__(self):
        object.__setattr__(self, "beta0", float(self.beta0))
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "beta", _readonly(np.asarray(self.beta, dtype=float)))
        gamma = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        object.__setattr__(self, "gamma", _readonly(gamma))
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "Q", _readonly(Q))
        if self.sigma2 <= 0:
            raise DataError(f"sigma2 must be positive, got {self.sigma2}")
        if Q.shape[0] != Q.shape[1] or Q.shape[0] != gamma.shape[1]:
            raise DataError(f"Q shape {Q.shape} incompatible with gamma shape {gamma.shape}")
        if not np.allclose(Q, Q.T, atol=1e-8):
            raise DataError("Q must be symmetric")

    def replace(self, **kw):
        vals = dict(beta0=self.beta0, beta=self.beta, gamma=self.gamma, sigma2=self.sigma2, Q=self.Q)
        vals.update(kw)
        return ParamState(**vals)


def q_inverse(Q):
    """Inverse of Q with a 1e-10 ridge when the smallest eigenvalue is below 1e-10.

    Raises for genuinely indefinite Q.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    w = np.linalg.eigvalsh(Q)
    if w[0] < -1e-8:
        raise SingularMatrixError(f"Q is not positive semi-definite (min eigenvalue {w[0]:.3e})")
    if w[0] < Q_RIDGE:
        Q = Q + Q_RIDGE * np.eye(Q.shape[0])
    return np.linalg.inv(Q)


def linear_predictor(state: ParamState, data: Dataset):
    """eta = beta0 + X beta + Z gamma, expanded to observation level."""
    eta = state.beta0 + data.X @ state.beta
    eta = eta + np.einsum("nq,nq->n", data.Z, state.gamma[data.cluster_index])
    return eta


def conditional_loglik(state: ParamState, data: Dataset):
    """Gaussian log-density of the responses given all effects,
    sum_i log f(y_i | theta, phi)."""
    if state.sigma2 <= 0:
        raise DataError("sigma2 must be positive")
    resid = data.y - linear_predictor(state, data)
    N = data.n_obs
    return -0.5 * N * np.log(2.0 * np.pi * state.sigma2) - resid @ resid / (2.0 * state.sigma2)


def random_effects_penalty(state: ParamState):
    """0.5 * sum_i gamma_i' Q^{-1} gamma_i."""
    Qinv = q_inverse(state.Q)
    return 0.5 * float(np.einsum("nq,qr,nr->", state.gamma, Qinv, state.gamma))


def penalized_loglik(state: ParamState, data: Dataset):
    """Conditional log-likelihood minus the quadratic random-effects penalty."""
    return conditional_loglik(state, data) - random_effects_penalty(state)


def penalized_score(state: ParamState, data: Dataset):
    """Analytic gradient of the penalized log-likelihood.

    Returns ``(g_beta0, g_beta, g_gamma)`` with shapes (), (p,), (n, q).
    """
    resid = data.y - linear_predictor(state, data)
    inv_s2 = 1.0 / state.sigma2
    g0 = inv_s2 * resid.sum()
    gb = inv_s2 * (data.X.T @ resid)
    Zte = np.add.reduceat(data.Z * resid[:, None], data.cluster_starts, axis=0)
    gg = inv_s2 * Zte - state.gamma @ q_inverse(state.Q)
    return g0, gb, gg


@dataclass(frozen=True)
class CorrectionOperator:
    """Projection machinery built from the cluster-constant design.

    ``Xc_tilde`` is the n x (p_c+1) matrix (1, X_c) of per-cluster values
    with a leading ones column; ``Xcor = (Xc_tilde' Xc_tilde)^{-1} Xc_tilde'``.
    ``columns`` records which fixed-effect columns entered the design.
    """

    Xc_tilde: np.ndarray   # (n, p_c + 1)
    Xcor: np.ndarray       # (p_c + 1, n)
    columns: tuple         # names of the columns used (without the ones column)

    def project_out(self, v):
        """Residual of v after projecting onto span(Xc_tilde)."""
        return v - self.Xc_tilde @ (self.Xcor @ v)


def build_correction(data: Dataset, drop_collinear=False):
    """Correction operator from the flagged cluster-constant columns.

    Raises :class:`SingularMatrixError` naming the offending columns when
    the cluster-constant design is collinear; with ``drop_collinear=True``
    the offending columns are silently left out instead.
    """
    idx = sorted(data.cluster_constant_idx)
    n = data.n_clusters
    values = data.X[data.cluster_starts][:, idx] if idx else np.empty((n, 0))
    names = [data.colnames[k] for k in idx]

    cols = [np.ones(n)]
    kept = []
    offending = []
    for name, col in zip(names, values.T):
        trial = np.column_stack(cols + [col])
        s = np.linalg.svd(trial, compute_uv=False)
        if s[-1] <= 1e-10 * s[0]:
            offending.append(name)
        else:
            cols.append(col)
            kept.append(name)
    if offending and not drop_collinear:
        raise SingularMatrixError(
            "collinear cluster-constant covariates: " + ", ".join(offending)
        )

    Xc_tilde = np.column_stack(cols)
    gram = Xc_tilde.T @ Xc_tilde
    Xcor = np.linalg.solve(gram, Xc_tilde.T)
    return CorrectionOperator(Xc_tilde=_readonly(Xc_tilde), Xcor=_readonly(Xcor), columns=tuple(kept))
