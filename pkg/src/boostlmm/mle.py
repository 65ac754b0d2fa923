"""Direct maximum-likelihood fitting of the Gaussian linear mixed model.

Maximizes the marginal log-likelihood

    sum_i [ -0.5 log det(2 pi V_i) - 0.5 (y_i - mu_i)' V_i^{-1} (y_i - mu_i) ],

with V_i = sigma2 I + Z_i Q Z_i'.  Used for starting values, convergence
checks and as the classical-baseline method in simulations.  ML (not REML):
variance components are unrestricted, matching the likelihood the boosting
engine climbs.

(sigma2, Q) are parameterized through a log-Cholesky factor so the
positive-definiteness constraint disappears; tau -> 0 shows up as Q_hat ~ 0
rather than an error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import ConvergenceError, DataError, SingularMatrixError
from .model import Dataset, ParamState, make_dataset

_LOG_BOUND = 15.0  # |log sigma|, |log diag(L)| cap; Q entries span e^{+-30}


@dataclass(frozen=True)
class MarginalModel:
    """Per-cluster marginal covariances and the log-likelihood they induce."""

    covariances: tuple      # n matrices V_i = sigma2 I + Z_i Q Z_i'
    loglik: float


def marginal_loglik(beta0, beta, sigma2, Q, data: Dataset):
    """Marginal Gaussian log-likelihood, evaluated cluster by cluster."""
    if sigma2 <= 0:
        raise DataError("sigma2 must be positive")
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    mu = beta0 + data.X @ np.asarray(beta, dtype=float)
    total = 0.0
    for s, e in data.cluster_slices():
        Zi = data.Z[s:e]
        Vi = sigma2 * np.eye(e - s) + Zi @ Q @ Zi.T
        try:
            L = np.linalg.cholesky(Vi)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError("marginal covariance V_i is not positive definite") from exc
        ri = data.y[s:e] - mu[s:e]
        w = np.linalg.solve(L, ri)
        total += -0.5 * (e - s) * np.log(2.0 * np.pi)
        total += -np.log(np.diag(L)).sum() - 0.5 * w @ w
    return float(total)


def marginal_model(beta0, beta, sigma2, Q, data: Dataset):
    """Bundle the per-cluster covariances with the marginal log-likelihood."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    covs = []
    for s, e in data.cluster_slices():
        Zi = data.Z[s:e]
        covs.append(sigma2 * np.eye(e - s) + Zi @ Q @ Zi.T)
    return MarginalModel(covariances=tuple(covs), loglik=marginal_loglik(beta0, beta, sigma2, Q, data))


# -- sufficient statistics for the fast profile-likelihood path --------------


class _Workspace:
    """Per-cluster cross-products of the intercept-augmented design."""

    def __init__(self, data: Dataset):
        N, p = data.n_obs, data.n_fixed
        Xf = np.column_stack([np.ones(N), data.X])       # (N, p+1)
        starts = data.cluster_starts
        self.sizes = data.cluster_sizes.astype(float)
        self.n = data.n_clusters
        self.pf = p + 1
        self.q = data.n_random
        self.N = N
        Z = data.Z
        y = data.y
        self.ZtZ = _blockcross(Z, Z, starts)             # (n, q, q)
        self.ZtX = _blockcross(Z, Xf, starts)            # (n, q, p+1)
        self.Zty = np.add.reduceat(Z * y[:, None], starts, axis=0)
        self.XtX = _blockcross(Xf, Xf, starts)           # (n, p+1, p+1)
        self.Xty = np.add.reduceat(Xf * y[:, None], starts, axis=0)
        self.yty = np.add.reduceat(y * y, starts)


def _blockcross(A, B, starts):
    prod = A[:, :, None] * B[:, None, :]
    return np.add.reduceat(prod, starts, axis=0)


def _gls_and_loglik(ws: _Workspace, sigma2, L):
    """Profile out (beta0, beta) by GLS and return (beta_full, loglik).

    Uses the Woodbury identity: for per-cluster cross-products a'V^{-1}b =
    sigma^{-2} [a'b - sigma^{-2} (Z'a)' L M^{-1} L' (Z'b)] with
    M = I + sigma^{-2} L' Z'Z L.
    """
    q = ws.q
    inv_s2 = 1.0 / sigma2
    M = np.eye(q) + inv_s2 * np.einsum("ab,nbc,cd->nad", L.T, ws.ZtZ, L)
    Mchol = np.linalg.cholesky(M)
    logdetM = 2.0 * np.log(np.diagonal(Mchol, axis1=1, axis2=2)).sum()

    LtZtX = np.einsum("ab,nbc->nac", L.T, ws.ZtX)        # (n, q, p+1)
    LtZty = ws.Zty @ L                                   # (n, q)
    WX = np.linalg.solve(M, LtZtX)                       # M^{-1} L'Z'X
    Wy = np.linalg.solve(M, LtZty[:, :, None])[:, :, 0]

    A = inv_s2 * (ws.XtX.sum(0) - inv_s2 * np.einsum("nqa,nqb->ab", LtZtX, WX))
    rhs = inv_s2 * (ws.Xty.sum(0) - inv_s2 * np.einsum("nqa,nq->a", LtZtX, Wy))
    yVy = inv_s2 * (ws.yty.sum() - inv_s2 * np.einsum("nq,nq->", LtZty, Wy))

    beta_full = np.linalg.solve(A, rhs)
    quad = yVy - beta_full @ rhs
    logdet = ws.N * np.log(sigma2) + logdetM
    ll = -0.5 * (ws.N * np.log(2.0 * np.pi) + logdet + quad)
    return beta_full, float(ll)


def _unpack(theta, q):
    sigma2 = np.exp(2.0 * theta[0])
    L = np.zeros((q, q))
    k = 1
    for i in range(q):
        for j in range(i + 1):
            L[i, j] = np.exp(theta[k]) if i == j else theta[k]
            k += 1
    return sigma2, L


def _pack(sigma2, L):
    q = L.shape[0]
    theta = [0.5 * np.log(sigma2)]
    for i in range(q):
        for j in range(i + 1):
            theta.append(np.log(max(L[i, j], 1e-7)) if i == j else L[i, j])
    return np.array(theta)


def ml_fit(data: Dataset, random_structure=None, max_outer=500, tol=1e-8):
    """Maximum-likelihood fit; random effects returned as BLUPs.

    Alternates a GLS update for (beta0, beta) with numeric maximization of
    the marginal log-likelihood over the log-Cholesky parameterization of
    (sigma2, Q) until successive log-likelihoods differ by less than
    ``tol``.  ``random_structure`` optionally names fixed-effect columns to
    use as random slopes instead of the dataset's own design.
    """
    if random_structure is not None:
        data = make_dataset(
            data.y, data.cluster_id, data.X, data.colnames,
            slope_cols=tuple(random_structure),
            cluster_constant=sorted(data.cluster_constant_idx),
        )
    N, p, q = data.n_obs, data.n_fixed, data.n_random
    if N <= p + 1:
        raise DataError(f"dense ML fit requires N > p + 1 (N={N}, p={p})")

    ws = _Workspace(data)

    Xf = np.column_stack([np.ones(N), data.X])
    beta_ols, *_ = np.linalg.lstsq(Xf, data.y, rcond=None)
    v = float(np.var(data.y - Xf @ beta_ols)) or 1.0
    theta = _pack(0.5 * v, np.sqrt(0.5 * v) * np.eye(q))

    bounds = [(-_LOG_BOUND, _LOG_BOUND)]
    for i in range(q):
        for j in range(i + 1):
            bounds.append((-_LOG_BOUND, _LOG_BOUND) if i == j else (-50.0, 50.0))

    def neg_profile(th):
        sigma2, L = _unpack(th, q)
        try:
            _, ll = _gls_and_loglik(ws, sigma2, L)
        except np.linalg.LinAlgError:
            return 1e12
        return -ll

    ll_prev = -np.inf
    best = None
    for _ in range(max_outer):
        res = minimize(neg_profile, theta, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": 500, "ftol": 1e-12, "gtol": 1e-9})
        theta = res.x
        sigma2, L = _unpack(theta, q)
        beta_full, ll = _gls_and_loglik(ws, sigma2, L)
        best = (beta_full, sigma2, L, ll)
        if abs(ll - ll_prev) < tol:
            break
        ll_prev = ll
    else:
        state = _assemble_state(ws, data, *best[:3])
        raise ConvergenceError(
            f"ML fit did not converge within {max_outer} outer iterations", best_state=state
        )

    return _assemble_state(ws, data, beta_full, sigma2, L)


def _assemble_state(ws: _Workspace, data: Dataset, beta_full, sigma2, L):
    Q = L @ L.T
    inv_s2 = 1.0 / sigma2
    M = np.eye(ws.q) + inv_s2 * np.einsum("ab,nbc,cd->nad", L.T, ws.ZtZ, L)
    Ztr = ws.Zty - np.einsum("nqa,a->nq", ws.ZtX, beta_full)
    w = np.linalg.solve(M, (Ztr @ L)[:, :, None])[:, :, 0]
    gamma = inv_s2 * (w @ L.T)
    return ParamState(beta0=beta_full[0], beta=beta_full[1:], gamma=gamma, sigma2=sigma2, Q=Q)
