"""Component-wise likelihood boosting for the linear mixed model.

Each iteration runs three steps: a component-wise Fisher-scoring update of
(intercept, one fixed effect) with the component chosen by the unpenalized
likelihood of a full trial update, a weak block-wise Fisher-scoring update
of the random effects followed by the orthogonal-projection correction
against cluster-constant covariates, and approximate-EM updates of the
variance components.

``legacy_order`` reproduces the uncorrected behaviour of earlier
likelihood-boosting implementations: the random effects receive a full,
joint update *before* component selection, component gains are judged with
the subsequent random-effects re-equilibration folded in, and no correction
is applied.  In that mode the random intercepts absorb the effects of
cluster-constant covariates, which is exactly the failure mode the
correction removes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import mle
from .errors import DataError, NumericError, SingularMatrixError
from .model import (
    CorrectionOperator,
    Dataset,
    ParamState,
    build_correction,
    q_inverse,
)

START_ZERO_RANEF = "zero_ranef"
START_ML_INTERCEPT = "ml_intercept_ranef"

_SIGMA2_FLOOR = 1e-10


@dataclass(frozen=True)
class BoostConfig:
    """Tuning knobs of the boosting run.

    ``nu`` is the step length of the weak updates; ``nu_ran`` optionally
    decouples the random-effects step length (defaults to ``nu``).
    ``start_mode`` selects zero random effects (variant a) or an
    intercept-plus-random-effects ML fit (variant b) as starting values.
    """

    nu: float = 0.1
    m_stop: int = 1000
    start_mode: str = START_ZERO_RANEF
    correction_enabled: bool = True
    seed: int = 0
    nu_ran: float | None = None
    legacy_order: bool = False

    def __post_init__(self):
        if not 0.0 < self.nu <= 1.0:
            raise DataError(f"nu must be in (0, 1], got {self.nu}")
        if self.nu_ran is not None and not 0.0 < self.nu_ran <= 1.0:
            raise DataError(f"nu_ran must be in (0, 1], got {self.nu_ran}")
        if self.m_stop < 0:
            raise DataError(f"m_stop must be >= 0, got {self.m_stop}")
        if self.start_mode not in (START_ZERO_RANEF, START_ML_INTERCEPT):
            raise DataError(f"unknown start_mode {self.start_mode!r}")

    @property
    def effective_nu_ran(self):
        return self.nu if self.nu_ran is None else self.nu_ran

    @classmethod
    def legacy(cls, **kw):
        """Uncorrected bGLMM-like configuration: full joint random-effects
        treatment, no correction, started from the intercept-model fit."""
        kw.setdefault("nu_ran", 1.0)
        kw.setdefault("start_mode", START_ML_INTERCEPT)
        return cls(correction_enabled=False, legacy_order=True, **kw)


@dataclass(frozen=True)
class CandidateUpdate:
    """One component's trial update in the fixed-effects step."""

    r: int                  # 0-based component index
    u0: float               # intercept part of the update
    u: float                # effect part of the update
    candidate_loglik: float  # unpenalized log-likelihood of the full trial


@dataclass(frozen=True)
class BoostTrace:
    """Per-iteration history of a boosting run.

    Row 0 of every path holds the starting values; row m the state after
    iteration m.  ``selected`` holds the chosen component per iteration
    (0-based).
    """

    beta_path: np.ndarray       # (m_stop+1, p+1), column 0 is the intercept
    selected: np.ndarray        # (m_stop,)
    sigma2_path: np.ndarray     # (m_stop+1,)
    Q_path: np.ndarray          # (m_stop+1, q, q)
    penloglik_path: np.ndarray  # (m_stop+1,)
    gamma_path: np.ndarray = field(repr=False)  # (m_stop+1, n, q)
    colnames: tuple = ()
    cluster_labels: np.ndarray = None
    z_cols: tuple = ("1",)

    @property
    def m_stop(self):
        return self.selected.shape[0]

    def state_at(self, m):
        """Parameter state after iteration m (m = 0 is the start)."""
        if not 0 <= m <= self.m_stop:
            raise IndexError(f"iteration {m} outside 0..{self.m_stop}")
        return ParamState(
            beta0=self.beta_path[m, 0],
            beta=self.beta_path[m, 1:],
            gamma=self.gamma_path[m],
            sigma2=self.sigma2_path[m],
            Q=self.Q_path[m],
        )

    def final_state(self):
        return self.state_at(self.m_stop)


class _Workspace:
    """Per-dataset precomputations shared by all iterations of a fit."""

    def __init__(self, data: Dataset, legacy=False):
        self.data = data
        X = data.X
        self.N = data.n_obs
        self.col_sums = X.sum(axis=0)
        self.col_sqsums = (X * X).sum(axis=0)
        # centered sum of squares, computed without cancellation so constant
        # columns are detected reliably
        self.css = ((X - self.col_sums / self.N) ** 2).sum(axis=0)
        self.valid = self.css > 1e-12 * (self.col_sqsums + 1.0)
        starts = data.cluster_starts
        self.ZtZ = np.add.reduceat(
            data.Z[:, :, None] * data.Z[:, None, :], starts, axis=0
        )
        if legacy:
            self.Zt1 = np.add.reduceat(data.Z, starts, axis=0)
            ZtX = np.add.reduceat(data.Z[:, :, None] * X[:, None, :], starts, axis=0)
            self.ZtX = np.moveaxis(ZtX, 2, 0)  # (p, n, q)

    def eta(self, beta0, beta, gamma):
        data = self.data
        s = beta0 + data.X @ beta
        return s + np.einsum("nq,nq->n", data.Z, gamma[data.cluster_index])

    def cluster_sums(self, v):
        """Z' v per cluster, shape (n, q)."""
        return np.add.reduceat(self.data.Z * v[:, None], self.data.cluster_starts, axis=0)


def init_state(data: Dataset, config: BoostConfig) -> ParamState:
    """Starting values; the boosted coefficients always start at zero."""
    p, q = data.n_fixed, data.n_random
    if config.start_mode == START_ML_INTERCEPT:
        try:
            fit = mle.ml_fit(_intercept_model(data))
            return ParamState(
                beta0=fit.beta0, beta=np.zeros(p), gamma=fit.gamma,
                sigma2=max(fit.sigma2, _SIGMA2_FLOOR), Q=_spd_floor(fit.Q),
            )
        except (NumericError, np.linalg.LinAlgError) as exc:
            warnings.warn(
                f"intercept-model ML fit failed ({exc}); falling back to zero "
                "random-effects starting values", RuntimeWarning, stacklevel=2,
            )
    beta0 = float(np.mean(data.y))
    sigma2 = max(float(np.var(data.y, ddof=1)), _SIGMA2_FLOOR)
    return ParamState(
        beta0=beta0, beta=np.zeros(p), gamma=np.zeros((data.n_clusters, q)),
        sigma2=sigma2, Q=0.1 * np.eye(q),
    )


def _intercept_model(data: Dataset):
    from .model import drop_fixed_effects

    return drop_fixed_effects(data)


def _spd_floor(Q):
    w = np.linalg.eigvalsh(Q)
    if w[0] < 1e-8:
        Q = Q + (1e-8 - min(w[0], 0.0)) * np.eye(Q.shape[0])
    return Q


def _candidate_arrays(ws: _Workspace, resid, gamma=None, sigma2=None, Qinv=None, joint=False):
    """Vectorized trial updates for all components.

    Returns (u0, u1, gain, valid) where gain is the residual-sum-of-squares
    reduction of the full trial update; with ``joint=True`` the gain also
    counts the re-equilibration of the random effects after the trial.
    """
    N = ws.N
    S0 = resid.sum()
    Sr = ws.data.X.T @ resid
    det = N * ws.css
    with np.errstate(divide="ignore", invalid="ignore"):
        u0 = (ws.col_sqsums * S0 - ws.col_sums * Sr) / det
        u1 = (N * Sr - ws.col_sums * S0) / det
    u0 = np.where(ws.valid, u0, 0.0)
    u1 = np.where(ws.valid, u1, 0.0)
    gain = S0 * u0 + Sr * u1

    if joint:
        # Fold in the RSS change of a subsequent full random-effects refit:
        # the joint treatment lets the random effects absorb cluster-level
        # signal before components are compared.
        inv_s2 = 1.0 / sigma2
        Zte = ws.cluster_sums(resid)                       # (n, q)
        w = Zte[None] - u0[:, None, None] * ws.Zt1[None] - u1[:, None, None] * ws.ZtX
        F = inv_s2 * ws.ZtZ + Qinv                         # (n, q, q)
        s = inv_s2 * w - (gamma @ Qinv)[None]              # (p, n, q)
        d = np.linalg.solve(F[None], s[..., None])[..., 0]
        refit = 2.0 * np.einsum("pnq,pnq->p", d, w) - np.einsum(
            "pnq,nqr,pnr->p", d, ws.ZtZ, d
        )
        gain = gain + refit

    return u0, u1, gain, ws.valid


def _select(ws, resid, rss, sigma2, gamma=None, Qinv=None, joint=False):
    u0, u1, gain, valid = _candidate_arrays(
        ws, resid, gamma=gamma, sigma2=sigma2, Qinv=Qinv, joint=joint
    )
    if not valid.any():
        raise SingularMatrixError("all fixed-effect candidates are constant columns")
    if not valid.all():
        skipped = [ws.data.colnames[k] for k in np.flatnonzero(~valid)]
        warnings.warn(f"skipping constant covariate column(s): {skipped}", RuntimeWarning,
                      stacklevel=3)
    score = np.where(valid, gain, -np.inf)
    r = int(np.argmax(score))  # first occurrence wins exact ties
    loglik = -0.5 * ws.N * np.log(2.0 * np.pi * sigma2) - (rss - gain) / (2.0 * sigma2)
    return r, u0, u1, loglik, valid


def fixed_effects_step(state: ParamState, data: Dataset, config: BoostConfig):
    """One component-wise fixed-effects update.

    Returns ``(new_state, selected, candidates)`` where ``candidates`` holds
    the trial update of every non-degenerate component.
    """
    ws = _Workspace(data, legacy=config.legacy_order)
    resid = data.y - ws.eta(state.beta0, state.beta, state.gamma)
    rss = float(resid @ resid)
    Qinv = q_inverse(state.Q) if config.legacy_order else None
    r, u0, u1, loglik, valid = _select(
        ws, resid, rss, state.sigma2,
        gamma=state.gamma, Qinv=Qinv, joint=config.legacy_order,
    )
    candidates = [
        CandidateUpdate(r=int(k), u0=float(u0[k]), u=float(u1[k]), candidate_loglik=float(loglik[k]))
        for k in np.flatnonzero(valid)
    ]
    beta = state.beta.copy()
    beta[r] += config.nu * u1[r]
    new_state = state.replace(beta0=state.beta0 + config.nu * u0[r], beta=beta)
    return new_state, r, candidates


def random_effects_update(state: ParamState, data: Dataset, config: BoostConfig):
    """Weak block-wise Fisher-scoring update of the random effects.

    Solved cluster by cluster through the block-diagonal Fisher matrix
    F_i = sigma^{-2} Z_i'Z_i + Q^{-1}; the stacked (n q) x (n q) system is
    never formed.
    """
    ws = _Workspace(data)
    return _random_update(ws, state.beta0, state.beta, state.gamma, state.sigma2,
                          q_inverse(state.Q), config.effective_nu_ran)


def _random_update(ws: _Workspace, beta0, beta, gamma, sigma2, Qinv, nu_ran, resid=None):
    if resid is None:
        resid = ws.data.y - ws.eta(beta0, beta, gamma)
    inv_s2 = 1.0 / sigma2
    F = inv_s2 * ws.ZtZ + Qinv
    rhs = inv_s2 * ws.cluster_sums(resid) - gamma @ Qinv
    try:
        delta = np.linalg.solve(F, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("random-effects Fisher block is singular") from exc
    return gamma + nu_ran * delta


def correct_random_effects(gamma_tilde, cor: CorrectionOperator):
    """Project cluster-constant structure out of the random effects.

    The random-intercept column loses its projection onto (1, X_c); slope
    columns are centered to mean zero.
    """
    gamma_hat = np.array(gamma_tilde, dtype=float)
    gamma_hat[:, 0] = cor.project_out(gamma_tilde[:, 0])
    if gamma_hat.shape[1] > 1:
        gamma_hat[:, 1:] -= gamma_hat[:, 1:].mean(axis=0)
    return gamma_hat


def update_Q(state: ParamState, data: Dataset):
    """Approximate-EM update of the random-effects covariance from the
    posterior curvatures, Q_hat = (1/n) sum_i (F_i^{-1} + gamma_i gamma_i')."""
    ws = _Workspace(data)
    return _update_Q(ws, state.gamma, state.sigma2, q_inverse(state.Q))


def _update_Q(ws: _Workspace, gamma, sigma2, Qinv):
    F = ws.ZtZ / sigma2 + Qinv
    Finv = np.linalg.inv(F)
    n = gamma.shape[0]
    Qhat = Finv.mean(axis=0) + gamma.T @ gamma / n
    return 0.5 * (Qhat + Qhat.T)


def update_sigma2(state: ParamState, data: Dataset, debug=False):
    """Residual variance maximizing the conditional likelihood, ||y-eta||^2/N."""
    resid = data.y - _Workspace(data).eta(state.beta0, state.beta, state.gamma)
    return _update_sigma2(resid, data.n_obs, debug=debug, y=data.y)


def _update_sigma2(resid, N, debug=False, y=None):
    rss = float(resid @ resid)
    if rss == 0.0:
        warnings.warn("zero residual vector; flooring sigma2 at 1e-10", RuntimeWarning,
                      stacklevel=3)
        return _SIGMA2_FLOOR
    closed = rss / N
    if debug:
        hi = 10.0 * max(float(np.var(y, ddof=1)), closed) if y is not None else 10.0 * closed
        golden = _golden_max(
            lambda s2: -0.5 * N * np.log(2.0 * np.pi * s2) - rss / (2.0 * s2),
            1e-8, hi,
        )
        if abs(golden - closed) > 1e-6 * closed:
            raise NumericError(
                f"sigma2 cross-check failed: closed form {closed:.12g} vs "
                f"golden-section {golden:.12g}"
            )
    return closed


def _golden_max(f, lo, hi, tol=1e-12, maxiter=400):
    """Golden-section maximization on [lo, hi]."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(maxiter):
        if b - a <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _correction_for(data: Dataset):
    """Correction operator, dropping collinear columns with a warning.

    A fold complement can lack a level of a flagged covariate (all-female
    complement); the correction is then rebuilt from what remains.
    """
    try:
        return build_correction(data)
    except SingularMatrixError as exc:
        warnings.warn(
            f"{exc}; rebuilding the correction without the offending column(s)",
            RuntimeWarning, stacklevel=3,
        )
        return build_correction(data, drop_collinear=True)


def boost_fit(data: Dataset, config: BoostConfig) -> BoostTrace:
    """Run the full boosting path and record the per-iteration trace.

    Selection of a stopping iteration is the cross-validation module's job;
    this always runs ``m_stop`` iterations.
    """
    ws = _Workspace(data, legacy=config.legacy_order)
    state0 = init_state(data, config)
    cor = _correction_for(data) if config.correction_enabled else None

    n, p, q = data.n_clusters, data.n_fixed, data.n_random
    m_stop = config.m_stop
    beta_path = np.zeros((m_stop + 1, p + 1))
    gamma_path = np.zeros((m_stop + 1, n, q))
    sigma2_path = np.zeros(m_stop + 1)
    Q_path = np.zeros((m_stop + 1, q, q))
    penll_path = np.zeros(m_stop + 1)
    selected = np.zeros(m_stop, dtype=int)

    beta0, beta = state0.beta0, state0.beta.copy()
    gamma, sigma2, Q = state0.gamma.copy(), state0.sigma2, state0.Q.copy()

    def record(m, rss):
        beta_path[m, 0] = beta0
        beta_path[m, 1:] = beta
        gamma_path[m] = gamma
        sigma2_path[m] = sigma2
        Q_path[m] = Q
        cond = -0.5 * ws.N * np.log(2.0 * np.pi * sigma2) - rss / (2.0 * sigma2)
        pen = 0.5 * np.einsum("nq,qr,nr->", gamma, q_inverse(Q), gamma)
        penll_path[m] = cond - pen

    resid = data.y - ws.eta(beta0, beta, gamma)
    record(0, float(resid @ resid))

    nu, nu_ran = config.nu, config.effective_nu_ran
    for m in range(1, m_stop + 1):
        try:
            eta = ws.eta(beta0, beta, gamma)
            resid = data.y - eta
            Qinv = q_inverse(Q)

            if config.legacy_order:
                gamma_new = _random_update(ws, beta0, beta, gamma, sigma2, Qinv,
                                           nu_ran, resid=resid)
                if config.correction_enabled:
                    gamma_new = correct_random_effects(gamma_new, cor)
                dgamma = (gamma_new - gamma)[data.cluster_index]
                resid = resid - np.einsum("nq,nq->n", data.Z, dgamma)
                gamma = gamma_new
                rss = float(resid @ resid)
                r, u0, u1, _, _ = _select(ws, resid, rss, sigma2, gamma=gamma,
                                          Qinv=Qinv, joint=True)
                beta0 += nu * u0[r]
                beta[r] += nu * u1[r]
                resid = resid - nu * (u0[r] + u1[r] * data.X[:, r])
            else:
                rss = float(resid @ resid)
                r, u0, u1, _, _ = _select(ws, resid, rss, sigma2)
                beta0 += nu * u0[r]
                beta[r] += nu * u1[r]
                resid = resid - nu * (u0[r] + u1[r] * data.X[:, r])
                gamma_new = _random_update(ws, beta0, beta, gamma, sigma2, Qinv,
                                           nu_ran, resid=resid)
                if config.correction_enabled:
                    gamma_new = correct_random_effects(gamma_new, cor)
                dgamma = (gamma_new - gamma)[data.cluster_index]
                resid = resid - np.einsum("nq,nq->n", data.Z, dgamma)
                gamma = gamma_new

            selected[m - 1] = r
            Q = _update_Q(ws, gamma, sigma2, Qinv)
            sigma2 = _update_sigma2(resid, ws.N)
            record(m, float(resid @ resid))
        except NumericError as exc:
            raise type(exc)(f"boosting iteration {m}: {exc}") from exc

    return BoostTrace(
        beta_path=beta_path, selected=selected, sigma2_path=sigma2_path,
        Q_path=Q_path, penloglik_path=penll_path, gamma_path=gamma_path,
        colnames=data.colnames, cluster_labels=np.asarray(data.cluster_labels),
        z_cols=data.z_cols,
    )
