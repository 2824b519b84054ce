"""E-step over regimes and latent states.

A bank of Kalman filters, one per (current regime, previous regime) pair, is
run forward with only the observed entries of each timestep.  A Viterbi
recursion keeps, for every regime, the filter of the cheapest path ending
there; the winning path is then smoothed with an RTS backward pass.

Timesteps are 0-indexed: ``t = 0`` is the initial step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import PartialSeries, ModelParams, RegimePath, SmoothedPosterior, safe_cholesky, symmetrize
from .glasso import LOG_2PI, logdet_pd


@dataclass(frozen=True)
class FilterCell:
    """Predicted and filtered moments for one timestep of one filter."""

    mean_pred: np.ndarray
    mean_filt: np.ndarray
    cov_pred: np.ndarray
    cov_filt: np.ndarray
    gain: np.ndarray


@dataclass(frozen=True)
class ViterbiTable:
    """Forward-pass bookkeeping of :func:`viterbi_decode`.

    ``delta[t, k, l]`` is the partial cost of entering regime ``k`` at ``t``
    from regime ``l`` (the filter of the best path ending in ``l``).  At
    ``t = 0`` the cost does not depend on ``l`` and is stored in every column.
    """

    cost: np.ndarray       # (T, K) accumulated cost of best path ending in k
    backptr: np.ndarray    # (T, K)
    delta: np.ndarray      # (T, K, K)
    mean_filt: np.ndarray  # (T, K, L)
    cov_filt: np.ndarray   # (T, K, L, L)
    mean_pred: np.ndarray  # (T, K, L)
    cov_pred: np.ndarray   # (T, K, L, L)


@dataclass(frozen=True)
class ViterbiResult:
    path: RegimePath
    total_cost: float
    mean_filt: np.ndarray  # (T, L) along the path
    cov_filt: np.ndarray   # (T, L, L)
    cov_pred: np.ndarray   # (T, L, L); cov_pred[0] is psi0
    table: ViterbiTable


def _measurement_update(mean_pred, cov_pred, U_obs, x_obs, s2):
    """Plain Kalman update in observation space. Returns cell plus innovation terms."""
    n = x_obs.size
    L = mean_pred.size
    if n == 0:
        return mean_pred.copy(), cov_pred.copy(), np.zeros((L, 0)), None
    innov_cov = symmetrize(U_obs @ cov_pred @ U_obs.T + s2 * np.eye(n))
    chol = linalg.cho_factor(innov_cov, lower=True)
    gain = linalg.cho_solve(chol, U_obs @ cov_pred).T
    resid = x_obs - U_obs @ mean_pred
    mean_filt = mean_pred + gain @ resid
    cov_filt = symmetrize((np.eye(L) - gain @ U_obs) @ cov_pred)
    return mean_filt, cov_filt, gain, (resid, innov_cov)


def initial_step(k, series: PartialSeries, params: ModelParams, U) -> FilterCell:
    """Filter the first timestep under regime ``k`` starting from (z0, psi0)."""
    idx = np.flatnonzero(series.mask[:, 0])
    U_obs = np.asarray(U)[k][idx]
    s2 = params.sigma_X[k] ** 2
    m, P, K_gain, _ = _measurement_update(params.z0, params.psi0, U_obs, series.values[idx, 0], s2)
    return FilterCell(params.z0.copy(), m, params.psi0.copy(), P, K_gain)


def filter_step(prev: FilterCell, k, series: PartialSeries, params: ModelParams, U, t) -> FilterCell:
    """Predict from ``prev`` (a cell at ``t - 1``) and update with regime ``k`` at ``t``."""
    if t < 1:
        raise ValueError("filter_step needs t >= 1; use initial_step for t = 0")
    L = params.latent_dim
    mean_pred = params.B @ prev.mean_filt
    cov_pred = symmetrize(params.B @ prev.cov_filt @ params.B.T + params.sigma_Z ** 2 * np.eye(L))
    idx = np.flatnonzero(series.mask[:, t])
    U_obs = np.asarray(U)[k][idx]
    s2 = params.sigma_X[k] ** 2
    m, P, K_gain, _ = _measurement_update(mean_pred, cov_pred, U_obs, series.values[idx, t], s2)
    return FilterCell(mean_pred, m, cov_pred, P, K_gain)


def network_cost(x_hat, params: ModelParams, k):
    """Negative Gaussian log density of imputed vectors under regime ``k``'s network."""
    d = np.asarray(x_hat, dtype=float) - params.mu[k]
    P = params.precision[k]
    quad = np.einsum("...i,ij,...j->...", d, P, d)
    return 0.5 * quad - 0.5 * logdet_pd(P) + 0.5 * params.n_features * LOG_2PI


def partial_cost(cell: FilterCell, k, l, series: PartialSeries, params: ModelParams, U, t, x_hat_t):
    """Cost of being in regime ``k`` at ``t`` coming from regime ``l``.

    ``l`` is ignored at ``t = 0`` where the initial distribution ``pi`` is
    used instead of the transition matrix.  Lower is better; a forbidden
    transition gives ``inf``.
    """
    idx = np.flatnonzero(series.mask[:, t])
    cost = 0.0
    if idx.size:
        U_obs = np.asarray(U)[k][idx]
        s2 = params.sigma_X[k] ** 2
        innov_cov = symmetrize(U_obs @ cell.cov_pred @ U_obs.T + s2 * np.eye(idx.size))
        resid = series.values[idx, t] - U_obs @ cell.mean_pred
        chol = linalg.cho_factor(innov_cov, lower=True)
        quad = resid @ linalg.cho_solve(chol, resid)
        logdet = 2.0 * np.log(np.diag(chol[0])).sum()
        cost += 0.5 * quad + 0.5 * logdet + 0.5 * params.latent_dim * LOG_2PI
    cost += network_cost(x_hat_t, params, k)
    trans = params.pi[k] if t == 0 else params.markov[k, l]
    with np.errstate(divide="ignore"):
        cost -= np.log(trans)
    return float(cost)


def _observation_stats(series: PartialSeries, U):
    """Per-regime sufficient statistics of the observed-only measurement model."""
    W = series.mask.astype(float)
    WX = series.values * W
    G = np.einsum("it,kia,kib->ktab", W, U, U, optimize=True)   # U_obs' U_obs
    h = np.einsum("kia,it->kta", U, WX, optimize=True)           # U_obs' x_obs
    xx = (WX * WX).sum(axis=0)
    n_obs = series.mask.sum(axis=0)
    return G, h, xx, n_obs


def _psd_factor(P):
    """Some ``R`` with ``R R' = P`` for a PSD (possibly singular) ``P``."""
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(symmetrize(P))
        return V * np.sqrt(np.clip(w, 0.0, None))


def _info_update(m_pred, R, G, h, xx, s2, n, L):
    """Batched measurement update written in latent (L x L) space.

    ``R`` is the Cholesky factor of the predicted covariance.  Returns the
    filtered mean, filtered covariance and the innovation part of the
    partial cost.  Equivalent to the observation-space update through the
    Woodbury identity; the cost stays O(L^3) per cell however many features
    are observed.
    """
    eye = np.eye(L)
    batch = np.broadcast_shapes(R.shape[:-2], G.shape[:-2], m_pred.shape[:-1], np.shape(s2))
    R = np.broadcast_to(R, batch + (L, L))
    RGR = np.swapaxes(R, -1, -2) @ G @ R
    SL = symmetrize(s2[..., None, None] * eye + RGR)
    b = h - np.einsum("...ab,...b->...a", G, m_pred)
    a = np.einsum("...ba,...b->...a", R, b)
    rhs = np.concatenate([np.swapaxes(R, -1, -2), a[..., None]], axis=-1)
    sol = np.linalg.solve(SL, rhs)
    SinvRt, Sinva = sol[..., :L], sol[..., L]
    m_filt = m_pred + np.einsum("...ab,...b->...a", R, Sinva)
    P_filt = symmetrize(s2[..., None, None] * (R @ SinvRt))
    if n == 0:
        return m_filt, P_filt, np.zeros(m_filt.shape[:-1])
    CL = np.linalg.cholesky(SL)
    logdet_SL = 2.0 * np.log(np.diagonal(CL, axis1=-2, axis2=-1)).sum(-1)
    nu_nu = xx - 2.0 * np.einsum("...a,...a->...", m_pred, h) + np.einsum("...a,...ab,...b->...", m_pred, G, m_pred)
    quad = (nu_nu - np.einsum("...a,...a->...", a, Sinva)) / s2
    logdet_innov = n * np.log(s2) + logdet_SL - L * np.log(s2)
    innov = 0.5 * quad + 0.5 * logdet_innov + 0.5 * L * LOG_2PI
    return m_filt, P_filt, innov


def viterbi_decode(series: PartialSeries, params: ModelParams, U, imputed, fixed_path=None) -> ViterbiResult:
    """Most likely regime path under the collapsed-filter Viterbi approximation.

    Parameters
    ----------
    series : PartialSeries
    params : ModelParams
    U : array (K, N, L)
        Observation matrices.
    imputed : array (N, T)
        Current imputation, used by the network term of the cost.
    fixed_path : array (T,), optional
        Restrict decoding to this path; the filter then simply runs along it.
    """
    U = np.asarray(U, dtype=float)
    K, N, L = U.shape
    T = series.n_timesteps
    B = params.B
    Q = params.sigma_Z ** 2 * np.eye(L)
    s2 = params.sigma_X ** 2
    G, h, xx, n_obs = _observation_stats(series, U)
    imputed = np.asarray(imputed, dtype=float)
    net = np.stack([network_cost(imputed.T, params, k) for k in range(K)], axis=1)  # (T, K)
    if fixed_path is not None:
        blocked = np.arange(K)[None, :] != np.asarray(fixed_path)[:, None]
        net = np.where(blocked, np.inf, net)
    with np.errstate(divide="ignore"):
        log_markov = np.log(params.markov)
        log_pi = np.log(params.pi)

    cost = np.empty((T, K))
    backptr = np.zeros((T, K), dtype=np.int64)
    delta = np.empty((T, K, K))
    m_filt = np.empty((T, K, L))
    P_filt = np.empty((T, K, L, L))
    m_pred = np.empty((T, K, L))
    P_pred = np.empty((T, K, L, L))

    # t = 0: one filter per regime, all starting from (z0, psi0)
    R0 = _psd_factor(params.psi0)
    mf, Pf, innov = _info_update(
        np.broadcast_to(params.z0, (K, L)), np.broadcast_to(R0, (K, L, L)),
        G[:, 0], h[:, 0], xx[0], s2, n_obs[0], L)
    d0 = innov + net[0] - log_pi
    delta[0] = d0[:, None]
    cost[0] = d0
    m_filt[0], P_filt[0] = mf, Pf
    m_pred[0] = params.z0
    P_pred[0] = params.psi0

    k_idx = np.arange(K)
    for t in range(1, T):
        mp = m_filt[t - 1] @ B.T                                   # (K_l, L)
        Pp = symmetrize(B @ P_filt[t - 1] @ B.T + Q)               # (K_l, L, L)
        R = safe_cholesky(Pp)
        mf, Pf, innov = _info_update(
            mp[None, :, :], R[None], G[:, t][:, None], h[:, t][:, None],
            xx[t], s2[:, None], n_obs[t], L)                         # (K_k, K_l, ...)
        d = innov + net[t][:, None] - log_markov
        total = cost[t - 1][None, :] + d
        best = np.argmin(total, axis=1)
        delta[t] = d
        backptr[t] = best
        cost[t] = total[k_idx, best]
        m_filt[t] = mf[k_idx, best]
        P_filt[t] = Pf[k_idx, best]
        m_pred[t] = mp[best]
        P_pred[t] = Pp[best]

    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmin(cost[-1]))
    for t in range(T - 1, 0, -1):
        path[t - 1] = backptr[t, path[t]]
    steps = np.arange(T)
    table = ViterbiTable(cost, backptr, delta, m_filt, P_filt, m_pred, P_pred)
    return ViterbiResult(
        path=RegimePath(path, K),
        total_cost=float(cost[-1, path[-1]]),
        mean_filt=m_filt[steps, path],
        cov_filt=P_filt[steps, path],
        cov_pred=P_pred[steps, path],
        table=table,
    )


def path_cost(table: ViterbiTable, path) -> float:
    """Sum of tabulated partial costs along an arbitrary regime path."""
    path = np.asarray(path)
    total = table.delta[0, path[0], 0]
    for t in range(1, path.size):
        total += table.delta[t, path[t], path[t - 1]]
    return float(total)


def _solve_pd(P, rhs):
    try:
        c = linalg.cho_factor(P, lower=True)
    except linalg.LinAlgError:
        c = (safe_cholesky(P), True)
    return linalg.cho_solve(c, rhs)


def rts_smooth(mean_filt, cov_filt, cov_pred, params: ModelParams) -> SmoothedPosterior:
    """RTS backward pass over filtered moments along a fixed regime path.

    Parameters
    ----------
    mean_filt : array (T, L)
    cov_filt : array (T, L, L)
    cov_pred : array (T, L, L)
        One-step predicted covariances; ``cov_pred[t]`` predicts ``t`` from
        ``t - 1`` and entry 0 is unused.
    """
    mean_filt = np.asarray(mean_filt, dtype=float)
    T, L = mean_filt.shape
    B = params.B
    mu = mean_filt.copy()
    cov = np.array(cov_filt, dtype=float, copy=True)
    J = np.zeros((T, L, L))
    for t in range(T - 2, -1, -1):
        J[t] = _solve_pd(cov_pred[t + 1], B @ cov_filt[t]).T
        mu[t] = mean_filt[t] + J[t] @ (mu[t + 1] - B @ mean_filt[t])
        cov[t] = symmetrize(cov_filt[t] + J[t] @ (cov[t + 1] - cov_pred[t + 1]) @ J[t].T)
    outer = mu[:, :, None] * mu[:, None, :]
    second = cov + outer
    cross = np.zeros((T, L, L))
    if T > 1:
        cross[1:] = cov[1:] @ np.swapaxes(J[:-1], 1, 2) + mu[1:, :, None] * mu[:-1, None, :]
    return SmoothedPosterior(mean_hat=mu.T, cov_hat=cov, cross=cross, second=second)


def e_step(series: PartialSeries, params: ModelParams, U, imputed, fixed_path=None):
    """Viterbi decoding followed by smoothing along the decoded path."""
    vit = viterbi_decode(series, params, U, imputed, fixed_path)
    smoothed = rts_smooth(vit.mean_filt, vit.cov_filt, vit.cov_pred, params)
    return vit, smoothed
