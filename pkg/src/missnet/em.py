"""Alternating fit: regime/latent inference, parameter updates, imputation and
network re-estimation until the penalized objective stops improving."""
from __future__ import annotations

import logging
import warnings as _warnings

import numpy as np
from scipy.cluster.vq import kmeans2

from .contextual import infer_contextual_factors, partial_correlation_matrix, update_observation_matrix
from .core import (FitReport, FitResult, Hyperparams, LatentFactors, ModelParams, PartialSeries,
                   RegimePath, symmetrize)
from .glasso import LOG_2PI, GlassoConfig, empirical_moments, graphical_lasso, offdiag_l1
from .switching import e_step

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-8
MARKOV_EPS = 1e-3
EMPTY_RESEED_AFTER = 3
# ADMM steps per network update inside the fit; solves are warm-started, so
# the networks keep converging across iterations
EM_ADMM_ITER = 50


def linear_interpolate(series: PartialSeries):
    """Per-feature linear interpolation of the observed points.

    Ends are extrapolated with the nearest observed value; features without
    any observation are filled with zeros.  Returns the filled (N, T) array
    and a list of warning strings.
    """
    N, T = series.shape
    t = np.arange(T)
    out = np.array(series.values, dtype=float, copy=True)
    notes = []
    for i in range(N):
        obs = series.mask[i]
        if obs.all():
            continue
        if not obs.any():
            out[i] = 0.0
            notes.append(f"feature {i} has no observed values; filled with 0")
            continue
        out[i, ~obs] = np.interp(t[~obs], t[obs], series.values[i, obs])
    return out, notes


def _pairwise_correlation(values, mask, min_pairs=3):
    """Correlations of all feature pairs over the steps where both are observed."""
    W = mask.astype(float)
    Y = np.where(mask, values, 0.0)
    n = W @ W.T
    s = Y @ W.T                       # s[i, j]: sum of y_i where i and j are observed
    sxx = (Y * Y) @ W.T
    with np.errstate(invalid="ignore", divide="ignore"):
        mi, mj = s / n, s.T / n
        cov = (Y @ Y.T) / n - mi * mj
        var_i = sxx / n - mi ** 2
        var_j = sxx.T / n - mj ** 2
        c = cov / np.sqrt(var_i * var_j)
    c[(n < min_pairs) | ~np.isfinite(c)] = 0.0
    return np.clip(c, -1.0, 1.0)


def correlation_regime_path(series: PartialSeries, K, window=40, rng=None, n_init=10):
    """Starting regime path from k-means on windowed correlation patterns.

    The series is cut into consecutive windows; each window is described by
    the upper triangle of its pairwise-complete correlation matrix and the
    windows are clustered into ``K`` groups.  Labels are renumbered by first
    appearance.  Falls back to contiguous blocks when there are fewer
    windows than regimes.
    """
    N, T = series.shape
    K = int(K)
    if K == 1:
        return np.zeros(T, dtype=np.int64)
    w = int(max(2, min(window, T // (2 * K))))
    starts = np.arange(0, T, w)
    if starts.size < K or N < 2:
        return _contiguous_path(T, K)
    iu = np.triu_indices(N, 1)
    feats = np.array([_pairwise_correlation(series.values[:, s:s + w], series.mask[:, s:s + w])[iu]
                      for s in starts])
    rng = np.random.default_rng(0) if rng is None else rng
    best = None
    for _ in range(n_init):
        with _warnings.catch_warnings():
            _warnings.simplefilter("ignore")   # empty-cluster notices from kmeans2
            cent, lab = kmeans2(feats, K, minit="++", seed=rng)
        inertia = float(((feats - cent[lab]) ** 2).sum())
        if best is None or inertia < best[0]:
            best = (inertia, lab)
    lab = best[1]
    order = {}
    for v in lab:
        order.setdefault(int(v), len(order))
    for v in range(K):
        order.setdefault(v, len(order))
    lab = np.array([order[int(v)] for v in lab])
    return np.repeat(lab, w)[:T].astype(np.int64)


def _contiguous_path(T, K):
    return np.concatenate([np.full(len(b), k) for k, b in enumerate(np.array_split(np.arange(T), K))]
                          ).astype(np.int64)


def initialize(series: PartialSeries, hyper: Hyperparams, rng=None):
    """Starting parameters, latent factors and imputation.

    Returns
    -------
    params : ModelParams
    latents : LatentFactors
    imputed : array (N, T)
    notes : list of str
    """
    N, T = series.shape
    if T < 2:
        raise ValueError("need at least two timesteps")
    L, K = int(hyper.latent_dim), int(hyper.num_regimes)
    rng = np.random.default_rng(hyper.seed) if rng is None else rng
    imputed, notes = linear_interpolate(series)

    B = np.eye(L) + 0.01 * rng.standard_normal((L, L))
    U = rng.normal(0.0, np.sqrt(1.0 / L), size=(K, N, L))
    if K == 1:
        markov = np.ones((1, 1))
    else:
        markov = np.full((K, K), 0.1 / (K - 1))
        np.fill_diagonal(markov, 0.9)
    params = ModelParams(
        B=B, z0=np.zeros(L), psi0=np.eye(L), sigma_Z=1.0,
        sigma_X=np.ones(K), sigma_S=np.ones(K), sigma_V=np.ones(K),
        mu=np.tile(imputed.mean(axis=1), (K, 1)),
        precision=np.tile(np.eye(N), (K, 1, 1)),
        pi=np.full(K, 1.0 / K), markov=markov,
    )
    if hyper.regime_init == "correlation":
        path = correlation_regime_path(series, K, hyper.init_window, rng)
    else:
        path = _contiguous_path(T, K)
    latents = LatentFactors(
        Z=np.zeros((L, T)), V=np.zeros((K, L, N)), U=U,
        S=np.tile(np.eye(N), (K, 1, 1)), F=RegimePath(path.astype(np.int64), K),
    )
    return params, latents, imputed, notes


def m_step_dynamics(smoothed, path, series: PartialSeries, params: ModelParams, U, S, ctx):
    """Closed-form updates of the latent dynamics and the noise scales.

    ``U`` holds the freshly updated observation matrices and ``ctx`` the
    contextual posteriors of this iteration.  Returns a dict of new values
    and a list of warnings.
    """
    Ez = smoothed.mean_hat
    Ezz = smoothed.second
    L, T = Ez.shape
    K = params.num_regimes
    notes = []

    cross_sum = smoothed.cross[1:].sum(axis=0)
    prev_sum = Ezz[:-1].sum(axis=0)
    try:
        B = np.linalg.solve(symmetrize(prev_sum), cross_sum.T).T
    except np.linalg.LinAlgError:
        B = params.B.copy()
        notes.append("latent second moment singular; transition matrix kept")
    z0 = Ez[:, 0].copy()
    psi0 = symmetrize(Ezz[0] - np.outer(z0, z0))
    w, V = np.linalg.eigh(psi0)
    psi0 = symmetrize((V * np.clip(w, 0.0, None)) @ V.T)
    # standard ML form: tr(sum E[z_t z_t'] - B sum E[z_{t-1} z_t'])
    sigma_Z2 = np.trace(Ezz[1:].sum(axis=0) - B @ cross_sum.T) / ((T - 1) * L)

    path = np.asarray(path)
    W = series.mask.astype(float)
    sigma_X2 = params.sigma_X ** 2
    sigma_S2 = params.sigma_S ** 2
    sigma_V2 = params.sigma_V ** 2
    for k in range(K):
        sel = path == k
        n_obs = W[:, sel].sum()
        if n_obs > 0:
            Wk, Xk = W[:, sel], series.values[:, sel]
            Uk = U[k]
            D2 = np.einsum("it,tab->iab", Wk, Ezz[sel], optimize=True)
            quad = np.einsum("ia,iab,ib->", Uk, D2, Uk, optimize=True)
            xx = (Wk * Xk * Xk).sum()
            cross = (Wk * Xk * (Uk @ Ez[:, sel])).sum()
            sigma_X2[k] = (quad + xx - 2.0 * cross) / n_obs
        else:
            notes.append(f"regime {k} has no observed entries; sigma_X kept")
        N = S[k].shape[0]
        Ev = ctx[k].mean
        Evv = ctx[k].second_sum()
        sigma_S2[k] = ((S[k] * S[k]).sum() - 2.0 * (S[k] * (U[k] @ Ev)).sum()
                       + np.trace(U[k] @ Evv @ U[k].T)) / N ** 2
        sigma_V2[k] = np.trace(Evv) / (N * L)

    floor = lambda v: np.maximum(v, VAR_FLOOR)
    return {
        "B": B, "z0": z0, "psi0": psi0,
        "sigma_Z": float(np.sqrt(floor(sigma_Z2))),
        "sigma_X": np.sqrt(floor(sigma_X2)),
        "sigma_S": np.sqrt(floor(sigma_S2)),
        "sigma_V": np.sqrt(floor(sigma_V2)),
    }, notes


def m_step_regimes(path, num_regimes, eps=MARKOV_EPS):
    """Initial distribution and column-stochastic transition matrix from a path.

    Counts are smoothed by ``eps`` so no transition becomes impossible.
    """
    path = np.asarray(path)
    K = int(num_regimes)
    pi = np.full(K, eps)
    pi[path[0]] += 1.0
    pi /= pi.sum()
    counts = np.zeros((K, K))
    np.add.at(counts, (path[1:], path[:-1]), 1.0)
    counts += eps
    return pi, counts / counts.sum(axis=0, keepdims=True)


def impute(series: PartialSeries, path, U, mean_hat):
    """Observed entries pass through; missing ones come from U[F_t] z_t."""
    U = np.asarray(U)
    path = np.asarray(path)
    recon = np.einsum("tia,at->it", U[path], mean_hat, optimize=True)
    return np.where(series.mask, series.values, recon)


def m_step_networks(imputed, path, lam, cfg=None, prev_mu=None, prev_precision=None, rho=None):
    """Per-regime empirical mean and graphical-lasso precision of the imputation.

    The penalty enters as ``lam * ||P||_od,1`` against the summed (not
    averaged) log-likelihood of the regime's columns, hence the solver sees
    ``2 * lam / M`` for a regime with ``M`` columns.  Empty regimes keep
    their previous network.  Each solve is warm-started from
    ``prev_precision`` and the per-regime ADMM penalty ``rho``.

    Returns
    -------
    mu, precision, notes, rho
    """
    imputed = np.asarray(imputed)
    path = np.asarray(path)
    N = imputed.shape[0]
    K = len(prev_mu) if prev_mu is not None else int(path.max()) + 1
    mu = np.zeros((K, N)) if prev_mu is None else np.array(prev_mu, dtype=float)
    prec = np.tile(np.eye(N), (K, 1, 1)) if prev_precision is None else np.array(prev_precision, dtype=float)
    rho = np.full(K, (cfg or GlassoConfig()).rho) if rho is None else np.array(rho, dtype=float)
    notes = []
    for k in range(K):
        cols = imputed[:, path == k]
        M = cols.shape[1]
        if M == 0:
            notes.append(f"regime {k} is empty; network kept")
            continue
        mean, cov = empirical_moments(cols.T)
        init = None if prev_precision is None else prev_precision[k]
        mu[k] = mean
        prec[k], info = graphical_lasso(cov, 2.0 * lam / M, cfg, init=init, return_info=True,
                                        rho=None if init is None else rho[k])
        rho[k] = info["rho"]
    return mu, prec, notes, rho


def contextual_log_marginal(S_k, U_k, sigma_S, sigma_V):
    """log p(S_k | U_k) with the contextual factors integrated out."""
    N = U_k.shape[0]
    C = sigma_V ** 2 * U_k @ U_k.T + sigma_S ** 2 * np.eye(N)
    chol = np.linalg.cholesky(symmetrize(C))
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    Y = np.linalg.solve(chol, S_k)
    return -0.5 * (Y * Y).sum() - 0.5 * N * logdet - 0.5 * N * N * LOG_2PI


def penalized_objective(viterbi_cost, params: ModelParams, U, S, lam):
    """Objective tracked for convergence (higher is better).

    The Viterbi cost already holds the observed-data, network and switching
    terms with latent states integrated out; the contextual term integrates
    out the contextual factors.
    """
    ctx = sum(contextual_log_marginal(S[k], U[k], params.sigma_S[k], params.sigma_V[k])
              for k in range(params.num_regimes))
    penalty = lam * sum(offdiag_l1(P) for P in params.precision)
    return -viterbi_cost + ctx - penalty


def _fit_once(series, hyper, rng, glasso_cfg, callback, restart):
    K = int(hyper.num_regimes)
    params, latents, imputed, notes = initialize(series, hyper, rng)
    init_path = latents.F.assignments
    # the correlation start is only useful if the first E-step follows it
    warmup = 1 if (K > 1 and hyper.regime_init == "correlation") else 0
    notes = list(notes)
    U = np.array(latents.U)
    S = np.array(latents.S)
    empty_streak = np.zeros(K, dtype=int)
    admm_rho = None
    glasso_cfg = glasso_cfg or GlassoConfig(max_admm_iter=EM_ADMM_ITER)
    trace = []
    best = None
    converged = False

    for it in range(int(hyper.max_iter)):
        try:
            vit, sm = e_step(series, params, U, imputed, init_path if it < warmup else None)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise FloatingPointError(f"E-step failed at iteration {it}: {exc}") from exc
        path = vit.path.assignments
        ctx = [infer_contextual_factors(S[k], U[k], params.sigma_S[k], params.sigma_V[k]) for k in range(K)]
        J = penalized_objective(vit.total_cost, params, U, S, hyper.lam)
        if not np.isfinite(J):
            raise FloatingPointError(f"objective is not finite at iteration {it}")
        trace.append(J)
        logger.debug("iteration %d objective %.6f counts %s", it, J, np.bincount(path, minlength=K))
        if callback is not None:
            callback(it, {"params": params, "U": U, "S": S, "smoothed": sm, "path": vit.path,
                          "objective": J, "imputed": imputed})
        if best is None or J > best[0]:
            best = (J, it, params, U.copy(), S.copy(), ctx, vit.path, sm)
        if it > 0 and abs(J - trace[-2]) <= hyper.tol * abs(trace[-2]):
            converged = True
            break
        if it == int(hyper.max_iter) - 1:
            break

        counts = np.bincount(path, minlength=K)
        U_new = U.copy()
        for k in range(K):
            if counts[k] == 0:
                continue
            U_new[k], flagged = update_observation_matrix(
                k, hyper.alpha, series, sm, path, ctx[k], S[k],
                params.sigma_X[k], params.sigma_S[k], U_prev=U[k])
            if flagged:
                notes.append(f"iteration {it}, regime {k}: rows {flagged} kept (singular update)")
        dyn, dn = m_step_dynamics(sm, path, series, params, U_new, S, ctx)
        notes.extend(f"iteration {it}: {n}" for n in dn)
        for name in ("sigma_X", "sigma_S", "sigma_V"):
            dyn[name] = np.where(counts > 0, dyn[name], getattr(params, name))
        pi, markov = m_step_regimes(path, K)
        imputed = impute(series, path, U_new, sm.mean_hat)
        mu, prec, _, admm_rho = m_step_networks(imputed, path, hyper.lam, glasso_cfg, params.mu,
                                                 params.precision, admm_rho)
        S_new = np.stack([partial_correlation_matrix(prec[k]) if counts[k] else S[k] for k in range(K)])

        empty_streak = np.where(counts == 0, empty_streak + 1, 0)
        for k in np.flatnonzero(empty_streak >= EMPTY_RESEED_AFTER):
            donor = int(np.argmax(counts))
            U_new[k] = U_new[donor] + 0.1 * U_new[donor].std() * rng.standard_normal(U_new[donor].shape)
            mu[k], prec[k], S_new[k] = mu[donor], prec[donor], S_new[donor]
            for name in ("sigma_X", "sigma_S", "sigma_V"):
                dyn[name][k] = dyn[name][donor]
            empty_streak[k] = 0
            notes.append(f"iteration {it}: regime {k} re-seeded from regime {donor}")

        U, S = U_new, S_new
        params = ModelParams(mu=mu, precision=prec, pi=pi, markov=markov, **dyn)

    J, best_it, params, U, S, ctx, path, sm = best
    imputed_best = impute(series, path.assignments, U, sm.mean_hat)
    V = np.stack([c.mean for c in ctx])
    latents = LatentFactors(Z=sm.mean_hat, V=V, U=U, S=S, F=path)
    report = FitReport(
        iterations=len(trace), objective_trace=tuple(trace), converged=converged,
        regime_counts=tuple(int(c) for c in path.counts()), warnings=tuple(notes),
        best_iteration=best_it, restart=restart,
    )
    return FitResult(params=params, latents=latents, smoothed=sm, imputed=imputed_best,
                     report=report, series=series)


def fit(series: PartialSeries, hyper: Hyperparams = None, glasso_cfg: GlassoConfig = None,
        callback=None) -> FitResult:
    """Fit the switching network model and impute the missing entries.

    Parameters
    ----------
    series : PartialSeries
    hyper : Hyperparams, optional
    glasso_cfg : GlassoConfig, optional
    callback : callable, optional
        Called as ``callback(iteration, info)`` after every E-step with the
        current parameters, observation matrices, contextual matrices,
        smoothed posterior, path and objective.

    Returns
    -------
    FitResult
        The iterate with the highest objective seen (best over restarts).
    """
    hyper = hyper or Hyperparams()
    if series.n_timesteps < 2:
        raise ValueError("need at least two timesteps")
    best = None
    for r in range(int(hyper.n_restarts)):
        rng = np.random.default_rng(hyper.seed + r)
        res = _fit_once(series, hyper, rng, glasso_cfg, callback, r)
        if best is None or max(res.report.objective_trace) > max(best.report.objective_trace):
            best = res
    for w in best.report.warnings:
        if "no observed values" in w:
            _warnings.warn(w, RuntimeWarning, stacklevel=2)
    return best


def sweep_num_regimes(series: PartialSeries, hyper: Hyperparams, candidates=(1, 2, 3),
                      holdout_rate=0.1, seed=0):
    """Refit for each regime count and score on an extra held-out mask.

    Returns a dict mapping each K to its validation RMSE, and the best K.
    """
    from dataclasses import replace

    from .evaluation import rmse
    from .synth import add_holdout_mask

    train, holdout = add_holdout_mask(series, holdout_rate, seed=seed)
    scores = {}
    for K in candidates:
        res = fit(train, replace(hyper, num_regimes=int(K)))
        scores[int(K)] = rmse(series.values, res.imputed, holdout)
    best_K = min(scores, key=scores.get)
    return scores, best_K
