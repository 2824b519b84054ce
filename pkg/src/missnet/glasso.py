"""Sparse inverse-covariance estimation (graphical lasso) by ADMM."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import symmetrize

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GlassoConfig:
    rho: float = 1.0
    abs_tol: float = 1e-5
    rel_tol: float = 1e-4
    max_admm_iter: int = 500
    adaptive_rho: bool = True   # residual balancing, starting from ``rho``

    def __post_init__(self):
        if not (self.rho > 0 and self.abs_tol > 0 and self.rel_tol > 0 and self.max_admm_iter > 0):
            raise ValueError("rho, tolerances and max_admm_iter must be positive")


def empirical_moments(rows):
    """Mean and biased (1/M) covariance of a set of N-vectors.

    Parameters
    ----------
    rows : array (M, N)
        One sample per row.
    """
    X = np.atleast_2d(np.asarray(rows, dtype=float))
    if X.size == 0 or X.shape[0] == 0:
        raise ValueError("empty regime")
    mean = X.mean(axis=0)
    D = X - mean
    return mean, symmetrize(D.T @ D / X.shape[0])


def _soft_threshold_offdiag(A, thresh):
    out = np.sign(A) * np.maximum(np.abs(A) - thresh, 0.0)
    np.fill_diagonal(out, np.diag(A))
    return out


def _regularized_inverse(cov):
    N = cov.shape[0]
    eps = max(1e-6 * np.trace(cov) / N, 1e-8)
    return symmetrize(np.linalg.inv(cov + eps * np.eye(N)))


def graphical_lasso(cov, lam, cfg=None, init=None, return_info=False, rho=None):
    """Solve ``min -log det P + tr(cov P) + lam * ||P||_od,1`` over SPD ``P``.

    Only off-diagonal entries are penalized. With ``lam == 0`` (or a
    covariance with zero trace) the ADMM loop is skipped and a slightly
    regularized inverse is returned.

    Parameters
    ----------
    cov : array (N, N)
        Empirical covariance, symmetric PSD.
    lam : float
        Off-diagonal l1 weight.
    cfg : GlassoConfig, optional
    init : array (N, N), optional
        Warm start; the scaled dual variable is reconstructed from it so a
        previous solution for the same ``cov`` is already a fixed point.
    return_info : bool
        Also return a dict with ``n_iter``, ``converged``, the final
        residual norms and the final penalty parameter ``rho``.
    rho : float, optional
        Starting penalty parameter; overrides ``cfg.rho``.  Passing the
        ``rho`` reported by a previous solve together with ``init`` resumes
        that solve.
    """
    cfg = cfg or GlassoConfig()
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or cov.shape[0] == 0:
        raise ValueError("cov must be a non-empty square matrix")
    if not np.isfinite(cov).all():
        raise ValueError("cov contains non-finite entries")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    cov = symmetrize(cov)
    N = cov.shape[0]

    if lam == 0 or np.trace(cov) <= 0 or np.diag(cov).min() <= 0:
        P = _regularized_inverse(cov)
        info = {"n_iter": 0, "converged": True, "r_norm": 0.0, "s_norm": 0.0, "rho": cfg.rho}
        return (P, info) if return_info else P

    rho = float(cfg.rho if rho is None else rho)
    if not rho > 0:
        raise ValueError("rho must be positive")
    if init is not None:
        Z = symmetrize(np.asarray(init, dtype=float))
        try:
            U = (np.linalg.inv(Z) - cov) / rho
        except np.linalg.LinAlgError:
            Z, U = np.eye(N), np.zeros((N, N))
    else:
        Z = np.diag(1.0 / np.diag(cov))
        U = np.zeros((N, N))

    converged = False
    r_norm = s_norm = np.inf
    n_iter = 0
    for n_iter in range(1, cfg.max_admm_iter + 1):
        w, Q = np.linalg.eigh(rho * (Z - U) - cov)
        d = (w + np.sqrt(w * w + 4.0 * rho)) / (2.0 * rho)
        X = (Q * d) @ Q.T
        Z_old = Z
        Z = _soft_threshold_offdiag(X + U, lam / rho)
        U = U + X - Z

        r_norm = np.linalg.norm(X - Z)
        s_norm = rho * np.linalg.norm(Z - Z_old)
        eps_pri = N * cfg.abs_tol + cfg.rel_tol * max(np.linalg.norm(X), np.linalg.norm(Z))
        eps_dual = N * cfg.abs_tol + cfg.rel_tol * rho * np.linalg.norm(U)
        if r_norm <= eps_pri and s_norm <= eps_dual:
            converged = True
            break
        if cfg.adaptive_rho:
            # keep primal and dual residuals within a factor 10 of each other;
            # U is the scaled dual, so it is rescaled along with rho
            if r_norm > 10.0 * s_norm:
                rho *= 2.0
                U = U / 2.0
            elif s_norm > 10.0 * r_norm:
                rho /= 2.0
                U = U * 2.0

    P = symmetrize(Z)
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        P = symmetrize(X)
    info = {"n_iter": n_iter, "converged": converged, "r_norm": float(r_norm),
            "s_norm": float(s_norm), "rho": rho}
    return (P, info) if return_info else P


def logdet_pd(P):
    """log det of a symmetric PD matrix via Cholesky; raises if not PD."""
    try:
        C = np.linalg.cholesky(symmetrize(np.asarray(P, dtype=float)))
    except np.linalg.LinAlgError:
        raise ValueError("precision is not positive definite") from None
    return 2.0 * np.log(np.diagonal(C, axis1=-2, axis2=-1)).sum(-1)


def gaussian_ll(x, mean, precision):
    """Gaussian log density of ``x`` under mean and precision matrix.

    ``x`` may also be an (M, N) stack, giving M log densities.
    """
    x = np.asarray(x, dtype=float)
    P = np.asarray(precision, dtype=float)
    N = P.shape[0]
    d = x - np.asarray(mean, dtype=float)
    quad = np.einsum("...i,ij,...j->...", d, P, d)
    return -0.5 * quad + 0.5 * logdet_pd(P) - 0.5 * N * LOG_2PI


def offdiag_l1(P):
    P = np.asarray(P)
    return np.abs(P).sum() - np.abs(np.diag(P)).sum()
