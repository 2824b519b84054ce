"""Network side of the model: contextual latent factors, observation-matrix
update and the partial-correlation contextual matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import symmetrize


@dataclass(frozen=True)
class ContextualPosterior:
    mean: np.ndarray   # (L, N), column j is E[v_j]
    cov: np.ndarray    # (L, L), shared by every column

    @property
    def second(self) -> np.ndarray:
        """(N, L, L) stack of E[v_j v_j']."""
        return self.cov[None] + self.mean.T[:, :, None] * self.mean.T[:, None, :]

    def second_sum(self) -> np.ndarray:
        """sum_j E[v_j v_j'] without materializing the stack."""
        N = self.mean.shape[1]
        return N * self.cov + self.mean @ self.mean.T


def infer_contextual_factors(S_k, U_k, sigma_S, sigma_V) -> ContextualPosterior:
    """Gaussian posterior of each column's contextual factor given ``S_k``."""
    U_k = np.asarray(U_k, dtype=float)
    L = U_k.shape[1]
    M = U_k.T @ U_k + (sigma_S ** 2 / sigma_V ** 2) * np.eye(L)
    M_inv = symmetrize(np.linalg.inv(M))
    mean = M_inv @ U_k.T @ np.asarray(S_k, dtype=float)
    return ContextualPosterior(mean=mean, cov=sigma_S ** 2 * M_inv)


def update_observation_matrix(k, alpha, series, smoothed, path, ctx: ContextualPosterior,
                              S_k, sigma_X_k, sigma_S_k, U_prev=None):
    """Row-wise update of regime ``k``'s observation matrix.

    Each row mixes the contextual (network) term with weight ``alpha`` and
    the observed-data term over timesteps assigned to ``k`` with weight
    ``1 - alpha``.

    Returns
    -------
    U_k : array (N, L)
    flagged : list of int
        Rows whose normal equations stayed singular; these keep ``U_prev``.
    """
    assigned = np.asarray(path) == k
    W = series.mask[:, assigned].astype(float)
    X = series.values[:, assigned]
    Ez = smoothed.mean_hat[:, assigned]
    Ezz = smoothed.second[assigned]
    N = series.n_features
    L = Ez.shape[0]

    ctx_w = alpha / sigma_S_k ** 2
    data_w = (1.0 - alpha) / sigma_X_k ** 2
    A1 = ctx_w * (np.asarray(S_k) @ ctx.mean.T) + data_w * ((W * X) @ Ez.T)
    A2 = ctx_w * ctx.second_sum()[None] + data_w * np.einsum("it,tab->iab", W, Ezz, optimize=True)
    A2 = symmetrize(A2)

    U_new = np.empty((N, L))
    flagged = []
    scale = np.abs(np.trace(A2, axis1=1, axis2=2)) / L
    for i in range(N):
        if not scale[i] > 0:
            # no information at all about this row
            flagged.append(i)
            U_new[i] = 0.0 if U_prev is None else np.asarray(U_prev)[i]
            continue
        jitter = 0.0
        for _ in range(4):
            try:
                U_new[i] = np.linalg.solve(A2[i] + jitter * np.eye(L), A1[i])
                if np.isfinite(U_new[i]).all() and np.linalg.cond(A2[i] + jitter * np.eye(L)) < 1e14:
                    break
            except np.linalg.LinAlgError:
                pass
            jitter = 1e-9 * scale[i] if jitter == 0 else jitter * 100
        else:
            flagged.append(i)
            U_new[i] = 0.0 if U_prev is None else np.asarray(U_prev)[i]
    return U_new, flagged


def partial_correlation_matrix(precision):
    """Partial correlations implied by a precision matrix, with unit diagonal."""
    P = np.asarray(precision, dtype=float)
    d = np.diag(P)
    if (d <= 0).any():
        raise ValueError("precision has a nonpositive diagonal entry")
    r = np.sqrt(d)
    S = -P / np.outer(r, r)
    S = np.clip(symmetrize(S), -1.0, 1.0)
    np.fill_diagonal(S, 1.0)
    return S
