"""Domain types shared by every part of the imputation pipeline.

All arrays stored on these containers are copied on construction and marked
read-only, so a fitted model can be shared without defensive copies.
Internally the series layout is ``N features x T timesteps``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def safe_cholesky(M: np.ndarray, max_tries: int = 8) -> np.ndarray:
    """Lower Cholesky factor of ``M``, adding diagonal jitter on failure.

    The first jitter is ``1e-9 * trace(M) / n`` and grows tenfold per retry.
    Works on stacks of matrices.
    """
    M = symmetrize(M)
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        pass
    n = M.shape[-1]
    scale = np.abs(np.trace(M, axis1=-2, axis2=-1)) / n
    scale = np.where(scale > 0, scale, 1.0)
    eye = np.eye(n)
    eps = 1e-9 * np.asarray(scale)[..., None, None]
    for _ in range(max_tries):
        try:
            return np.linalg.cholesky(M + eps * eye)
        except np.linalg.LinAlgError:
            eps = eps * 10.0
    raise np.linalg.LinAlgError("matrix is not positive definite even after jitter")


@dataclass(frozen=True)
class PartialSeries:
    """A multivariate series with missing entries.

    Parameters
    ----------
    values : array (N, T)
        Observed values. Entries where ``mask == 0`` are ignored and stored
        as 0.0.
    mask : array (N, T)
        1 where observed, 0 where missing.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        mask = np.array(self.mask)
        if values.ndim != 2 or mask.shape != values.shape:
            raise ValueError(
                f"values and mask must be 2-D with identical shape, got {values.shape} and {mask.shape}"
            )
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("mask must be binary")
        N, T = values.shape
        if N < 1 or T < 2:
            raise ValueError(f"need N >= 1 and T >= 2, got N={N}, T={T}")
        mask = mask.astype(bool)
        values = np.where(mask, values, 0.0)
        if not np.isfinite(values).all():
            raise ValueError("observed values must be finite")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask, dtype=bool))

    @classmethod
    def from_array(cls, X) -> "PartialSeries":
        """Build from an (N, T) array that marks missing entries with NaN."""
        X = np.asarray(X, dtype=float)
        mask = ~np.isnan(X)
        return cls(np.nan_to_num(X, nan=0.0), mask)

    @property
    def n_features(self) -> int:
        return self.values.shape[0]

    @property
    def n_timesteps(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    @property
    def missing_rate(self) -> float:
        return 1.0 - self.mask.mean()

    def to_nan_array(self) -> np.ndarray:
        return np.where(self.mask, self.values, np.nan)


def observed_slice(series: PartialSeries, t: int):
    """Indices of features observed at ``t`` (ascending) and their values."""
    if not 0 <= t < series.n_timesteps:
        raise IndexError(f"timestep {t} out of range [0, {series.n_timesteps})")
    idx = np.flatnonzero(series.mask[:, t])
    return idx, series.values[idx, t].copy()


@dataclass(frozen=True)
class Hyperparams:
    """User-facing settings of a fit.

    ``regime_init`` picks the starting regime path: ``"correlation"``
    clusters windows of ``init_window`` steps by their correlation pattern
    (observed pairs only) and conditions the first E-step on the result;
    ``"contiguous"`` uses equal contiguous blocks and lets the first
    decoding run freely.
    """

    latent_dim: int = 10
    num_regimes: int = 1
    alpha: float = 0.5
    lam: float = 1.0
    max_iter: int = 50
    tol: float = 1e-4
    seed: int = 0
    n_restarts: int = 1
    regime_init: str = "correlation"
    init_window: int = 40

    def __post_init__(self):
        if int(self.latent_dim) < 1:
            raise ValueError("latent_dim must be >= 1")
        if int(self.num_regimes) < 1:
            raise ValueError("num_regimes must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if int(self.n_restarts) < 1:
            raise ValueError("n_restarts must be >= 1")
        if self.regime_init not in ("correlation", "contiguous"):
            raise ValueError("regime_init must be 'correlation' or 'contiguous'")
        if int(self.init_window) < 2:
            raise ValueError("init_window must be >= 2")


@dataclass(frozen=True)
class Network:
    """Sparse Gaussian network of one regime: precision matrix and mean."""

    precision: np.ndarray
    mean: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.precision, dtype=float)
        mean = np.asarray(self.mean, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or mean.shape != (P.shape[0],):
            raise ValueError("precision must be (N, N) and mean (N,)")
        if not np.allclose(P, P.T, atol=1e-10, rtol=0):
            raise ValueError("precision must be symmetric")
        P = symmetrize(P)
        if np.linalg.eigvalsh(P)[0] <= 0:
            raise ValueError("precision must be positive definite")
        object.__setattr__(self, "precision", _frozen(P))
        object.__setattr__(self, "mean", _frozen(mean))


@dataclass(frozen=True)
class RegimePath:
    assignments: np.ndarray
    num_regimes: int

    def __post_init__(self):
        a = np.asarray(self.assignments)
        if a.ndim != 1 or (a.size and not np.issubdtype(a.dtype, np.integer)):
            raise ValueError("assignments must be a 1-D integer vector")
        if a.size and (a.min() < 0 or a.max() >= self.num_regimes):
            raise ValueError("assignment outside [0, K)")
        object.__setattr__(self, "assignments", _frozen(a, dtype=np.int64))

    def __len__(self):
        return self.assignments.size

    def one_hot(self) -> np.ndarray:
        """(K, T) indicator export of the assignments."""
        F = np.zeros((self.num_regimes, len(self)))
        F[self.assignments, np.arange(len(self))] = 1.0
        return F

    def counts(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.num_regimes)


@dataclass(frozen=True)
class ModelParams:
    """Learned parameters of a fitted model.

    ``markov[k, l]`` is the probability of moving from regime ``l`` to
    regime ``k``, so columns sum to one.
    """

    B: np.ndarray
    z0: np.ndarray
    psi0: np.ndarray
    sigma_Z: float
    sigma_X: np.ndarray
    sigma_S: np.ndarray
    sigma_V: np.ndarray
    mu: np.ndarray          # (K, N)
    precision: np.ndarray   # (K, N, N)
    pi: np.ndarray
    markov: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        L = B.shape[0]
        if B.shape != (L, L):
            raise ValueError("B must be square")
        if np.shape(self.z0) != (L,) or np.shape(self.psi0) != (L, L):
            raise ValueError("z0 / psi0 dimensions do not match B")
        sx, ss, sv = (np.atleast_1d(np.asarray(s, dtype=float)) for s in
                      (self.sigma_X, self.sigma_S, self.sigma_V))
        K = sx.size
        if ss.size != K or sv.size != K:
            raise ValueError("per-regime sigmas must all have K entries")
        if not (self.sigma_Z > 0 and (sx > 0).all() and (ss > 0).all() and (sv > 0).all()):
            raise ValueError("all sigmas must be positive")
        mu = np.asarray(self.mu, dtype=float)
        prec = np.asarray(self.precision, dtype=float)
        if mu.ndim != 2 or mu.shape[0] != K:
            raise ValueError("mu must be (K, N)")
        N = mu.shape[1]
        if prec.shape != (K, N, N):
            raise ValueError("precision must be (K, N, N)")
        pi = np.asarray(self.pi, dtype=float)
        markov = np.asarray(self.markov, dtype=float)
        if pi.shape != (K,) or markov.shape != (K, K):
            raise ValueError("pi must be (K,) and markov (K, K)")
        if abs(pi.sum() - 1) > 1e-9 or (pi < 0).any():
            raise ValueError("pi must lie on the simplex")
        if np.abs(markov.sum(axis=0) - 1).max() > 1e-9 or (markov < 0).any():
            raise ValueError("markov columns must sum to one")
        try:
            np.linalg.cholesky(symmetrize(prec))
        except np.linalg.LinAlgError:
            raise ValueError("every precision matrix must be positive definite") from None
        psi0 = symmetrize(np.asarray(self.psi0, dtype=float))
        if np.linalg.eigvalsh(psi0)[0] < -1e-8 * max(1.0, np.trace(psi0)):
            raise ValueError("psi0 must be positive semidefinite")
        for name, val in (("B", B), ("z0", self.z0), ("psi0", psi0), ("sigma_X", sx),
                          ("sigma_S", ss), ("sigma_V", sv), ("mu", mu),
                          ("precision", symmetrize(prec)), ("pi", pi), ("markov", markov)):
            object.__setattr__(self, name, _frozen(val))
        object.__setattr__(self, "sigma_Z", float(self.sigma_Z))

    @property
    def latent_dim(self) -> int:
        return self.B.shape[0]

    @property
    def num_regimes(self) -> int:
        return self.sigma_X.size

    @property
    def n_features(self) -> int:
        return self.mu.shape[1]

    @property
    def networks(self) -> tuple:
        return tuple(Network(self.precision[k], self.mu[k]) for k in range(self.num_regimes))


@dataclass(frozen=True)
class LatentFactors:
    Z: np.ndarray   # (L, T)
    V: np.ndarray   # (K, L, N)
    U: np.ndarray   # (K, N, L)
    S: np.ndarray   # (K, N, N)
    F: RegimePath

    def __post_init__(self):
        Z, V, U, S = (np.asarray(a, dtype=float) for a in (self.Z, self.V, self.U, self.S))
        K, N, L = U.shape
        if Z.shape != (L, len(self.F)) or V.shape != (K, L, N) or S.shape != (K, N, N):
            raise ValueError("latent factor dimensions are inconsistent")
        diag = np.diagonal(S, axis1=1, axis2=2)
        if not (diag == 1.0).all() or np.abs(S).max() > 1.0 + 1e-12:
            raise ValueError("contextual matrices need unit diagonal and entries in [-1, 1]")
        for name, val in (("Z", Z), ("V", V), ("U", U), ("S", S)):
            object.__setattr__(self, name, _frozen(val))


@dataclass(frozen=True)
class SmoothedPosterior:
    """Smoothed latent moments. ``cross[t]`` is E[z_t z_{t-1}'] (zero at t=0)."""

    mean_hat: np.ndarray   # (L, T)
    cov_hat: np.ndarray    # (T, L, L)
    cross: np.ndarray      # (T, L, L)
    second: np.ndarray     # (T, L, L)

    def __post_init__(self):
        L, T = np.shape(self.mean_hat)
        for name in ("cov_hat", "cross", "second"):
            if np.shape(getattr(self, name)) != (T, L, L):
                raise ValueError(f"{name} must be (T, L, L)")
        for name in ("mean_hat", "cov_hat", "cross", "second"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))


@dataclass(frozen=True)
class FitReport:
    iterations: int
    objective_trace: tuple
    converged: bool
    regime_counts: tuple
    warnings: tuple = ()
    best_iteration: int = 0
    restart: int = 0

    def __post_init__(self):
        if len(self.objective_trace) != self.iterations:
            raise ValueError("objective_trace length must equal iterations")

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "objective_trace": [float(v) for v in self.objective_trace],
            "converged": bool(self.converged),
            "regime_counts": [int(c) for c in self.regime_counts],
            "warnings": list(self.warnings),
            "best_iteration": self.best_iteration,
            "restart": self.restart,
        }


@dataclass(frozen=True)
class FitResult:
    params: ModelParams
    latents: LatentFactors
    smoothed: SmoothedPosterior
    imputed: np.ndarray
    report: FitReport
    series: PartialSeries = field(repr=False, default=None)

    def __post_init__(self):
        imputed = _frozen(self.imputed)
        if self.series is not None:
            m = self.series.mask
            if imputed.shape != m.shape or not np.array_equal(imputed[m], self.series.values[m]):
                raise ValueError("imputed values must reproduce every observed entry")
        object.__setattr__(self, "imputed", imputed)

    @property
    def path(self) -> RegimePath:
        return self.latents.F
