"""Synthetic switching series, missing-block injection and z-scoring."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import PartialSeries, RegimePath

RNG_ALGORITHM = "numpy.random.Generator(PCG64)"


@dataclass(frozen=True)
class SynthSpec:
    T: int = 1000
    N: int = 50
    L: int = 10
    K: int | None = None
    switch_period: int = 200
    seed: int = 0
    noise_is_variance: bool = True
    trend_time: str = "normalized"

    def __post_init__(self):
        if self.T < 2 or self.N < 1 or self.L < 1 or self.switch_period < 1:
            raise ValueError(f"invalid synthetic spec: {self}")
        if self.trend_time not in ("normalized", "index"):
            raise ValueError("trend_time must be 'normalized' or 'index'")


@dataclass(frozen=True)
class SynthDataset:
    clean: np.ndarray         # (N, T)
    latent: np.ndarray        # (L, T)
    obs_matrices: np.ndarray  # (K, N, L)
    true_path: RegimePath
    metadata: dict = field(default_factory=dict)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def generate_latent(spec: SynthSpec, rng=None, trend=True, noise=True):
    """Latent rows made of a sinusoid, a linear trend and Gaussian noise.

    Each row draws its own frequency ``beta ~ U(1, 20)``, slope magnitude
    ``|gamma| ~ U(0.3, 1)`` with a random sign, and an i.i.d. noise sequence
    whose second parameter 0.3 is a variance unless
    ``spec.noise_is_variance`` is False.
    """
    rng = _rng(spec.seed if rng is None else rng)
    L, T = spec.L, spec.T
    t = np.arange(1, T + 1)
    beta = rng.uniform(1.0, 20.0, size=L)
    gamma = rng.uniform(0.3, 1.0, size=L) * rng.choice([-1.0, 1.0], size=L)
    scale = np.sqrt(0.3) if spec.noise_is_variance else 0.3
    eta = rng.normal(0.0, scale, size=(L, T))
    Z = np.sin(2.0 * np.pi * beta[:, None] / T * t[None, :])
    if trend:
        tt = t / T if spec.trend_time == "normalized" else t
        Z = Z + gamma[:, None] * tt[None, :]
    if noise:
        Z = Z + eta
    return Z


def generate_observation_matrix(N, L, rng=None, p=0.2):
    """Sparse random N x L weight matrix.

    Each entry is kept with probability ``p`` and then drawn uniformly from
    [-0.6, -0.3] U [0.3, 0.6].
    """
    rng = _rng(rng)
    keep = rng.random((N, L)) < p
    mag = rng.uniform(0.3, 0.6, size=(N, L))
    sign = rng.choice([-1.0, 1.0], size=(N, L))
    return np.where(keep, mag * sign, 0.0)


def generate_dataset(spec: SynthSpec, pattern="A") -> SynthDataset:
    """PatternA (one regime) or PatternB (two regimes alternating every
    ``switch_period`` steps) built on one shared latent series."""
    pattern = str(pattern).upper()
    if pattern not in ("A", "B"):
        raise ValueError(f"unknown pattern {pattern!r}")
    K = {"A": 1, "B": 2}[pattern]
    if spec.K is not None and spec.K != K:
        raise ValueError(f"pattern {pattern} needs K={K}, got K={spec.K}")
    rng = np.random.default_rng(spec.seed)
    Z = generate_latent(spec, rng)
    U = np.stack([generate_observation_matrix(spec.N, spec.L, rng) for _ in range(K)])
    path = (np.arange(spec.T) // spec.switch_period) % K
    clean = np.einsum("tia,at->it", U[path], Z)
    meta = {"pattern": pattern, "K": K, "rng": RNG_ALGORITHM, **asdict(spec)}
    meta["K"] = K
    return SynthDataset(clean=clean, latent=Z, obs_matrices=U,
                        true_path=RegimePath(path.astype(np.int64), K), metadata=meta)


def _place_blocks(N, T, target_count, max_block_frac, rng, eligible=None):
    """Hide random single-feature time blocks until ``target_count`` cells are hidden.

    Only cells where ``eligible`` is True count and get hidden.
    """
    hidden = np.zeros((N, T), dtype=bool)
    max_len = max(1, int(np.floor(max_block_frac * T)))
    n_hidden = 0
    available = N * T if eligible is None else int(eligible.sum())
    target_count = min(target_count, available)
    while n_hidden < target_count:
        i = rng.integers(N)
        t0 = rng.integers(T)
        length = rng.integers(1, max_len + 1)
        block = slice(t0, min(T, t0 + length))
        new = ~hidden[i, block]
        if eligible is not None:
            new &= eligible[i, block]
        hidden[i, block] |= new
        n_hidden += int(new.sum())
    return hidden


def inject_missing(clean, target_rate, max_block_frac=0.05, seed=0) -> PartialSeries:
    """Mask random blocks of one feature each until ``target_rate`` is reached.

    Block lengths are uniform on ``[1, floor(max_block_frac * T)]``; blocks
    may overlap, so runs longer than one block occur.
    """
    if not 0.0 < target_rate < 1.0:
        raise ValueError("target_rate must lie in (0, 1)")
    clean = np.asarray(clean, dtype=float)
    N, T = clean.shape
    rng = _rng(seed)
    hidden = _place_blocks(N, T, int(np.ceil(target_rate * N * T)), max_block_frac, rng)
    return PartialSeries(np.where(hidden, 0.0, clean), ~hidden)


def add_holdout_mask(series: PartialSeries, rate=0.1, max_block_frac=0.05, seed=0):
    """Hide an extra ``rate`` of all cells, taken from currently observed ones.

    Returns the reduced series and the boolean mask of newly hidden cells.
    """
    N, T = series.shape
    rng = _rng(seed)
    hidden = _place_blocks(N, T, int(np.ceil(rate * N * T)), max_block_frac, rng,
                           eligible=series.mask)
    mask = series.mask & ~hidden
    return PartialSeries(np.where(mask, series.values, 0.0), mask), hidden


@dataclass(frozen=True)
class ZScoreStats:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, X):
        return (np.asarray(X) - self.mean[:, None]) / self.std[:, None]

    def inverse(self, X):
        return np.asarray(X) * self.std[:, None] + self.mean[:, None]


def zscore(series: PartialSeries, std_floor=1e-8):
    """Standardize each feature with statistics of its observed entries only."""
    W = series.mask
    counts = W.sum(axis=1)
    mean = np.zeros(series.n_features)
    std = np.ones(series.n_features)
    for i in range(series.n_features):
        if counts[i] == 0:
            warnings.warn(f"feature {i} has no observed values; using mean 0 and std 1",
                          RuntimeWarning, stacklevel=2)
            continue
        obs = series.values[i, W[i]]
        mean[i] = obs.mean()
        std[i] = max(obs.std(), std_floor)
    stats = ZScoreStats(mean, std)
    values = np.where(W, stats.transform(series.values), 0.0)
    return PartialSeries(values, W), stats
