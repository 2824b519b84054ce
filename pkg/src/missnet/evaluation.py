"""Scoring of imputations and recovered regime paths, plus a timing harness."""
from __future__ import annotations

import itertools
import time

import numpy as np
from scipy.optimize import linear_sum_assignment


def rmse(truth, imputed, eval_mask) -> float:
    """Root mean squared error over entries where ``eval_mask`` is set."""
    truth = np.asarray(truth, dtype=float)
    imputed = np.asarray(imputed, dtype=float)
    m = np.asarray(eval_mask).astype(bool)
    if truth.shape != imputed.shape or truth.shape != m.shape:
        raise ValueError("truth, imputed and eval_mask must share a shape")
    if not m.any():
        raise ValueError("eval_mask selects no entries")
    d = truth[m] - imputed[m]
    return float(np.sqrt(np.mean(d * d)))


def regime_accuracy(true_path, est_path, K) -> float:
    """Fraction of matching timesteps under the best relabeling of ``est_path``."""
    a = np.asarray(getattr(true_path, "assignments", true_path))
    b = np.asarray(getattr(est_path, "assignments", est_path))
    if a.shape != b.shape:
        raise ValueError("paths must have equal length")
    K = int(K)
    conf = np.zeros((K, K))
    np.add.at(conf, (a, b), 1.0)
    if K <= 3:
        best = max(sum(conf[perm[j], j] for j in range(K)) for perm in itertools.permutations(range(K)))
    else:
        rows, cols = linear_sum_assignment(-conf)
        best = conf[rows, cols].sum()
    return float(best / a.size)


def iteration_times(series, hyper, n_iter=5, glasso_cfg=None):
    """Wall time of ``n_iter`` full EM iterations (M-step plus next E-step)."""
    from dataclasses import replace

    from .em import fit

    stamps = []
    fit(series, replace(hyper, max_iter=n_iter + 1, tol=1e-300, n_restarts=1), glasso_cfg,
        callback=lambda it, info: stamps.append(time.perf_counter()))
    return np.diff(stamps)


def scaling_benchmark(lengths=(1000, 2000, 4000, 8000), n_iter=5, N=50, L=10, missing_rate=0.2, seed=0):
    """Median per-iteration time on PatternA data for each series length."""
    from .core import Hyperparams
    from .synth import SynthSpec, generate_dataset, inject_missing, zscore

    rows = []
    for T in lengths:
        data = generate_dataset(SynthSpec(T=T, N=N, L=L, seed=seed), "A")
        series, _ = zscore(inject_missing(data.clean, missing_rate, seed=seed))
        times = iteration_times(series, Hyperparams(latent_dim=L, num_regimes=1, seed=seed), n_iter)
        rows.append({"T": int(T), "median_seconds": float(np.median(times)),
                     "times": [float(x) for x in times]})
    return rows
