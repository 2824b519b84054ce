"""Acceptance suite: one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines as
they are produced; they are also repeated in the terminal summary.  The
synthetic-data criteria (4, 5, 7) share one cached set of fits, about ten
minutes of single-core time in total.
"""
import time

import numpy as np
import pytest

from acceptance_log import record
from instances import random_params, random_series, random_spd
from missnet import Hyperparams, fit
from missnet.em import impute, initialize, linear_interpolate
from missnet.evaluation import regime_accuracy, rmse, scaling_benchmark
from missnet.glasso import GlassoConfig, graphical_lasso
from missnet.switching import e_step, viterbi_decode
from missnet.synth import SynthSpec, generate_dataset, inject_missing, zscore
from oracles import dense_posterior, enumerate_best_path, lds_em

SEEDS = range(5)
RATES_B = (0.1, 0.2, 0.4, 0.6)
RATES_IMPUTE = (0.2, 0.4, 0.6)
# the KKT check needs the solver run well past its default stopping tolerances
KKT_CONFIG = GlassoConfig(abs_tol=1e-8, rel_tol=1e-7, max_admm_iter=20000)

_RUNS = {}


def experiment(pattern, rate, seed):
    """Fit one synthetic dataset (T=1000, N=50, L=10) with default hyperparameters."""
    key = (pattern, rate, seed)
    if key in _RUNS:
        return _RUNS[key]
    K = 1 if pattern == "A" else 2
    data = generate_dataset(SynthSpec(seed=seed), pattern)
    observed = inject_missing(data.clean, rate, seed=seed)
    series, stats = zscore(observed)
    s_ok = []

    def check_s(it, info):
        S = info["S"]
        s_ok.append(bool((np.diagonal(S, axis1=1, axis2=2) == 1.0).all() and np.abs(S).max() <= 1.0))

    t0 = time.perf_counter()
    res = fit(series, Hyperparams(latent_dim=10, num_regimes=K, seed=seed), callback=check_s)
    seconds = time.perf_counter() - t0
    S_final = res.latents.S
    s_ok.append(bool((np.diagonal(S_final, axis1=1, axis2=2) == 1.0).all() and np.abs(S_final).max() <= 1.0))
    hidden = ~observed.mask
    lin, _ = linear_interpolate(series)
    out = {
        "accuracy": regime_accuracy(data.true_path, res.path, K),
        "rmse": rmse(data.clean, stats.inverse(res.imputed), hidden),
        "rmse_linear": rmse(data.clean, stats.inverse(lin), hidden),
        "seconds": seconds,
        "trace": np.array(res.report.objective_trace),
        "s_ok": all(s_ok),
        "mask_ok": bool(np.array_equal(res.imputed[series.mask], series.values[series.mask])),
    }
    _RUNS[key] = out
    return out


def test_criterion_1_smoother_matches_dense_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(10_000 + seed)
        L = int(rng.integers(1, 4))
        N = int(rng.choice([2, 4]))
        T = int(rng.choice([4, 6]))
        p = random_params(rng, 1, N, L)
        U = rng.normal(size=(1, N, L))
        s = random_series(rng, N, T, 0.5)
        _, sm = e_step(s, p, U, s.values)
        means, covs, _ = dense_posterior(p.B, p.sigma_Z ** 2 * np.eye(L), p.z0, p.psi0, U[0],
                                         p.sigma_X[0], s.values, s.mask)
        worst = max(worst, np.abs(sm.mean_hat.T - means).max(), np.abs(sm.cov_hat - covs).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 10.0
    record(1, ok, f"50 instances, max abs deviation {worst:.2e} (<= 1e-6), {elapsed:.2f} s (< 10 s)")
    assert ok


def test_criterion_2_viterbi_matches_enumeration():
    matches = 0
    for seed in range(50):
        rng = np.random.default_rng(20_000 + seed)
        N, L, T = int(rng.integers(1, 5)), int(rng.integers(1, 4)), 5
        p = random_params(rng, 2, N, L)
        U = rng.normal(size=(2, N, L))
        s = random_series(rng, N, T)
        vit = viterbi_decode(s, p, U, rng.normal(size=(N, T)))
        best, _ = enumerate_best_path(vit.table.delta)
        matches += int(np.array_equal(best, vit.path.assignments))
    ok = matches == 50
    record(2, ok, f"{matches}/50 decoded paths equal the exhaustive minimum over 32 paths")
    assert ok


def test_criterion_3_graphical_lasso():
    t0 = time.perf_counter()
    rng = np.random.default_rng(30_000)
    inv_err = 0.0
    for n in range(2, 11):
        cov = random_spd(rng, n)
        inv_err = max(inv_err, np.abs(graphical_lasso(cov, 0.0) - np.linalg.inv(cov)).max())
    kkt = 0.0
    monotone = True
    for n in (3, 5, 8, 10):
        A = rng.normal(size=(3 * n, n))
        cov = A.T @ A / (3 * n)
        off = ~np.eye(n, dtype=bool)
        counts = []
        for lam in (0.02, 0.1, 0.3, 1.0):
            P = graphical_lasso(cov, lam, KKT_CONFIG)
            G = np.linalg.inv(P) - cov
            nz = off & (np.abs(P) > 1e-8)
            z = off & ~nz
            viol = np.abs(np.diag(G)).max()
            if nz.any():
                viol = max(viol, np.abs(G[nz] - lam * np.sign(P[nz])).max())
            if z.any():
                viol = max(viol, (np.abs(G[z]) - lam).max())
            kkt = max(kkt, viol)
            counts.append(int(nz.sum()))
        monotone &= counts == sorted(counts, reverse=True)
    elapsed = time.perf_counter() - t0
    ok = inv_err <= 1e-4 and kkt <= 1e-4 and monotone and elapsed < 5.0
    record(3, ok, f"lambda=0 inverse error {inv_err:.1e}, KKT violation {kkt:.1e}, "
                  f"sparsity monotone {monotone}, {elapsed:.2f} s")
    assert ok


@pytest.mark.slow
def test_criterion_4_regime_recovery():
    lines, ok = [], True
    for rate in RATES_B:
        runs = [experiment("B", rate, s) for s in SEEDS]
        acc = [r["accuracy"] for r in runs]
        med = float(np.median(acc))
        slowest = max(r["seconds"] for r in runs)
        ok &= med >= 0.90 and slowest < 600
        lines.append(f"{int(rate * 100)}%: median {med:.3f} (min {min(acc):.3f}, slowest fit {slowest:.0f} s)")
    record(4, ok, "PatternB accuracy; " + "; ".join(lines))
    assert ok


@pytest.mark.slow
def test_criterion_5_beats_linear_interpolation():
    lines, ok = [], True
    for pattern in ("A", "B"):
        for rate in RATES_IMPUTE:
            runs = [experiment(pattern, rate, s) for s in SEEDS]
            wins = sum(r["rmse"] < r["rmse_linear"] for r in runs)
            ok &= wins >= 4
            m = np.median([r["rmse"] for r in runs])
            ml = np.median([r["rmse_linear"] for r in runs])
            lines.append(f"{pattern}/{int(rate * 100)}%: {wins}/5 (median {m:.3f} vs {ml:.3f})")
    record(5, ok, "seeds where RMSE < linear interpolation; " + "; ".join(lines))
    assert ok


@pytest.mark.slow
def test_criterion_6_linear_scaling():
    rows = scaling_benchmark(lengths=(1000, 8000), n_iter=5)
    t1, t8 = rows[0]["median_seconds"], rows[1]["median_seconds"]
    ratio = t8 / t1
    ok = 0.7 * 8 <= ratio <= 1.3 * 8
    record(6, ok, f"median per-iteration time {t1:.3f} s at T=1000, {t8:.3f} s at T=8000, "
                  f"ratio {ratio:.2f} (band 5.6 to 10.4)")
    assert ok


def _spd_iterations(total=100):
    """Run small random fits and check every iterate; returns (iterations, failures)."""
    seen, bad = 0, 0
    seed = 0
    while seen < total:
        rng = np.random.default_rng(70_000 + seed)
        K = int(rng.integers(1, 4))
        N, L, T = int(rng.integers(3, 8)), int(rng.integers(1, 4)), int(rng.integers(30, 80))
        X = rng.normal(size=(N, T)).cumsum(axis=1) * 0.2
        s = random_series(rng, N, T, 0.4)
        s = type(s)(np.where(s.mask, X, 0.0), s.mask)
        counts = []

        def check(it, info):
            nonlocal bad
            p, sm = info["params"], info["smoothed"]
            ok = all(np.linalg.eigvalsh(P)[0] > 0 for P in p.precision)
            ok &= np.linalg.eigvalsh(p.psi0)[0] >= -1e-10
            C = sm.cov_hat
            ok &= np.allclose(C, np.swapaxes(C, 1, 2))
            ok &= np.linalg.eigvalsh(C).min() >= -1e-8 * max(1.0, np.abs(C).max())
            bad += int(not ok)
            counts.append(it)

        fit(s, Hyperparams(latent_dim=L, num_regimes=K, max_iter=10, tol=1e-12, seed=seed), callback=check)
        seen += len(counts)
        seed += 1
    return seen, bad


@pytest.mark.slow
def test_criterion_7_properties():
    runs = [experiment("B", r, s) for r in RATES_B for s in SEEDS]
    runs += [experiment("A", r, s) for r in RATES_IMPUTE for s in SEEDS]
    mask_ok = all(r["mask_ok"] for r in runs)
    s_ok = all(r["s_ok"] for r in runs)
    pairs = nondec = 0
    for r in runs:
        tr = r["trace"]
        d = tr[1:] - tr[:-1]
        nondec += int((d >= -1e-6 * np.abs(tr[:-1])).sum())
        pairs += d.size
    frac = nondec / pairs

    data = generate_dataset(SynthSpec(T=300, N=12, L=3, switch_period=75, seed=1), "B")
    series, _ = zscore(inject_missing(data.clean, 0.3, seed=1))
    h = Hyperparams(latent_dim=3, num_regimes=2, max_iter=8, seed=3)
    a, b = fit(series, h), fit(series, h)
    deterministic = (np.array_equal(a.imputed, b.imputed)
                     and a.report.objective_trace == b.report.objective_trace
                     and np.array_equal(a.path.assignments, b.path.assignments))

    seen, bad = _spd_iterations(100)
    ok = mask_ok and s_ok and frac >= 0.95 and deterministic and bad == 0
    record(7, ok, f"mask fidelity {mask_ok}, S unit diagonal and range {s_ok}, "
                  f"objective non-decrease {nondec}/{pairs} = {frac:.3f}, deterministic {deterministic}, "
                  f"SPD violations {bad} in {seen} iterations")
    assert ok


def test_criterion_8_reduces_to_lds_em():
    data = generate_dataset(SynthSpec(T=200, N=10, L=3, seed=8), "A")
    observed = inject_missing(data.clean, 0.2, seed=8)
    series, _ = zscore(observed)
    h = Hyperparams(latent_dim=3, num_regimes=1, alpha=0.0, lam=0.0, max_iter=21, tol=1e-300, seed=8)
    snap = {}

    def grab(it, info):
        if it == 20:
            snap["imputed"] = impute(series, info["path"].assignments, info["U"], info["smoothed"].mean_hat)

    fit(series, h, callback=grab)
    params, lat, _, _ = initialize(series, h, np.random.default_rng(h.seed))
    ref = lds_em(series.values, series.mask, params.B, params.z0, params.psi0, params.sigma_Z, lat.U[0],
                 params.sigma_X[0], 20)
    hidden = ~series.mask
    # compare on the z-scored scale the fit works in
    truth_z = zscore(observed)[1].transform(data.clean)
    r_fit = rmse(truth_z, snap["imputed"], hidden)
    r_ref = rmse(truth_z, ref, hidden)
    diff = abs(r_fit - r_ref)
    max_dev = np.abs(snap["imputed"] - ref).max()
    ok = diff <= 1e-4
    record(8, ok, f"after 20 iterations RMSE {r_fit:.6f} vs plain LDS-EM {r_ref:.6f}, "
                  f"difference {diff:.1e} (<= 1e-4), max entry deviation {max_dev:.1e}")
    assert ok
