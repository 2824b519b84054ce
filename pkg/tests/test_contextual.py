import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instances import random_spd
from missnet.contextual import (infer_contextual_factors, partial_correlation_matrix,
                                update_observation_matrix)
from missnet.core import PartialSeries, SmoothedPosterior


def test_contextual_posterior_matches_bayes_rule():
    rng = np.random.default_rng(0)
    N, L = 5, 3
    U = rng.normal(size=(N, L))
    S = partial_correlation_matrix(random_spd(rng, N))
    sS, sV = 0.7, 1.3
    post = infer_contextual_factors(S, U, sS, sV)
    cov = np.linalg.inv(U.T @ U / sS ** 2 + np.eye(L) / sV ** 2)
    assert np.allclose(post.cov, cov)
    for j in range(N):
        assert np.allclose(post.mean[:, j], cov @ U.T @ S[:, j] / sS ** 2)
    assert np.allclose(post.second_sum(), post.second.sum(axis=0))


def _random_problem(rng, N=4, L=2, T=12, K=2):
    values = rng.normal(size=(N, T))
    mask = rng.random((N, T)) > 0.3
    mask[:, :L + 2] = True                # enough observations per row
    series = PartialSeries(values, mask)
    mean = rng.normal(size=(L, T))
    covs = np.stack([random_spd(rng, L, 0.1) for _ in range(T)])
    second = covs + np.einsum("at,bt->tab", mean, mean)
    sm = SmoothedPosterior(mean_hat=mean, cov_hat=covs, cross=np.zeros((T, L, L)), second=second)
    path = np.r_[np.zeros(T // 2, int), np.ones(T - T // 2, int)]
    path[:L + 2] = 0
    U = rng.normal(size=(N, L))
    S = partial_correlation_matrix(random_spd(rng, N))
    return series, sm, path, U, S


@pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0])
def test_row_update_matches_explicit_sums(alpha):
    rng = np.random.default_rng(1)
    series, sm, path, U, S = _random_problem(rng)
    sX, sS, sV = 0.8, 0.6, 1.1
    ctx = infer_contextual_factors(S, U, sS, sV)
    U_new, flagged = update_observation_matrix(0, alpha, series, sm, path, ctx, S, sX, sS)
    assert flagged == []
    N, L = U.shape
    for i in range(N):
        A1 = np.zeros(L)
        A2 = np.zeros((L, L))
        for j in range(N):
            Ev = ctx.mean[:, j]
            A1 += alpha / sS ** 2 * S[i, j] * Ev
            A2 += alpha / sS ** 2 * (ctx.cov + np.outer(Ev, Ev))
        for t in range(series.n_timesteps):
            if path[t] == 0 and series.mask[i, t]:
                A1 += (1 - alpha) / sX ** 2 * series.values[i, t] * sm.mean_hat[:, t]
                A2 += (1 - alpha) / sX ** 2 * sm.second[t]
        assert np.allclose(U_new[i], np.linalg.solve(A2, A1))


def test_row_update_without_context_is_least_squares_on_noise_free_data():
    """Degenerate posterior (zero covariance) and exact data recover the true rows."""
    rng = np.random.default_rng(2)
    N, L, T = 3, 2, 30
    Z = rng.normal(size=(L, T))
    U_true = rng.normal(size=(N, L))
    mask = rng.random((N, T)) > 0.2
    series = PartialSeries(U_true @ Z, mask)
    second = np.einsum("at,bt->tab", Z, Z)
    sm = SmoothedPosterior(mean_hat=Z, cov_hat=np.zeros((T, L, L)), cross=np.zeros((T, L, L)),
                           second=second)
    S = np.eye(N)
    ctx = infer_contextual_factors(S, U_true, 1.0, 1.0)
    U_new, _ = update_observation_matrix(0, 0.0, series, sm, np.zeros(T, int), ctx, S, 1.0, 1.0)
    assert np.allclose(U_new, U_true)


def test_singular_rows_keep_previous_values():
    rng = np.random.default_rng(3)
    N, L, T = 3, 2, 6
    mask = np.ones((N, T), bool)
    mask[1] = False                        # row 1 never observed
    series = PartialSeries(rng.normal(size=(N, T)), mask)
    mean = rng.normal(size=(L, T))
    sm = SmoothedPosterior(mean_hat=mean, cov_hat=np.zeros((T, L, L)), cross=np.zeros((T, L, L)),
                           second=np.einsum("at,bt->tab", mean, mean) + np.eye(L))
    U_prev = rng.normal(size=(N, L))
    ctx = infer_contextual_factors(np.eye(N), U_prev, 1.0, 1.0)
    U_new, flagged = update_observation_matrix(0, 0.0, series, sm, np.zeros(T, int), ctx,
                                               np.eye(N), 1.0, 1.0, U_prev=U_prev)
    assert flagged == [1]
    assert np.array_equal(U_new[1], U_prev[1])
    assert np.isfinite(U_new).all()


def test_partial_correlation_by_hand():
    P = np.array([[2.0, -1.0], [-1.0, 2.0]])
    assert np.allclose(partial_correlation_matrix(P), [[1.0, 0.5], [0.5, 1.0]])
    P = np.array([[4.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 9.0]])
    S = partial_correlation_matrix(P)
    assert S[0, 1] == pytest.approx(-0.5)
    assert S[0, 2] == 0.0 and S[1, 2] == 0.0


def test_partial_correlation_rejects_bad_diagonal():
    with pytest.raises(ValueError):
        partial_correlation_matrix(np.array([[0.0, 0.1], [0.1, 1.0]]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 8))
def test_partial_correlation_properties(seed, n):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n)) * rng.uniform(0.01, 100)
    P = A @ A.T + 1e-3 * np.eye(n)
    S = partial_correlation_matrix(P)
    assert np.array_equal(np.diag(S), np.ones(n))
    assert np.array_equal(S, S.T)
    assert np.abs(S).max() <= 1.0
