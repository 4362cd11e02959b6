import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_hmm
from dualfilter._numerics import ModelError
from dualfilter.hmm import (Hmm, ImpossiblePathError, baum_welch, cross_entropy, entropy_benchmark, filter_predictor,
                            forward_filter, next_token, perturb, simulate_hmm, split_cycles, two_cycle,
                            uniform_predictor, unigram_predictor)


def brute_force_filter(hmm, z):
    """P(X_t = x | Z_{1:t}) for t = 1..T by summing over every hidden path."""
    T = len(z)
    out = np.zeros((T, hmm.d))
    total = np.zeros(T)
    for xs in itertools.product(range(hmm.d), repeat=T + 1):
        p = hmm.mu[xs[0]]
        for t in range(T):
            p *= hmm.C[xs[t], z[t]] * hmm.A[xs[t], xs[t + 1]]
            out[t, xs[t + 1]] += p
            total[t] += p
    return out / total[:, None], math.log(total[-1])


def test_hmm_validation():
    with pytest.raises(ModelError):
        Hmm([[0.5, 0.4], [0.5, 0.5]], [[1, 0], [0, 1]], [1, 0])
    with pytest.raises(ModelError):
        Hmm([[1.0]], [[1.0]], [1.0])
    with pytest.raises(ModelError):
        Hmm(np.eye(2), [[1.5, -0.5], [0, 1]], [1, 0])
    h = Hmm.from_dict(two_cycle(5, 1).to_dict())
    assert h.d == 5 and h.m == 1


def test_two_cycle_construction():
    h = two_cycle(4, 1)
    # 1-based: A(4,1) = A(4,3) = 0.5; the rest advance by one
    assert h.A[3, 0] == 0.5 and h.A[3, 2] == 0.5
    for x in range(3):
        assert h.A[x, x + 1] == 1.0
    np.testing.assert_array_equal(h.C, [[0, 1], [1, 0], [1, 0], [0, 1]])
    np.testing.assert_array_equal(h.mu, [0, 0, 0, 1])
    with pytest.raises(ModelError):
        two_cycle(4, 2)
    with pytest.raises(ModelError):
        two_cycle(3, 1)


def test_two_cycle_paths_parse_and_runs():
    h = two_cycle(16, 4)
    _, Z = simulate_hmm(h, 400, seed=5, n_paths=20)
    for z in Z:
        labels = split_cycles(z, 16, 4)
        assert set(labels) <= {"long", "short"}
        # every maximal zero run that is closed on both sides has length d - 2 or q
        inner = {len(r) for r in "".join(map(str, z)).split("1")[1:-1] if r}
        assert inner <= {14, 4}


def test_two_cycle_branch_frequency():
    h = two_cycle(6, 2)
    _, Z = simulate_hmm(h, 20000, seed=8, n_paths=1)
    labels = split_cycles(Z[0], 6, 2)
    n = len(labels)
    k = labels.count("long")
    assert n > 10**3
    assert abs(k - n / 2) < 4 * math.sqrt(n / 4)


def test_split_cycles_rejects_garbage():
    with pytest.raises(ValueError):
        split_cycles([1, 0, 1, 1, 1], 6, 2)


def test_simulate_deterministic_chain():
    A = np.roll(np.eye(3), 1, axis=1)
    h = Hmm(A, [[1, 0], [0, 1], [1, 0]], [1, 0, 0])
    x, z = simulate_hmm(h, 6, seed=0)
    x2, _ = simulate_hmm(h, 6, seed=99)
    np.testing.assert_array_equal(x, x2)
    np.testing.assert_array_equal(x, [0, 1, 2, 0, 1, 2, 0])
    np.testing.assert_array_equal(z, [0, 1, 0, 0, 1, 0, 0])


def test_simulate_transition_frequencies():
    rng = np.random.default_rng(4)
    h = random_hmm(rng, 3, 2)
    x, _ = simulate_hmm(h, 60000, seed=1)
    counts = np.zeros((3, 3))
    np.add.at(counts, (x[:-1], x[1:]), 1)
    n = counts.sum(axis=1, keepdims=True)
    se = np.sqrt(h.A * (1 - h.A) / n)
    assert np.all(np.abs(counts / n - h.A) < 4 * se + 1e-12)


def test_forward_filter_uninformative_emission_is_prior():
    rng = np.random.default_rng(0)
    h = random_hmm(rng, 3, 2)
    h = Hmm(h.A, np.tile([0.2, 0.3, 0.5], (3, 1)), h.mu)
    fp = forward_filter(h, [2, 0, 1, 1])
    prior = h.mu
    for t in range(4):
        prior = prior @ h.A
        np.testing.assert_allclose(fp.pi[t], prior, atol=1e-15)


@given(st.integers(0, 10**6))
def test_forward_filter_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    d, m, T = int(rng.integers(2, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 7))
    h = random_hmm(rng, d, m)
    z = rng.integers(0, m + 1, size=T)
    fp = forward_filter(h, z)
    ref, ll = brute_force_filter(h, z)
    np.testing.assert_allclose(fp.pi, ref, atol=1e-12)
    assert fp.loglik == pytest.approx(ll, abs=1e-12)
    np.testing.assert_allclose(fp.pi.sum(axis=1), 1.0, atol=1e-10)


def test_forward_filter_two_cycle_split():
    d, q, T = 8, 2, 60
    h = two_cycle(d, q)
    x, z = simulate_hmm(h, T, seed=3)
    fp = forward_filter(h, z[:T])
    splits = 0
    for t in range(1, T + 1):
        p = fp.pi[t - 1]
        if x[t - 1] == d - 1:
            # one step after state d: half on state 1, half on state d - q
            np.testing.assert_allclose(p[[0, d - 1 - q]], 0.5)
            assert np.count_nonzero(p) == 2
            np.testing.assert_allclose(next_token(h, p), [0.5, 0.5])
            splits += 1
        else:
            assert p[x[t]] == 1.0
    assert splits > 3


def test_forward_filter_impossible_path():
    h = two_cycle(5, 1)
    with pytest.raises(ImpossiblePathError) as info:
        forward_filter(h, [1, 0, 0, 0, 0, 0, 0])
    assert info.value.t >= 1


def test_next_token():
    h = two_cycle(5, 1)
    np.testing.assert_array_equal(next_token(h, np.eye(5)[2]), h.C[2])
    rng = np.random.default_rng(1)
    h = random_hmm(rng, 4, 3)
    assert next_token(h, rng.dirichlet(np.ones(4))).sum() == pytest.approx(1.0, abs=1e-15)


def test_filter_predictor_nan_after_impossible_token():
    h = two_cycle(5, 1)
    pred = filter_predictor(h)([1, 0, 0, 0, 0, 0, 0])
    assert np.isnan(pred[-1]).all()
    assert np.isfinite(pred[0]).all()


def test_cross_entropy_uniform_predictor():
    rng = np.random.default_rng(2)
    h = random_hmm(rng, 3, 2)
    assert cross_entropy(h, uniform_predictor(2), 10, n_paths=5, seed=0) == pytest.approx(math.log(3))


def test_cross_entropy_zero_probability_is_inf():
    h = two_cycle(5, 1)
    with pytest.warns(RuntimeWarning):
        loss = cross_entropy(h, unigram_predictor([1.0, 0.0]), 10, n_paths=3, seed=0)
    assert loss == math.inf


def test_entropy_benchmark_exact_two_cycle_small():
    # predicting Z_{t+1} costs ln 2 exactly when X_{t-1} = d; X_0 = d
    d, q, T = 4, 1, 12
    h = two_cycle(d, q)
    exact = entropy_benchmark(h, T, exact=True)
    visits = sum(np.linalg.matrix_power(h.A, k)[d - 1, d - 1] for k in range(T))
    assert exact == pytest.approx(math.log(2) * visits / T, rel=1e-12)


def test_entropy_benchmark_converges_to_cycle_rate():
    d, q = 16, 4
    h = two_cycle(d, q)
    loss = entropy_benchmark(h, 4000, n_paths=8, seed=3)
    assert loss == pytest.approx(math.log(2) / (0.5 * d + 0.5 * (q + 1)), rel=0.03)


def test_entropy_benchmark_trivial_models():
    A = np.roll(np.eye(3), 1, axis=1)
    chain = Hmm(A, [[1, 0], [0, 1], [1, 0]], [1, 0, 0])
    assert entropy_benchmark(chain, 8, exact=True) == 0.0
    iid = Hmm([[1.0]], [[0.25, 0.25, 0.25, 0.25]], [1.0])
    assert entropy_benchmark(iid, 6, n_paths=3, seed=0) == pytest.approx(math.log(4))


def test_true_filter_is_best_predictor():
    rng = np.random.default_rng(6)
    h = random_hmm(rng, 3, 1, alpha=0.5)
    _, Z = simulate_hmm(h, 5, seed=1, n_paths=1)
    freq = np.bincount(Z.ravel(), minlength=2) / Z.size
    opt = entropy_benchmark(h, 5, exact=True)
    assert opt <= cross_entropy(h, uniform_predictor(1), 5, exact=True) + 1e-12
    assert opt <= cross_entropy(h, unigram_predictor(freq), 5, exact=True) + 1e-12


def test_perturb():
    h = two_cycle(4, 1)
    assert perturb(h, 0.0).A.tolist() == h.A.tolist()
    np.testing.assert_allclose(perturb(h, 1.0).A, 0.25)
    np.testing.assert_allclose(perturb(h, 1.0, "emission").C, 0.5)
    assert perturb(h, 0.1).A[3, 0] == pytest.approx(0.475)
    assert perturb(h, 0.1, "emission").A.tolist() == h.A.tolist()
    with pytest.raises(ValueError):
        perturb(h, 1.5)
    with pytest.raises(ValueError):
        perturb(h, 0.1, "both")


@given(st.floats(0, 1), st.integers(0, 1000))
def test_perturb_keeps_rows_stochastic(eps, seed):
    h = random_hmm(np.random.default_rng(seed), 5, 3)
    for target in ("transition", "emission"):
        p = perturb(h, eps, target)
        assert np.abs(p.A.sum(axis=1) - 1).max() <= 1e-15
        assert np.abs(p.C.sum(axis=1) - 1).max() <= 1e-15


def test_baum_welch_monotone_and_single_state():
    rng = np.random.default_rng(7)
    truth = random_hmm(rng, 3, 2)
    _, Z = simulate_hmm(truth, 40, seed=2, n_paths=30)
    fit = baum_welch(Z, 3, 2, iters=30, seed=0, restarts=2)
    assert np.all(np.diff(fit.loglik) >= -1e-9)
    for run in fit.restart_logliks:
        assert np.all(np.diff(run) >= -1e-9)
    one = baum_welch(Z, 1, 2, iters=5, seed=0, restarts=1)
    np.testing.assert_allclose(one.hmm.C[0], np.bincount(Z.ravel(), minlength=3) / Z.size, atol=1e-12)


def test_baum_welch_estep_matches_filter_likelihood():
    rng = np.random.default_rng(8)
    h = random_hmm(rng, 3, 1)
    _, Z = simulate_hmm(h, 7, seed=4, n_paths=3)
    from dualfilter.hmm import _estep

    gamma, _, ll = _estep(h, Z)
    ref = 0.0
    for z in Z:
        fp = forward_filter(h, z)
        ref += fp.loglik
    assert ll == pytest.approx(ref, rel=1e-12)
    # smoothed X_{L-1} given Z_{1:L} is the filter at L-1 corrected with Z_L
    fp = forward_filter(h, Z[0])
    w = (fp.pi[-2] if Z.shape[1] > 1 else h.mu) * h.C[:, Z[0, -1]]
    np.testing.assert_allclose(gamma[0, -1], w / w.sum(), atol=1e-12)


def test_baum_welch_rejects_bad_input():
    with pytest.raises(ValueError):
        baum_welch([], 2, 1)
    with pytest.raises(ValueError):
        baum_welch([[0, 3]], 2, 1)
    with pytest.raises(ValueError):
        baum_welch([[0, 1]], 0, 1)
