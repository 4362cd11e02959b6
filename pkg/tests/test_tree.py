import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_hmm
from dualfilter.dual_hmm import cost_params, layer_path
from dualfilter.experiments import event_columns
from dualfilter.hmm import forward_filter, simulate_hmm, two_cycle
from dualfilter.tree import (TreeTooLargeError, bsde_residual, bsde_solve_tree, cost_J, dual_filter_tree,
                             duality_check, estimator_tree, extract_weights, feedback_residual, filter_values,
                             layer_tree, observation_tree, oracle_weights, oracle_weights_path, reconstruct_leaves,
                             solve_feedback_tree, tree_distance, weights_along_path)


def random_instance(seed, d_max=4, T_max=6):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 3))
    d = int(rng.integers(1, d_max + 1))
    T = int(rng.integers(1, T_max + 1))
    hmm = random_hmm(rng, d, m, alpha=float(rng.uniform(0.3, 2.0)))
    tree = observation_tree(hmm, T)
    U = [rng.standard_normal((tree.n_nodes(t), m)) for t in range(T)]
    return rng, hmm, tree, U, rng.standard_normal(d)


def test_tree_marginals_match_forward_filter():
    rng = np.random.default_rng(0)
    h = random_hmm(rng, 3, 2)
    tree = observation_tree(h, 4)
    for t in range(5):
        assert tree.prob[t].sum() == pytest.approx(1.0, abs=1e-13)
    for z in itertools.product(range(3), repeat=4):
        node = tree.path_nodes(z)[-1]
        np.testing.assert_allclose(tree.pi[4][node], forward_filter(h, z).pi[-1], atol=1e-13)
    np.testing.assert_array_equal(tree.prefixes(2)[5], [1, 2])


def test_tree_size_guard():
    with pytest.raises(TreeTooLargeError):
        observation_tree(two_cycle(5, 1), 21)


@given(st.integers(0, 10**6))
def test_bsde_residual_vanishes(seed):
    _, _, tree, U, f = random_instance(seed)
    assert bsde_residual(tree, bsde_solve_tree(tree, U, f)) <= 1e-12


@given(st.integers(0, 10**6))
def test_duality_on_random_trees(seed):
    _, _, tree, U, f = random_instance(seed)
    J, mse, gap = duality_check(tree, U, f)
    assert gap <= 1e-10 * max(1.0, mse)


def test_duality_several_terminal_conditions():
    rng, h, tree, U, _ = random_instance(17)
    F = rng.standard_normal((h.d, 3))
    J, mse, gap = duality_check(tree, U, F)
    assert J.shape == (3,)
    for j in range(3):
        assert J[j] == pytest.approx(cost_J(tree, U, F[:, j]), rel=1e-12)
    assert gap.max() <= 1e-10 * max(1.0, mse.max())


@given(st.integers(0, 10**6))
def test_extract_reconstruct_roundtrip(seed):
    rng = np.random.default_rng(seed)
    m, T = int(rng.integers(1, 4)), int(rng.integers(0, 5))
    S = rng.standard_normal((m + 1) ** T)
    const, U = extract_weights(S, m)
    np.testing.assert_allclose(reconstruct_leaves(const, U, m), S, atol=1e-12)


def test_extract_single_step_binary():
    # m = 1: S(z) = const - U e(z) with e(1) = 1, e(0) = -1
    S = np.array([5.0, 2.0, -1.0, 7.0])
    const, U = extract_weights(S, 1)
    assert const == pytest.approx(S.mean())
    np.testing.assert_allclose(U[1][:, 0], -0.5 * (S[1::2] - S[0::2]))
    with pytest.raises(ValueError):
        extract_weights(np.ones(5), 1)


def test_representation_is_exact_and_unique():
    rng, h, tree, _, f = random_instance(3, d_max=4, T_max=5)
    target = filter_values(tree, f)
    const, U = oracle_weights(tree, f)
    pos = tree.prob[tree.T] > 0
    np.testing.assert_allclose(reconstruct_leaves(const, U, h.m)[pos], target[pos], atol=1e-12)
    t = tree.T - 1
    U[t][0, 0] += 1e-3
    assert np.abs(reconstruct_leaves(const, U, h.m) - target).max() > 1e-4


@given(st.integers(0, 10**6))
def test_oracle_weights_obey_feedback_law(seed):
    _, _, tree, _, f = random_instance(seed, d_max=4, T_max=5)
    assert feedback_residual(tree, f) <= 1e-8


def test_oracle_weights_minimise_cost():
    rng, h, tree, _, f = random_instance(8)
    _, U = oracle_weights(tree, f)
    J0 = cost_J(tree, U, f)
    for _ in range(5):
        bumped = [u + 0.05 * rng.standard_normal(u.shape) for u in U]
        assert J0 <= cost_J(tree, bumped, f) + 1e-12


def test_feedback_solve_reproduces_oracle():
    rng, h, tree, _, f = random_instance(21, d_max=4, T_max=5)
    sol = solve_feedback_tree(tree, tree.pi, f)
    S_T = estimator_tree(tree, sol)[-1][:, 0]
    pos = tree.prob[tree.T] > 0
    np.testing.assert_allclose(S_T[pos], filter_values(tree, f)[pos], atol=1e-10)


@pytest.mark.parametrize("reconstruction", ["partial_sums", "terminal"])
@given(seed=st.integers(0, 10**6))
def test_filter_is_fixed_point_of_layer_tree(reconstruction, seed):
    _, _, tree, _, _ = random_instance(seed, d_max=4, T_max=5)
    out, _ = layer_tree(tree, tree.pi, reconstruction)
    assert tree_distance(out, tree.pi) <= 1e-8


@pytest.mark.parametrize("reconstruction", ["partial_sums", "terminal"])
def test_dual_filter_tree_converges(reconstruction):
    rng = np.random.default_rng(4)
    h = random_hmm(rng, 3, 2)
    tree = observation_tree(h, 4)
    state = dual_filter_tree(tree, tol=1e-12, reconstruction=reconstruction)
    assert state.converged
    assert tree_distance(state.rho, tree.pi) <= 1e-10
    # the first layer moves the guess towards the filter
    first, _ = layer_tree(tree, [np.full((tree.n_nodes(t), 3), 1 / 3) for t in range(5)], reconstruction)
    start = tree_distance([np.full((tree.n_nodes(t), 3), 1 / 3) for t in range(5)], tree.pi)
    assert tree_distance(first, tree.pi) < start


def test_layer_tree_two_cycle():
    tree = observation_tree(two_cycle(4, 1), 8)
    out, _ = layer_tree(tree, tree.pi, "terminal")
    assert tree_distance(out, tree.pi, tree.prob) <= 1e-8
    assert dual_filter_tree(tree, reconstruction="terminal").converged
    # deterministic emissions make the partial-sum system lose rank
    out, deficient = layer_tree(tree, tree.pi, "partial_sums")
    assert deficient > 0
    with pytest.raises(ValueError):
        layer_tree(tree, tree.pi, "bogus")


def test_path_layer_matches_tree_along_path():
    """On a full-support model the path layer agrees with the exact tree layer at the filter."""
    rng = np.random.default_rng(9)
    h = random_hmm(rng, 3, 1)
    tree = observation_tree(h, 6)
    _, z = simulate_hmm(h, 6, seed=0)
    nodes = tree.path_nodes(z[:6])
    out, _ = layer_path(h, np.array([tree.pi[t][nodes[t]] for t in range(1, 7)]), z[:6], cost_params(h))
    for t in range(1, 7):
        np.testing.assert_allclose(out[t - 1], tree.pi[t][nodes[t]], atol=1e-10)


def test_oracle_weights_two_cycle_sparse():
    h = two_cycle(5, 1)
    _, z = simulate_hmm(h, 12, seed=1)
    z = z[:12]
    W = oracle_weights_path(h, z)
    mag = np.sqrt((W ** 2).sum(axis=(-2, -1)))
    ev = event_columns(z)
    assert mag[:, ~ev].max() <= 1e-12
    assert mag[:, ev].max() > 0.1
    np.testing.assert_array_equal(np.triu(mag, 1), 0.0)


@pytest.mark.parametrize("reconstruction", ["partial_sums", "terminal"])
@given(seed=st.integers(0, 10**6))
def test_layer_tree_from_uniform_binary(reconstruction, seed):
    rng = np.random.default_rng(seed)
    d, T = int(rng.integers(1, 4)), int(rng.integers(1, 7))
    # uniform Dirichlet rows; near-degenerate draws (alpha < 1) can break one-step contraction
    tree = observation_tree(random_hmm(rng, d, 1), T)
    uniform = [np.full((tree.n_nodes(t), d), 1.0 / d) for t in range(T + 1)]
    state = dual_filter_tree(tree, tol=1e-10, reconstruction=reconstruction)
    assert tree_distance(state.rho, tree.pi, tree.prob) <= 1e-6
    start = tree_distance(uniform, tree.pi, tree.prob)
    first, _ = layer_tree(tree, uniform, reconstruction)
    assert start == 0 or tree_distance(first, tree.pi, tree.prob) < start


def test_weights_along_path_methods():
    h = two_cycle(5, 1)
    _, z = simulate_hmm(h, 10, seed=2)
    ev = event_columns(z[:10])
    for method in ("oracle_tree", "layer_path"):
        W, H = weights_along_path(h, z[:10], method)
        assert W.shape == (10, 10, 1, 1) and H.shape == (10, 10)
        np.testing.assert_array_equal(np.triu(H, 1), 0.0)
        assert H[:, ~ev].max() <= 1e-10
    with pytest.raises(ValueError):
        weights_along_path(h, z[:10], "nope")


def test_feedback_law_with_deterministic_emissions():
    """rho(R) = 0 on the two-cycle: the pseudo-inverse law returns 0, the joint node solve keeps the weight."""
    h = two_cycle(4, 1)
    tree = observation_tree(h, 8)
    f = h.C[:, 1]
    assert feedback_residual(tree, f, form="node", reachable_only=True) <= 1e-12
    assert feedback_residual(tree, f, form="phi", reachable_only=True) > 0.1
    rng = np.random.default_rng(0)
    full = observation_tree(random_hmm(rng, 3, 2), 4)
    g = rng.standard_normal(3)
    assert feedback_residual(full, g, form="node") == pytest.approx(feedback_residual(full, g), abs=1e-10)
    with pytest.raises(ValueError):
        feedback_residual(full, g, form="other")
