import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicitq._numerics import NumericDomainError
from implicitq.tabular import (
    ConvergenceError,
    ParameterError,
    TabularMdp,
    bellman_operator,
    exact_optimal_regularized,
    exact_q_of_policy,
    generate_garnet,
    greedy_policy,
    regularized_bellman_operator,
    regularized_values,
)


def random_policy(rng, s, a):
    p = rng.random((s, a)) + 0.05
    return p / p.sum(axis=1, keepdims=True)


def loop_bellman(mdp, policy, q, tau=0.0):
    """Triple loop over (s, a, s'), written straight from the definition."""
    S, A = mdp.n_states, mdp.n_actions
    out = np.zeros((S, A))
    for s in range(S):
        for a in range(A):
            total = mdp.reward[s, a]
            for t in range(S):
                inner = 0.0
                for b in range(A):
                    inner += policy[t, b] * (q[t, b] - (tau * np.log(policy[t, b]) if tau else 0.0))
                total += mdp.gamma * mdp.transition[s, a, t] * inner
            out[s, a] = total
    return out


def classic_value_iteration(P, r, gamma, tol=1e-13):
    """Independent hard-max VI on nested lists."""
    S, A = len(r), len(r[0])
    v = [0.0] * S
    while True:
        q = [[r[s][a] + gamma * sum(P[s][a][t] * v[t] for t in range(S)) for a in range(A)]
             for s in range(S)]
        new = [max(row) for row in q]
        if max(abs(x - y) for x, y in zip(new, v)) < tol:
            return np.array(q)
        v = new


# -- construction ----------------------------------------------------------------

def test_trivial_garnet():
    mdp = generate_garnet(1, 1, 1, seed=0)
    assert mdp.transition[0, 0, 0] == 1.0


def test_garnet_branching_and_rows():
    mdp = generate_garnet(5, 2, 2, seed=7)
    nz = (mdp.transition > 0).sum(axis=-1)
    assert np.all(nz == 2)
    np.testing.assert_allclose(mdp.transition.sum(-1), 1.0, atol=1e-12)
    assert np.all(np.abs(mdp.reward) <= 1.0)


def test_garnet_deterministic():
    a = generate_garnet(6, 3, 2, seed=11)
    b = generate_garnet(6, 3, 2, seed=11)
    assert np.array_equal(a.transition, b.transition)
    assert np.array_equal(a.reward, b.reward)


@pytest.mark.parametrize("b", [0, 6])
def test_garnet_rejects_bad_branching(b):
    with pytest.raises(ParameterError):
        generate_garnet(5, 2, b, seed=0)


def test_mdp_validation():
    P = np.ones((2, 1, 2)) * 0.5
    with pytest.raises(ParameterError):
        TabularMdp(P, np.zeros((2, 1)), gamma=1.0)
    with pytest.raises(ParameterError):
        TabularMdp(P * 0.9, np.zeros((2, 1)), gamma=0.5)
    with pytest.raises(ParameterError):
        TabularMdp(P, np.full((2, 1), 3.0), gamma=0.5, r_max=1.0)
    with pytest.raises(ParameterError):
        TabularMdp(P, np.zeros((2, 2)), gamma=0.5)


def test_mdp_is_immutable():
    mdp = generate_garnet(3, 2, 2, seed=0)
    with pytest.raises(ValueError):
        mdp.transition[0, 0, 0] = 1.0


def test_json_roundtrip(tmp_path):
    mdp = generate_garnet(4, 3, 2, seed=3, gamma=0.8)
    path = tmp_path / "mdp.json"
    mdp.save(path)
    doc = json.loads(path.read_text())
    assert set(doc) >= {"n_states", "n_actions", "gamma", "reward", "transition"}
    back = TabularMdp.load(path)
    assert np.array_equal(back.transition, mdp.transition)
    assert np.array_equal(back.reward, mdp.reward)
    assert back.gamma == mdp.gamma


# -- operators -------------------------------------------------------------------

def test_bellman_gamma_zero_returns_reward():
    mdp = generate_garnet(4, 2, 2, seed=1, gamma=0.0)
    rng = np.random.default_rng(0)
    out = bellman_operator(mdp, random_policy(rng, 4, 2), rng.normal(size=(4, 2)))
    assert np.array_equal(out, mdp.reward)


def test_bellman_single_state():
    mdp = TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), gamma=0.5)
    assert bellman_operator(mdp, np.ones((1, 1)), np.zeros((1, 1)))[0, 0] == 1.0


@pytest.mark.parametrize("tau", [0.0, 0.1])
def test_bellman_matches_triple_loop(tau):
    rng = np.random.default_rng(4)
    mdp = generate_garnet(4, 3, 3, seed=4)
    pi = random_policy(rng, 4, 3)
    q = rng.normal(size=(4, 3))
    np.testing.assert_allclose(regularized_bellman_operator(mdp, pi, q, tau),
                               loop_bellman(mdp, pi, q, tau), rtol=0, atol=1e-12)


def test_regularized_tau0_collapses():
    rng = np.random.default_rng(5)
    mdp = generate_garnet(5, 3, 2, seed=5)
    pi, q = random_policy(rng, 5, 3), rng.normal(size=(5, 3))
    assert np.array_equal(regularized_bellman_operator(mdp, pi, q, 0.0),
                          bellman_operator(mdp, pi, q))


def test_entropy_bonus_uniform_two_actions():
    tau = 0.3
    v = regularized_values(np.full((1, 2), 0.5), np.zeros((1, 2)), tau)
    assert v[0] == pytest.approx(tau * np.log(2), abs=1e-15)


def test_zero_probability_raises():
    mdp = generate_garnet(2, 2, 1, seed=0)
    pi = np.array([[1.0, 0.0], [0.5, 0.5]])
    with pytest.raises(NumericDomainError):
        regularized_bellman_operator(mdp, pi, np.zeros((2, 2)), 0.1)
    # tau = 0 tolerates deterministic policies
    bellman_operator(mdp, pi, np.zeros((2, 2)))


def test_shape_mismatch():
    mdp = generate_garnet(3, 2, 1, seed=0)
    with pytest.raises(ParameterError):
        bellman_operator(mdp, np.ones((3, 3)) / 3, np.zeros((3, 2)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), gamma=st.floats(0.0, 0.99))
def test_contraction(seed, gamma):
    rng = np.random.default_rng(seed)
    mdp = generate_garnet(5, 3, 3, seed=seed, gamma=gamma)
    pi = random_policy(rng, 5, 3)
    q1, q2 = rng.normal(size=(2, 5, 3)) * 5
    lhs = np.max(np.abs(bellman_operator(mdp, pi, q1) - bellman_operator(mdp, pi, q2)))
    assert lhs <= gamma * np.max(np.abs(q1 - q2)) + 1e-12


# -- policy evaluation -----------------------------------------------------------

def test_q_geometric_series():
    mdp = TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), gamma=0.9)
    for method in ("solve", "iterate"):
        assert exact_q_of_policy(mdp, np.ones((1, 1)), 0.0, method)[0, 0] == pytest.approx(10.0,
                                                                                         abs=1e-9)


def test_q_uniform_entropy_closed_form():
    P = np.ones((1, 2, 1))
    mdp = TabularMdp(P, np.zeros((1, 2)), gamma=0.5)
    q = exact_q_of_policy(mdp, np.full((1, 2), 0.5), tau=1.0)
    np.testing.assert_allclose(q, np.log(2), atol=1e-12)


@pytest.mark.parametrize("tau", [0.0, 0.05, 1.0])
def test_solve_and_iterate_agree(tau):
    rng = np.random.default_rng(8)
    mdp = generate_garnet(7, 3, 3, seed=8, gamma=0.9)
    pi = random_policy(rng, 7, 3)
    a = exact_q_of_policy(mdp, pi, tau, "solve")
    b = exact_q_of_policy(mdp, pi, tau, "iterate")
    assert np.max(np.abs(a - b)) < 1e-9


def test_power_iteration_oracle():
    rng = np.random.default_rng(9)
    mdp = generate_garnet(6, 2, 3, seed=9, gamma=0.8)
    pi = random_policy(rng, 6, 2)
    q = np.zeros((6, 2))
    for _ in range(400):
        q = loop_bellman(mdp, pi, q)
    assert np.max(np.abs(exact_q_of_policy(mdp, pi) - q)) < 1e-9


def test_iterate_convergence_error():
    mdp = generate_garnet(3, 2, 2, seed=0, gamma=0.99)
    with pytest.raises(ConvergenceError) as info:
        exact_q_of_policy(mdp, np.full((3, 2), 0.5), method="iterate", max_iters=3)
    assert info.value.residual > 0


# -- optimal control ---------------------------------------------------------------

def bandit():
    return TabularMdp(np.ones((1, 2, 1)), np.array([[1.0, 0.0]]), gamma=0.0)


def test_small_tau_sharpens():
    pi, _ = exact_optimal_regularized(bandit(), 1e-8)
    np.testing.assert_allclose(pi, [[1.0, 0.0]], atol=1e-12)


def test_tau_one_softmax():
    pi, _ = exact_optimal_regularized(bandit(), 1.0)
    e = np.e
    np.testing.assert_allclose(pi[0], [e / (1 + e), 1 / (1 + e)], atol=1e-12)
    assert pi[0, 0] == pytest.approx(0.7311, abs=1e-4)


def test_tau0_greedy_self_consistent():
    mdp = generate_garnet(12, 4, 3, seed=12, gamma=0.9)
    pi, q = exact_optimal_regularized(mdp, 0.0)
    assert np.all(pi.sum(axis=1) == 1.0) and set(np.unique(pi)) <= {0.0, 1.0}
    assert np.max(np.abs(exact_q_of_policy(mdp, pi) - q)) < 1e-9


def test_greedy_ties_lowest_index():
    pi = greedy_policy(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]]))
    assert np.array_equal(pi, [[1, 0, 0], [0, 1, 0]])


@pytest.mark.parametrize("seed,s", [(0, 5), (1, 20), (2, 50)])
def test_tau0_matches_classic_vi(seed, s):
    mdp = generate_garnet(s, 3, min(4, s), seed=seed, gamma=0.9)
    _, q = exact_optimal_regularized(mdp, 0.0)
    oracle = classic_value_iteration(mdp.transition.tolist(), mdp.reward.tolist(),
                                     mdp.gamma)
    assert np.max(np.abs(q - oracle)) < 1e-8


@pytest.mark.parametrize("tau", [1e-4, 0.1, 2.0])
def test_regularized_value_relation(tau):
    """<pi, Q - tau ln pi> = tau lse(Q/tau) at pi = softmax(Q/tau)."""
    mdp = generate_garnet(6, 3, 2, seed=3)
    pi, q = exact_optimal_regularized(mdp, tau)
    lhs = regularized_values(np.maximum(pi, 1e-300), q, tau)
    m = q.max(axis=1)
    rhs = m + tau * np.log(np.exp((q - m[:, None]) / tau).sum(axis=1))
    assert np.max(np.abs(lhs - rhs)) < 1e-10
    np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-10)
