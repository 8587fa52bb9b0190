import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import CHAIN_VALUE, TWIST_PROB, random_policy
from vmbpo.oracles import path_moments, random_distribution, regularized_argmax
from vmbpo.envs import make_random_mdp
from vmbpo.errors import SupportError
from vmbpo.mdp import enumerate_trajectories, uniform_policy
from vmbpo.solvers import value_iteration
from vmbpo.variational import (
    apply_induced_operator,
    apply_optimal_operator,
    elbo,
    log_expect_exp,
    log_likelihood,
    q_from_v,
    softmax_value,
    twist_dynamics,
    twist_policy,
    xlogy_ratio,
)


def random_q(mdp, rng):
    """A random variational dynamics kernel on the support of p."""
    q = rng.random(mdp.transition.shape) * (mdp.transition > 0)
    return q / q.sum(axis=-1, keepdims=True)


# closed-form values on the hand-made fixtures


def test_chain_values(chain, chain_pi):
    v = np.zeros(2)
    q = q_from_v(chain, 1.0, v)
    assert q[0].tolist() == [1.0, 0.0]
    assert softmax_value(chain_pi, q, chain.terminal_mask)[0] == pytest.approx(CHAIN_VALUE, abs=1e-15)
    assert twist_policy(chain_pi, q)[0, 0] == pytest.approx(TWIST_PROB, abs=1e-15)


def test_twist2_dynamics(twist2):
    v = np.array([0.0, 1.0, 0.0, 0.0])
    qd = twist_dynamics(twist2, v)
    assert qd[0, 0, 1] == pytest.approx(TWIST_PROB, abs=1e-15)
    assert qd[0, 0, 2] == pytest.approx(1 - TWIST_PROB, abs=1e-15)
    # terminal rows are left alone
    assert np.array_equal(qd[3], twist2.transition[3])


def test_twist2_value_iteration(twist2):
    sol = value_iteration(twist2, 1.0, uniform_policy(twist2))
    np.testing.assert_allclose(sol.v_pi, [CHAIN_VALUE, 1.0, 0.0, 0.0], atol=1e-12)


def test_twist_keeps_zero_mass_at_zero():
    base = np.array([[0.0, 0.5, 0.5]])
    out = twist_policy(base, np.array([[50.0, 0.0, 1.0]]))
    assert out[0, 0] == 0.0
    assert out.sum() == pytest.approx(1.0)


def test_log_expect_exp_is_stable():
    assert log_expect_exp(np.array([0.5, 0.5]), np.array([1000.0, 1000.0])) == pytest.approx(1000.0)
    assert log_expect_exp(np.array([1.0, 0.0]), np.array([-800.0, 5.0])) == pytest.approx(-800.0)


def test_xlogy_ratio_conventions():
    assert xlogy_ratio(np.array([0.0]), np.array([0.0]))[0] == 0.0
    with pytest.raises(SupportError):
        xlogy_ratio(np.array([0.5]), np.array([0.0]))


def test_eta_must_be_positive(chain, chain_pi):
    with pytest.raises(ValueError):
        apply_optimal_operator(chain, 0.0, chain_pi, np.zeros(2))
    with pytest.raises(ValueError):
        log_likelihood(chain, -1.0, chain_pi)


# twisting against a numerical simplex maximizer


def test_twist_policy_matches_numerical_maximizer():
    rng = np.random.default_rng(7)
    for i in range(100):
        n = int(rng.integers(1, 7))
        base = random_distribution(rng, n, zeros=i % 3 == 0)
        scores = rng.normal(0, 3, n)
        q_num, value_num = regularized_argmax(base, scores)
        q = twist_policy(base[None], scores[None])[0]
        assert np.max(np.abs(q - q_num)) < 1e-6
        assert softmax_value(base[None], scores[None])[0] == pytest.approx(value_num, abs=1e-6)


def test_twist_dynamics_matches_numerical_maximizer():
    rng = np.random.default_rng(8)
    for seed in range(20):
        mdp = make_random_mdp(6, 2, 3, seed, max_successors=3)
        v = rng.normal(0, 2, mdp.n_states)
        v[mdp.terminal_mask] = 0.0
        qd = twist_dynamics(mdp, v)
        for x in mdp.nonterminals:
            for a in range(mdp.n_actions):
                target, _ = regularized_argmax(mdp.transition[x, a], v)
                assert np.max(np.abs(qd[x, a] - target)) < 1e-6


# operators


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_induced_operator_modes_agree(seed):
    rng = np.random.default_rng(seed)
    mdp = make_random_mdp(7, 3, 4, seed % 997)
    pi = random_policy(mdp, rng)
    q_c = random_policy(mdp, rng)
    v = rng.normal(0, 3, mdp.n_states)
    v[mdp.terminal_mask] = 0
    a = apply_induced_operator(mdp, 0.7, pi, q_c, v, "model_based")
    b = apply_induced_operator(mdp, 0.7, pi, q_c, v, "model_free")
    assert np.max(np.abs(a - b)) < 1e-10


@given(st.integers(0, 10_000), st.floats(0.0, 3.0))
@settings(max_examples=30, deadline=None)
def test_operators_are_monotone(seed, shift):
    rng = np.random.default_rng(seed)
    mdp = make_random_mdp(6, 2, 4, seed % 991)
    pi = random_policy(mdp, rng)
    q_c = random_policy(mdp, rng)
    v = rng.normal(0, 2, mdp.n_states)
    w = v + shift * rng.random(mdp.n_states)
    for op in (lambda u: apply_optimal_operator(mdp, 1.3, pi, u),
               lambda u: apply_induced_operator(mdp, 1.3, pi, q_c, u)):
        assert np.all(op(w) >= op(v) - 1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_optimal_operator_dominates_induced(seed):
    rng = np.random.default_rng(seed)
    mdp = make_random_mdp(6, 3, 3, seed % 983)
    pi = random_policy(mdp, rng)
    v = rng.normal(0, 2, mdp.n_states)
    v[mdp.terminal_mask] = 0
    best = apply_optimal_operator(mdp, 1.0, pi, v)
    induced = apply_induced_operator(mdp, 1.0, pi, random_policy(mdp, rng), v)
    assert np.all(best >= induced - 1e-10)
    # and the twisted policy attains it
    tight = apply_induced_operator(mdp, 1.0, pi, twist_policy(pi, q_from_v(mdp, 1.0, v)), v)
    assert np.max(np.abs(tight - best)) < 1e-10


# ELBO and likelihood


def test_chain_likelihood(chain, chain_pi):
    assert log_likelihood(chain, 1.0, chain_pi) == pytest.approx(CHAIN_VALUE, abs=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_likelihood_matches_recursion(seed):
    mdp = make_random_mdp(6, 2, 4, seed, single_start=False)
    pi = random_policy(mdp, np.random.default_rng(seed))
    _, _, mgf = path_moments(mdp, pi, 0.8)
    assert log_likelihood(mdp, 0.8, pi) == pytest.approx(np.log(mgf), abs=1e-12)


@given(st.integers(0, 10_000), st.floats(0.1, 3.0))
@settings(max_examples=40, deadline=None)
def test_elbo_never_exceeds_likelihood(seed, eta):
    rng = np.random.default_rng(seed)
    mdp = make_random_mdp(6, 3, 4, seed % 1009, single_start=bool(seed % 2))
    pi = random_policy(mdp, rng)
    trajs = enumerate_trajectories(mdp)
    lower = elbo(mdp, eta, random_policy(mdp, rng), random_q(mdp, rng), pi, trajs)
    assert lower <= log_likelihood(mdp, eta, pi, trajs) + 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_elbo_is_tight_at_twisted_distributions(seed):
    mdp = make_random_mdp(7, 3, 5, seed)
    pi = random_policy(mdp, np.random.default_rng(seed))
    sol = value_iteration(mdp, 1.0, pi)
    gap = log_likelihood(mdp, 1.0, pi) - elbo(mdp, 1.0, sol.q_c_star, sol.q_d_star, pi)
    assert abs(gap) < 1e-8


def test_elbo_rejects_unsupported_variational_policy(chain):
    pi = np.array([[1.0, 0.0], [0.5, 0.5]])
    with pytest.raises(SupportError):
        elbo(chain, 1.0, np.array([[0.5, 0.5], [0.5, 0.5]]), chain.transition, pi)
