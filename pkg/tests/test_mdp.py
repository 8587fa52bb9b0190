import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmbpo.oracles import count_paths, path_moments
from vmbpo.envs import make_chain, make_random_mdp
from vmbpo.errors import EnumerationBudgetError, NotTransientError
from vmbpo.mdp import (
    FiniteMdp,
    deterministic_policy,
    discount_transform,
    enumerate_trajectories,
    expected_return,
    load_mdp,
    sample_trajectory,
    save_mdp,
    trajectory_log_prob,
    uniform_policy,
    validate,
)
from vmbpo.mdp import Trajectory


def stochastic_chain():
    """CHAIN2 with a second terminal so each action has two outcomes."""
    P = np.zeros((3, 2, 3))
    P[0, :, 1] = 0.3
    P[0, :, 2] = 0.7
    P[1, :, 1] = P[2, :, 2] = 1.0
    return FiniteMdp(["s0", "t1", "t2"], [1, 2], ["a0", "a1"], [[1, 0], [0, 0], [0, 0]], P, [1, 0, 0])


def two_cycle():
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = P[1, 0, 0] = 1.0
    return FiniteMdp(["u", "w"], [], ["a"], np.zeros((2, 1)), P, [1.0, 0.0])


# validate


def test_chain_is_valid(chain):
    assert validate(chain) == []


def test_row_not_stochastic_is_reported(chain):
    P = np.array(chain.transition)
    P[0, 0, 1] = 0.9
    bad = FiniteMdp(chain.states, chain.terminals, chain.actions, chain.reward, P, chain.initial)
    assert any("row not stochastic" in m for m in validate(bad))


def test_cycle_without_terminal_is_not_transient():
    P = np.zeros((3, 1, 3))
    P[0, 0, 1] = P[1, 0, 0] = 1.0
    P[2, 0, 2] = 1.0
    mdp = FiniteMdp(["u", "w", "end"], [2], ["a"], np.zeros((3, 1)), P, [1, 0, 0])
    assert any("not transient" in m for m in validate(mdp))


def test_bad_initial_and_negative_entries(chain):
    P = np.array(chain.transition)
    P[0, 1] = [1.5, -0.5]
    bad = FiniteMdp(chain.states, chain.terminals, chain.actions, chain.reward, P, [0.5, 0.4])
    problems = validate(bad)
    assert any("negative transition" in m for m in problems)
    assert any("initial distribution" in m for m in problems)


# discount transform


def test_discount_on_chain_keeps_terminal_mass(chain):
    out = discount_transform(chain, 0.99)
    assert out.transition[0, 0, 1] == pytest.approx(1.0, abs=1e-15)
    assert validate(out) == []


def test_discount_on_two_cycle_scales_rows():
    out = discount_transform(two_cycle(), 0.99)
    assert out.n_states == 3
    assert out.transition[0, 0, 1] == pytest.approx(0.99)
    assert out.transition[0, 0, 2] == pytest.approx(0.01)
    assert out.transition[1, 0, 0] == pytest.approx(0.99)
    assert validate(out) == []


@pytest.mark.parametrize("gamma", [1.0, 0.0, -0.5, 1.5])
def test_discount_rejects_gamma_outside_open_interval(chain, gamma):
    with pytest.raises(ValueError):
        discount_transform(chain, gamma)


@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.integers(0, 50))
@settings(max_examples=40, deadline=None)
def test_discount_composes_multiplicatively(g1, g2, seed):
    mdp = make_random_mdp(3, 2, 2, seed)
    twice = discount_transform(discount_transform(mdp, g1), g2)
    once = discount_transform(mdp, g1 * g2)
    assert validate(twice) == []
    live = mdp.nonterminals
    np.testing.assert_allclose(twice.transition[live], once.transition[live], atol=1e-14)


# enumeration


def test_chain_enumeration_has_two_paths(chain):
    trajs = enumerate_trajectories(chain, max_len=1)
    got = sorted((t.states, t.actions) for t in trajs)
    assert got == [((0, 1), (0,)), ((0, 1), (1,))]
    assert trajs.complete


def test_stochastic_chain_has_four_paths():
    assert len(enumerate_trajectories(stochastic_chain(), max_len=1)) == 4


@pytest.mark.parametrize("seed", range(8))
def test_path_count_matches_recursive_count(seed):
    mdp = make_random_mdp(6, 3, 5, seed, max_successors=3)
    trajs = enumerate_trajectories(mdp, max_len=5)
    assert len(trajs) == count_paths(mdp, 5)


def test_enumeration_budget():
    mdp = make_random_mdp(12, 4, 11, 0, max_successors=3)
    with pytest.raises(EnumerationBudgetError):
        enumerate_trajectories(mdp, budget=100)


def test_truncated_enumeration_of_a_cycle_is_incomplete():
    trajs = enumerate_trajectories(discount_transform(two_cycle(), 0.5), max_len=3)
    assert not trajs.complete
    assert len(trajs) == 3


@given(st.integers(0, 10_000), st.integers(2, 8), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_path_probabilities_sum_to_one(seed, n_states, n_actions):
    mdp = make_random_mdp(n_states, n_actions, min(5, n_states - 1), seed, single_start=False)
    pi = np.random.default_rng(seed).dirichlet(np.ones(n_actions), size=n_states)
    trajs = enumerate_trajectories(mdp)
    assert abs(np.exp(trajs.log_probs(mdp, pi)).sum() - 1.0) < 1e-9


# log-probabilities and returns


def test_trajectory_log_prob_examples(chain):
    traj = Trajectory((0, 1), (0,))
    assert trajectory_log_prob(chain, uniform_policy(chain), traj) == pytest.approx(math.log(0.5))
    assert trajectory_log_prob(chain, deterministic_policy(chain, [0, 0]), traj) == 0.0
    assert trajectory_log_prob(chain, deterministic_policy(chain, [1, 0]), traj) == float("-inf")


def test_expected_return_on_chain(chain):
    assert expected_return(chain, uniform_policy(chain)) == pytest.approx(0.5, abs=1e-15)
    assert expected_return(chain, deterministic_policy(chain, [0, 0])) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_expected_return_matches_enumeration_and_recursion(seed):
    mdp = make_random_mdp(6, 3, 4, seed, single_start=False)
    pi = np.random.default_rng(seed).dirichlet(np.ones(3), size=6)
    trajs = enumerate_trajectories(mdp)
    by_enum = float(np.exp(trajs.log_probs(mdp, pi)) @ trajs.returns(mdp))
    mass, by_rec, _ = path_moments(mdp, pi, 1.0)
    assert mass == pytest.approx(1.0, abs=1e-12)
    assert expected_return(mdp, pi) == pytest.approx(by_enum, abs=1e-10)
    assert expected_return(mdp, pi) == pytest.approx(by_rec, abs=1e-10)


def test_expected_return_reports_non_transience():
    # one action loops forever, so a policy that always takes it never stops
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = 1.0
    P[0, 1, 1] = 1.0
    P[1, :, 1] = 1.0
    mdp = FiniteMdp(["s", "t"], [1], ["stay", "go"], np.zeros((2, 2)), P, [1, 0])
    assert validate(mdp) == []
    with pytest.raises(NotTransientError):
        expected_return(mdp, deterministic_policy(mdp, [0, 0]))


# sampling


def test_chain_samples_have_length_one(chain):
    for seed in range(5):
        assert sample_trajectory(chain, uniform_policy(chain), seed).length == 1
    traj = sample_trajectory(chain, deterministic_policy(chain, [0, 0]), 3)
    assert traj.rewards == (1.0,)


def test_sampling_is_seeded(chain):
    mdp = make_random_mdp(8, 3, 5, 2)
    pi = uniform_policy(mdp)
    assert sample_trajectory(mdp, pi, 11) == sample_trajectory(mdp, pi, 11)


def test_empirical_action_split_within_binomial_bound(chain):
    pi = np.array([[0.3, 0.7], [0.5, 0.5]])
    rng = np.random.default_rng(0)
    n = 100_000
    hits = sum(sample_trajectory(chain, pi, rng).actions[0] == 0 for _ in range(n))
    assert abs(hits / n - 0.3) <= 3 * math.sqrt(0.3 * 0.7 / n)


def test_sampling_step_cap():
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = 1.0
    P[0, 1, 1] = 1.0
    P[1, :, 1] = 1.0
    mdp = FiniteMdp(["s", "t"], [1], ["stay", "go"], np.zeros((2, 2)), P, [1, 0])
    with pytest.raises(NotTransientError):
        sample_trajectory(mdp, deterministic_policy(mdp, [0, 0]), 0, max_steps=50)


# text format


@pytest.mark.parametrize("seed", range(5))
def test_text_round_trip_is_exact(tmp_path, seed):
    mdp = make_random_mdp(7, 3, 4, seed, single_start=False)
    path = tmp_path / "m.json"
    save_mdp(mdp, path)
    back = load_mdp(path)
    assert back.states == mdp.states and back.terminals == mdp.terminals
    assert np.array_equal(back.transition, mdp.transition)
    assert np.array_equal(back.reward, mdp.reward)
    assert np.array_equal(back.initial, mdp.initial)


def test_arrays_are_read_only(chain):
    with pytest.raises(ValueError):
        chain.reward[0, 0] = 5.0


def test_chain_fixture_is_exact():
    mdp = make_chain()
    assert mdp.states == ("s0", "term") and mdp.terminals == (1,)
    assert mdp.reward.tolist() == [[1.0, 0.0], [0.0, 0.0]]
    assert mdp.transition[0].tolist() == [[0.0, 1.0], [0.0, 1.0]]
