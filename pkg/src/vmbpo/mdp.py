"""Finite stopping-time MDPs, trajectories and brute-force enumeration.

Conventions used throughout the package:

* ``reward`` has shape ``(S, A)`` and ``transition`` has shape ``(S, A, S)``.
* Policies are row-stochastic arrays of shape ``(S, A)``; rows of terminal
  states are carried along but never read.
* Terminal states are absorbing and reward-free. Nothing is read from a
  terminal row of ``reward`` or ``transition``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import EnumerationBudgetError, NotTransientError

STOCHASTIC_ATOL = 1e-12
ENUMERATION_BUDGET = 10**7
SAMPLE_STEP_CAP = 10**6


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    states: tuple
    terminals: tuple
    actions: tuple
    reward: np.ndarray
    transition: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(str(s) for s in self.states))
        object.__setattr__(self, "actions", tuple(str(a) for a in self.actions))
        object.__setattr__(self, "terminals", tuple(sorted(int(t) for t in self.terminals)))
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "initial", _frozen(self.initial))

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def terminal_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.terminals)] = True
        return mask

    @property
    def nonterminals(self) -> np.ndarray:
        return np.flatnonzero(~self.terminal_mask)

    def state_index(self, name: str) -> int:
        return self.states.index(name)

    def action_index(self, name: str) -> int:
        return self.actions.index(name)


@dataclass(frozen=True)
class Trajectory:
    """``states`` has one more entry than ``actions``; ``len(actions)`` is the stopping time."""

    states: tuple
    actions: tuple
    rewards: tuple = field(default=())

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))


def uniform_policy(mdp: FiniteMdp) -> np.ndarray:
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def deterministic_policy(mdp: FiniteMdp, actions: Sequence[int]) -> np.ndarray:
    pi = np.zeros((mdp.n_states, mdp.n_actions))
    pi[np.arange(mdp.n_states), np.asarray(actions, dtype=int)] = 1.0
    return pi


def _reaches_terminal(mdp: FiniteMdp, edge: np.ndarray) -> np.ndarray:
    """Backward reachability on a boolean successor graph ``edge[x, x']``."""
    ok = mdp.terminal_mask.copy()
    while True:
        new = ok | (edge & ok[None, :]).any(axis=1)
        if (new == ok).all():
            return ok
        ok = new


def validate(mdp: FiniteMdp) -> list[str]:
    """Return a list of violated invariants; an empty list means the MDP is valid."""
    S, A = mdp.n_states, mdp.n_actions
    problems = []
    if mdp.reward.shape != (S, A):
        problems.append(f"reward shape {mdp.reward.shape} != {(S, A)}")
    if mdp.transition.shape != (S, A, S):
        problems.append(f"transition shape {mdp.transition.shape} != {(S, A, S)}")
    if mdp.initial.shape != (S,):
        problems.append(f"initial shape {mdp.initial.shape} != {(S,)}")
    if problems:
        return problems
    if not mdp.terminals:
        problems.append("no terminal states")
    if any(t < 0 or t >= S for t in mdp.terminals):
        return problems + ["terminal index out of range"]

    live = mdp.nonterminals
    P = mdp.transition[live]
    if not np.isfinite(mdp.reward[live]).all():
        problems.append("reward not finite")
    if (P < 0).any():
        problems.append("negative transition probability")
    sums = P.sum(axis=-1)
    for i, j in zip(*np.nonzero(np.abs(sums - 1.0) > STOCHASTIC_ATOL)):
        problems.append(
            f"row not stochastic: state {mdp.states[live[i]]} action {mdp.actions[j]} sums to {sums[i, j]!r}"
        )
    if (mdp.initial < 0).any() or abs(mdp.initial.sum() - 1.0) > STOCHASTIC_ATOL:
        problems.append("initial distribution not stochastic")
    if problems:
        return problems

    edge = (mdp.transition > 0).any(axis=1)
    edge[mdp.terminal_mask] = False
    stuck = np.flatnonzero(~_reaches_terminal(mdp, edge))
    if stuck.size:
        names = ", ".join(mdp.states[i] for i in stuck)
        problems.append(f"not transient: no terminal reachable from {names}")
    return problems


def check_valid(mdp: FiniteMdp) -> None:
    problems = validate(mdp)
    if problems:
        raise ValueError("invalid MDP: " + "; ".join(problems))


def discount_transform(mdp: FiniteMdp, gamma: float, terminal_name: str = "discount_end") -> FiniteMdp:
    """Emulate discounting by terminating with probability ``1 - gamma`` at every step.

    Mass goes to the first existing terminal state, or to a newly appended one
    when the MDP has none. Re-applying the transform therefore composes
    multiplicatively in ``gamma``.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma!r}")
    states, terminals = list(mdp.states), list(mdp.terminals)
    P, r, p0 = mdp.transition, mdp.reward, mdp.initial
    if terminals:
        sink = terminals[0]
    else:
        sink = len(states)
        states.append(terminal_name)
        terminals.append(sink)
        S = len(states)
        P = np.pad(P, ((0, 1), (0, 0), (0, 1)))
        P[sink, :, sink] = 1.0
        r = np.pad(r, ((0, 1), (0, 0)))
        p0 = np.pad(p0, (0, 1))
    P = np.array(P, dtype=float)
    live = np.ones(len(states), dtype=bool)
    live[terminals] = False
    P[live] *= gamma
    P[live, :, sink] += 1.0 - gamma
    return FiniteMdp(states, terminals, mdp.actions, r, P, p0)


# ---------------------------------------------------------------------------
# enumeration


@dataclass(frozen=True, eq=False)
class TrajectorySet:
    """All enumerated trajectories as padded index arrays (padding is ``-1``).

    ``complete`` is False when live (non-terminated) paths were cut at
    ``max_len``; sums over such a set do not cover the whole trajectory space.
    """

    states: np.ndarray
    actions: np.ndarray
    lengths: np.ndarray
    complete: bool

    def __len__(self) -> int:
        return len(self.lengths)

    def __iter__(self) -> Iterator[Trajectory]:
        for s, a, n in zip(self.states, self.actions, self.lengths):
            yield Trajectory(tuple(int(x) for x in s[: n + 1]), tuple(int(x) for x in a[:n]))

    def step_mask(self) -> np.ndarray:
        width = self.actions.shape[1]
        return np.arange(width)[None, :] < self.lengths[:, None]

    def step_sum(self, table: np.ndarray) -> np.ndarray:
        """Sum ``table[x_t, a_t, x_{t+1}]`` (or ``table[x_t, a_t]``) along each trajectory."""
        mask = self.step_mask()
        x = np.where(mask, self.states[:, :-1], 0)
        a = np.where(mask, self.actions, 0)
        if table.ndim == 2:
            vals = table[x, a]
        else:
            y = np.where(mask, self.states[:, 1:], 0)
            vals = table[x, a, y]
        return np.where(mask, vals, 0.0).sum(axis=1)

    def returns(self, mdp: FiniteMdp) -> np.ndarray:
        return self.step_sum(mdp.reward)

    def log_probs(self, mdp: FiniteMdp, policy: np.ndarray, dynamics: np.ndarray | None = None) -> np.ndarray:
        """log p0(x0) + sum_t [log policy(a_t|x_t) + log dynamics(x_{t+1}|x_t,a_t)]."""
        dynamics = mdp.transition if dynamics is None else dynamics
        with np.errstate(divide="ignore"):
            lp0 = np.log(mdp.initial)[self.states[:, 0]]
            step = np.log(policy)[:, :, None] + np.log(dynamics)
        return lp0 + self.step_sum(step)


def enumerate_trajectories(mdp: FiniteMdp, max_len: int | None = None,
                           budget: int = ENUMERATION_BUDGET) -> TrajectorySet:
    """Every trajectory of length <= ``max_len`` that ends at a terminal state.

    Branching ranges over all actions and the transition support, so one
    enumeration serves any policy. ``max_len`` defaults to the number of
    nonterminal states, which is exact for acyclic MDPs.
    """
    if max_len is None:
        max_len = len(mdp.nonterminals)
    term = mdp.terminal_mask
    branches = []
    for x in range(mdp.n_states):
        a, y = np.nonzero(mdp.transition[x] > 0)
        branches.append((a, y))

    starts = np.flatnonzero(mdp.initial > 0)
    paths_s = starts[:, None]
    paths_a = np.zeros((len(starts), 0), dtype=int)
    done_s, done_a, done_len = [], [], []
    total = len(starts)
    for t in range(max_len + 1):
        last = paths_s[:, -1]
        finished = term[last]
        if finished.any():
            done_s.append(paths_s[finished])
            done_a.append(paths_a[finished])
            done_len.append(np.full(finished.sum(), t))
        paths_s, paths_a = paths_s[~finished], paths_a[~finished]
        if t == max_len or len(paths_s) == 0:
            break
        new_s, new_a = [], []
        last = paths_s[:, -1]
        for x in np.unique(last):
            idx = np.flatnonzero(last == x)
            a, y = branches[x]
            total += len(idx) * len(a)
            if total > budget:
                raise EnumerationBudgetError(f"more than {budget} partial trajectories")
            rep = np.repeat(idx, len(a))
            new_s.append(np.hstack([paths_s[rep], np.tile(y, len(idx))[:, None]]))
            new_a.append(np.hstack([paths_a[rep], np.tile(a, len(idx))[:, None]]))
        paths_s = np.vstack(new_s)
        paths_a = np.vstack(new_a)
    complete = len(paths_s) == 0

    width = max((int(l[0]) for l in done_len), default=0)
    n = sum(len(l) for l in done_len)
    S = np.full((n, width + 1), -1, dtype=int)
    Acts = np.full((n, width), -1, dtype=int)
    i = 0
    for s, a, l in zip(done_s, done_a, done_len):
        k = len(l)
        S[i:i + k, : s.shape[1]] = s
        Acts[i:i + k, : a.shape[1]] = a
        i += k
    lengths = np.concatenate(done_len) if done_len else np.zeros(0, dtype=int)
    return TrajectorySet(S, Acts, lengths.astype(int), complete)


def trajectory_log_prob(mdp: FiniteMdp, policy: np.ndarray, traj: Trajectory) -> float:
    """log p_pi(traj); ``-inf`` whenever some factor is zero."""
    terms = [mdp.initial[traj.states[0]]]
    for t, a in enumerate(traj.actions):
        x, y = traj.states[t], traj.states[t + 1]
        terms.append(policy[x, a])
        terms.append(mdp.transition[x, a, y])
    terms = np.asarray(terms)
    if (terms <= 0).any():
        return float("-inf")
    return float(np.log(terms).sum())


# ---------------------------------------------------------------------------
# exact evaluation and sampling


def check_transient_under(mdp: FiniteMdp, policy: np.ndarray, dynamics: np.ndarray | None = None) -> None:
    dynamics = mdp.transition if dynamics is None else dynamics
    edge = ((policy[:, :, None] > 0) & (dynamics > 0)).any(axis=1)
    edge[mdp.terminal_mask] = False
    ok = _reaches_terminal(mdp, edge)
    if not ok.all():
        names = ", ".join(mdp.states[i] for i in np.flatnonzero(~ok))
        raise NotTransientError(f"no terminal reachable under the given policy from {names}")


def policy_evaluation_matrix(mdp: FiniteMdp, policy: np.ndarray, dynamics: np.ndarray | None = None):
    """Nonterminal-to-nonterminal transition matrix under ``policy`` and the index map."""
    dynamics = mdp.transition if dynamics is None else dynamics
    live = mdp.nonterminals
    P = np.einsum("xa,xay->xy", policy[live], dynamics[live])[:, live]
    return P, live


def expected_return(mdp: FiniteMdp, policy: np.ndarray) -> float:
    """J(pi) by solving the linear evaluation system over nonterminal states."""
    check_transient_under(mdp, policy)
    P, live = policy_evaluation_matrix(mdp, policy)
    r = (policy[live] * mdp.reward[live]).sum(axis=1)
    v = np.linalg.solve(np.eye(len(live)) - P, r)
    return float(mdp.initial[live] @ v)


def optimal_control(mdp: FiniteMdp, tol: float = 1e-12, max_sweeps: int = 100_000):
    """Classical (hard-max) optimal values and a greedy deterministic policy.

    Used as the reference for "optimal expected return" in learning tests.
    """
    live = mdp.nonterminals
    v = np.zeros(mdp.n_states)
    for _ in range(max_sweeps):
        q = mdp.reward + mdp.transition @ v
        new = np.zeros_like(v)
        new[live] = q[live].max(axis=1)
        if np.max(np.abs(new - v)) <= tol:
            v = new
            break
        v = new
    else:
        raise NotTransientError("optimal value iteration did not converge")
    q = mdp.reward + mdp.transition @ v
    greedy = q.argmax(axis=1)
    return float(mdp.initial @ v), v, deterministic_policy(mdp, greedy)


def sample_trajectory(mdp: FiniteMdp, policy: np.ndarray, seed, max_steps: int = SAMPLE_STEP_CAP) -> Trajectory:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    term = mdp.terminal_mask
    x = int(rng.choice(mdp.n_states, p=mdp.initial))
    states, actions, rewards = [x], [], []
    while not term[x]:
        if len(actions) >= max_steps:
            raise NotTransientError(f"trajectory exceeded {max_steps} steps")
        a = int(rng.choice(mdp.n_actions, p=policy[x]))
        rewards.append(float(mdp.reward[x, a]))
        x = int(rng.choice(mdp.n_states, p=mdp.transition[x, a]))
        actions.append(a)
        states.append(x)
    return Trajectory(tuple(states), tuple(actions), tuple(rewards))


# ---------------------------------------------------------------------------
# text format


def mdp_to_dict(mdp: FiniteMdp) -> dict:
    return {
        "states": list(mdp.states),
        "terminals": [mdp.states[t] for t in mdp.terminals],
        "actions": list(mdp.actions),
        "reward": mdp.reward.tolist(),
        "transition": mdp.transition.tolist(),
        "initial": mdp.initial.tolist(),
    }


def mdp_from_dict(doc: dict) -> FiniteMdp:
    states = list(doc["states"])
    terminals = [states.index(t) if isinstance(t, str) else int(t) for t in doc["terminals"]]
    return FiniteMdp(states, terminals, doc["actions"], doc["reward"], doc["transition"], doc["initial"])


def save_mdp(mdp: FiniteMdp, path) -> None:
    # float repr is the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(mdp_to_dict(mdp), indent=1) + "\n")


def load_mdp(path) -> FiniteMdp:
    return mdp_from_dict(json.loads(Path(path).read_text()))
