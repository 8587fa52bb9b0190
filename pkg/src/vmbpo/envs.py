"""Problem generators (finite MDPs) and environments the learners interact with."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .mdp import FiniteMdp


def make_chain() -> FiniteMdp:
    """CHAIN2: one decision state, two actions, both ending the episode.

    ``a0`` pays 1 and ``a1`` pays 0.
    """
    P = np.zeros((2, 2, 2))
    P[0, :, 1] = 1.0
    P[1, :, 1] = 1.0
    return FiniteMdp(["s0", "term"], [1], ["a0", "a1"], [[1.0, 0.0], [0.0, 0.0]], P, [1.0, 0.0])


def make_twist2() -> FiniteMdp:
    """TWIST2: ``x`` moves to ``g`` or ``b`` with probability 1/2 each.

    ``g`` then pays 1 and ``b`` pays 0 on the way to the terminal, so with a
    temperature of 1 the E-step values are V(g)=1, V(b)=0.
    """
    names = ["x", "g", "b", "term"]
    P = np.zeros((4, 1, 4))
    P[0, 0, 1] = P[0, 0, 2] = 0.5
    P[1:, 0, 3] = 1.0
    r = np.array([[0.0], [1.0], [0.0], [0.0]])
    return FiniteMdp(names, [3], ["a"], r, P, [1.0, 0.0, 0.0, 0.0])


def make_random_mdp(n_states: int, n_actions: int, layers: int, seed: int,
                    max_successors: int = 2, single_start: bool = True) -> FiniteMdp:
    """Layered acyclic MDP with rewards uniform in [-1, 1].

    ``n_states`` includes the single terminal state (the last index). The
    ``n_states - 1`` decision states are split into ``layers`` nonempty
    layers; each (state, action) moves to at most ``max_successors`` states of
    the next layer or the terminal, and the last layer always terminates.

    With ``single_start`` every episode begins in ``s0``; otherwise the initial
    distribution is a Dirichlet draw over all decision states. The ELBO at the
    E-step optimum is tight only for a deterministic start, since the
    variational distribution keeps p0.
    """
    if not 2 <= n_states <= 12:
        raise ValueError("n_states must lie in [2, 12]")
    if not 1 <= layers <= n_states - 1:
        raise ValueError("need 1 <= layers <= n_states - 1")
    rng = np.random.default_rng(seed)
    n_live = n_states - 1
    term = n_live
    cuts = np.sort(rng.choice(np.arange(1, n_live), size=layers - 1, replace=False)) if layers > 1 else []
    groups = np.split(np.arange(n_live), cuts)

    P = np.zeros((n_states, n_actions, n_states))
    P[term, :, term] = 1.0
    for depth, group in enumerate(groups):
        nxt = list(groups[depth + 1]) + [term] if depth + 1 < len(groups) else [term]
        for x in group:
            for a in range(n_actions):
                k = min(len(nxt), int(rng.integers(1, max_successors + 1)))
                succ = rng.choice(nxt, size=k, replace=False)
                P[x, a, succ] = rng.dirichlet(np.ones(k))
    # exact row sums after the Dirichlet draw
    P[:n_live] /= P[:n_live].sum(axis=-1, keepdims=True)
    r = np.zeros((n_states, n_actions))
    r[:n_live] = rng.uniform(-1.0, 1.0, size=(n_live, n_actions))
    p0 = np.zeros(n_states)
    if single_start:
        p0[0] = 1.0
    else:
        p0[:n_live] = rng.dirichlet(np.ones(n_live))
    names = [f"s{i}" for i in range(n_live)] + ["term"]
    return FiniteMdp(names, [term], [f"a{j}" for j in range(n_actions)], r, P, p0)


GRID_MOVES = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}


def make_gridworld(size: int = 3, step_reward: float = -0.01, goal_reward: float = 1.0) -> FiniteMdp:
    """Deterministic ``size`` x ``size`` grid; start top-left, terminal goal bottom-right.

    Every move costs ``step_reward``; the move that enters the goal also pays
    ``goal_reward``. Moving into a wall leaves the agent in place. The optimal
    return is ``goal_reward + step_reward * 2 * (size - 1)``.
    """
    n = size * size
    goal = n - 1
    P = np.zeros((n, len(GRID_MOVES), n))
    r = np.zeros((n, len(GRID_MOVES)))
    for i in range(size):
        for j in range(size):
            x = i * size + j
            for a, (di, dj) in enumerate(GRID_MOVES.values()):
                ni, nj = i + di, j + dj
                if not (0 <= ni < size and 0 <= nj < size):
                    ni, nj = i, j
                y = ni * size + nj
                P[x, a, y] = 1.0
                if x != goal:
                    r[x, a] = step_reward + (goal_reward if y == goal else 0.0)
    p0 = np.zeros(n)
    p0[0] = 1.0
    names = [f"c{i}{j}" for i in range(size) for j in range(size)]
    return FiniteMdp(names, [goal], list(GRID_MOVES), r, P, p0)


def make_finite(spec: dict) -> FiniteMdp:
    """Build a finite MDP from a config section (``kind`` plus keyword arguments)."""
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "chain":
        return make_chain()
    if kind == "twist2":
        return make_twist2()
    if kind == "gridworld":
        return make_gridworld(**spec)
    if kind == "random":
        return make_random_mdp(**spec)
    raise ValueError(f"unknown finite MDP kind {kind!r}")


# ---------------------------------------------------------------------------
# interactive environments


class TabularEnv:
    """Episodic sampler over a :class:`FiniteMdp` with integer states and actions."""

    discrete = True

    def __init__(self, mdp: FiniteMdp, max_episode_steps: int = 1000):
        self.mdp = mdp
        self.n_states = mdp.n_states
        self.n_actions = mdp.n_actions
        self.max_episode_steps = max_episode_steps
        self._terminal = mdp.terminal_mask
        self.state = None
        self.t = 0

    def spawn(self) -> "TabularEnv":
        """Fresh instance with the same problem, for evaluation rollouts."""
        return TabularEnv(self.mdp, self.max_episode_steps)

    def reset(self, rng: np.random.Generator) -> int:
        self.state = int(rng.choice(self.n_states, p=self.mdp.initial))
        self.t = 0
        return self.state

    def step(self, action: int, rng: np.random.Generator):
        x = self.state
        reward = float(self.mdp.reward[x, action])
        y = int(rng.choice(self.n_states, p=self.mdp.transition[x, action]))
        self.state = y
        self.t += 1
        terminated = bool(self._terminal[y])
        truncated = not terminated and self.t >= self.max_episode_steps
        return y, reward, terminated, truncated

    def reward(self, states, actions) -> np.ndarray:
        return self.mdp.reward[np.asarray(states, dtype=int), np.asarray(actions, dtype=int)]

    def is_terminal(self, states) -> np.ndarray:
        return self._terminal[np.asarray(states, dtype=int)]


class PendulumState(NamedTuple):
    theta: float
    theta_dot: float
    t: int = 0


PENDULUM = dict(g=10.0, m=1.0, l=1.0, dt=0.05, max_torque=2.0, max_speed=8.0, horizon=200)


def angle_normalize(theta):
    """Wrap to (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta) + np.pi, 2 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


def pendulum_reward(theta, theta_dot, u):
    th = angle_normalize(theta)
    return -(th**2 + 0.1 * np.asarray(theta_dot) ** 2 + 0.001 * np.asarray(u) ** 2)


def pendulum_step(state: PendulumState, action, params: dict = PENDULUM):
    """One semi-implicit Euler step of the torque-limited swing-up pendulum.

    ``theta = 0`` is upright. Returns ``(next_state, reward, done)`` where
    ``done`` flags the time limit, not a true terminal.
    """
    g, m, l, dt = params["g"], params["m"], params["l"], params["dt"]
    u = float(np.clip(np.asarray(action, dtype=float).reshape(-1)[0], -params["max_torque"], params["max_torque"]))
    th, thdot = state.theta, state.theta_dot
    reward = float(pendulum_reward(th, thdot, u))
    thdot = thdot + (3.0 * g / (2.0 * l) * math.sin(th) + 3.0 / (m * l * l) * u) * dt
    thdot = float(np.clip(thdot, -params["max_speed"], params["max_speed"]))
    th = float(angle_normalize(th + thdot * dt))
    t = state.t + 1
    return PendulumState(th, thdot, t), reward, t >= params["horizon"]


class PendulumEnv:
    """Observation ``(cos theta, sin theta, theta_dot)``; one torque dimension in [-2, 2]."""

    discrete = False
    obs_dim = 3
    action_dim = 1

    def __init__(self, params: dict | None = None):
        self.params = dict(PENDULUM, **(params or {}))
        self.action_bound = self.params["max_torque"]
        self.state = None

    def spawn(self) -> "PendulumEnv":
        return PendulumEnv(self.params)

    @staticmethod
    def observe(state: PendulumState) -> np.ndarray:
        return np.array([math.cos(state.theta), math.sin(state.theta), state.theta_dot])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = PendulumState(float(rng.uniform(-np.pi, np.pi)), float(rng.uniform(-1.0, 1.0)), 0)
        return self.observe(self.state)

    def step(self, action, rng: np.random.Generator | None = None):
        self.state, reward, done = pendulum_step(self.state, action, self.params)
        return self.observe(self.state), reward, False, done

    def reward(self, obs, actions) -> np.ndarray:
        obs = np.atleast_2d(obs)
        u = np.clip(np.asarray(actions, dtype=float).reshape(len(obs), -1)[:, 0], -self.action_bound, self.action_bound)
        theta = np.arctan2(obs[:, 1], obs[:, 0])
        return pendulum_reward(theta, obs[:, 2], u)

    def is_terminal(self, obs) -> np.ndarray:
        return np.zeros(len(np.atleast_2d(obs)), dtype=bool)
