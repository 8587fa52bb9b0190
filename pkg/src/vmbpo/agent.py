"""Sample-based variational model-based policy optimization.

Eight parameterized functions are trained from data: the baseline policy
``pi``, variational dynamics ``qd``, variational policy ``qc``, the log-ratio
``nu = log(qd / p)``, the value ``v``, the action-value ``q`` and the two
targets ``v_targ`` / ``q_targ``. Every parameterized function comes in a
tabular flavor (one parameter per table cell, softmax rows where a
distribution is needed) and a small-MLP flavor for continuous states.

Each ``update_*`` call consumes a weighted :class:`Batch`. Sampled batches
carry uniform weights; passing every (state, action, next state) with its
exact probability as the weight turns an update into exact gradient descent
on the expected loss, which is how the tabular oracles are checked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nets as nn
from .errors import ConfigError, NumericalAbort

EXP_CLIP = 20.0
SOURCES = ("real", "synthetic")
M_STEP_MODES = ("copy", "map")
ALGORITHMS = ("vmbpo", "vmbpo_mfe")
SYNTHETIC_PER_STEP = (128, 256, 512)
PARAM_NAMES = ("pi", "qd", "qc", "nu", "v", "q", "v_targ", "q_targ")
TRAINED = ("pi", "qd", "qc", "nu", "v", "q")
METRIC_COLUMNS = ("wall_step", "env_steps", "mean_return", "return_sd", "elbo_estimate",
                  "loss_dynamics", "loss_nu", "loss_q", "loss_v", "loss_actor")


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of a (N, K) probability table."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((len(probs), 1)) * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=1), probs.shape[1] - 1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.reshape(len(x), -1)


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class Transition:
    state: object
    action: object
    reward: float
    next_state: object
    terminal: bool
    source: str = "real"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")


@dataclass
class Batch:
    """Weighted batch of transitions. ``weights`` sum to one for sampled data.

    ``pre_actions`` holds the pre-squash Gaussian sample for continuous
    actions drawn from a policy, so log-densities need no inverse tanh.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    weights: np.ndarray
    source: str = "real"
    pre_actions: np.ndarray | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")

    def __len__(self):
        return len(self.weights)

    @classmethod
    def uniform(cls, states, actions, rewards, next_states, terminals, source="real", pre_actions=None):
        n = len(states)
        return cls(np.asarray(states), np.asarray(actions), np.asarray(rewards, dtype=float),
                   np.asarray(next_states), np.asarray(terminals, dtype=bool), np.full(n, 1.0 / max(n, 1)),
                   source, pre_actions)

    def take(self, idx) -> "Batch":
        pre = None if self.pre_actions is None else self.pre_actions[idx]
        w = self.weights[idx]
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx],
                     self.terminals[idx], w / w.sum(), self.source, pre)


class ReplayBuffer:
    """Bounded FIFO of transitions from a single source with a seeded uniform sampler."""

    def __init__(self, capacity: int = 10**6, source: str = "real", seed=0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")
        self.capacity = int(capacity)
        self.source = source
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._cols = None
        self._size = 0
        self._next = 0

    def __len__(self):
        return self._size

    def _ensure(self, row: dict, extra: int):
        if self._cols is None:
            self._cols = {k: np.zeros((min(self.capacity, max(extra, 1024)),) + np.shape(v),
                                      dtype=np.asarray(v).dtype) for k, v in row.items()}
            return
        cur = len(self._cols["reward"])
        need = min(self.capacity, self._size + extra)
        if need > cur:
            new_len = min(self.capacity, max(need, 2 * cur))
            for k, col in self._cols.items():
                grown = np.zeros((new_len,) + col.shape[1:], dtype=col.dtype)
                grown[:cur] = col
                self._cols[k] = grown

    def add(self, t: Transition):
        if t.source != self.source:
            raise ValueError(f"{t.source} transition offered to a {self.source} buffer")
        self.add_batch(np.asarray([t.state]), np.asarray([t.action]), [t.reward],
                       np.asarray([t.next_state]), [t.terminal])

    def add_batch(self, states, actions, rewards, next_states, terminals, pre_actions=None):
        n = len(rewards)
        if n == 0:
            return
        data = {"state": np.asarray(states), "action": np.asarray(actions),
                "reward": np.asarray(rewards, dtype=float), "next_state": np.asarray(next_states),
                "terminal": np.asarray(terminals, dtype=bool)}
        if pre_actions is not None:
            data["pre_action"] = np.asarray(pre_actions)
        if n > self.capacity:
            # only the newest rows survive; advance the ring as if all were written
            self._next = (self._next + n - self.capacity) % self.capacity
            data = {k: v[-self.capacity:] for k, v in data.items()}
            n = self.capacity
        self._ensure({k: v[0] for k, v in data.items()}, n)
        pos = (self._next + np.arange(n)) % self.capacity
        for k, v in data.items():
            self._cols[k][pos] = v
        self._next = (self._next + n) % self.capacity
        self._size = min(self._size + n, self.capacity)

    def sample(self, n: int) -> Batch:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = self.rng.integers(0, self._size, size=n)
        c = self._cols
        pre = c["pre_action"][idx] if "pre_action" in c else None
        return Batch.uniform(c["state"][idx], c["action"][idx], c["reward"][idx], c["next_state"][idx],
                             c["terminal"][idx], self.source, pre)

    def sample_states(self, n: int) -> np.ndarray:
        return self.sample(n).states

    def contents(self) -> Batch:
        """Everything currently stored, oldest first once the buffer has wrapped."""
        order = np.arange(self._size)
        if self._size == self.capacity:
            order = np.roll(order, -self._next)
        c = self._cols
        if c is None:
            raise ValueError("buffer is empty")
        pre = c["pre_action"][order] if "pre_action" in c else None
        return Batch.uniform(c["state"][order], c["action"][order], c["reward"][order],
                             c["next_state"][order], c["terminal"][order], self.source, pre)


# ---------------------------------------------------------------------------
# parameterized functions


class TableFunction:
    """Scalar function with one parameter per cell of an integer-indexed table."""

    discrete = True

    def __init__(self, shape):
        self.shape = tuple(int(s) for s in shape)
        self.size = int(np.prod(self.shape))

    def init(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.size)

    def _idx(self, inputs):
        return tuple(np.asarray(i, dtype=int) for i in inputs)

    def value(self, params, *inputs) -> np.ndarray:
        return params.reshape(self.shape)[self._idx(inputs)]

    def grad(self, params, cot, *inputs) -> np.ndarray:
        g = np.zeros(self.shape)
        np.add.at(g, self._idx(inputs), cot)
        return g.ravel()


class MlpFunction:
    """Scalar MLP of the concatenated inputs."""

    discrete = False

    def __init__(self, spec: nn.MlpSpec, out_scale: float = 1.0):
        if spec.output_dim != 1:
            raise ValueError("MlpFunction needs a scalar output")
        self.spec = spec
        self.size = spec.layout.size
        self.out_scale = out_scale

    def init(self, rng: np.random.Generator) -> np.ndarray:
        return nn.init_params(self.spec, rng, self.out_scale)

    def value(self, params, *inputs) -> np.ndarray:
        return nn.forward(self.spec, params, np.hstack([_rows(i) for i in inputs]))[:, 0]

    def vjp(self, params, cot, *inputs):
        """Gradients of ``sum(cot * value)`` w.r.t. params and each input."""
        parts = [_rows(i) for i in inputs]
        cache = []
        nn.forward(self.spec, params, np.hstack(parts), cache)
        g, gx = nn.backward(self.spec, params, cache, np.asarray(cot, dtype=float)[:, None])
        splits = np.cumsum([p.shape[1] for p in parts])[:-1]
        return g, np.split(gx, splits, axis=1)

    def grad(self, params, cot, *inputs) -> np.ndarray:
        return self.vjp(params, cot, *inputs)[0]


class SoftmaxPolicy:
    """Tabular policy: a logit table of shape (n_states, n_actions)."""

    discrete = True

    def __init__(self, n_states: int, n_actions: int):
        self.n_states, self.n_actions = n_states, n_actions
        self.size = n_states * n_actions

    def init(self, rng):
        return np.zeros(self.size)

    def table(self, params) -> np.ndarray:
        return _softmax(params.reshape(self.n_states, self.n_actions))

    def probs(self, params, states) -> np.ndarray:
        return _softmax(params.reshape(self.n_states, self.n_actions)[np.asarray(states, dtype=int)])

    def sample(self, params, states, rng):
        return _categorical(self.probs(params, states), rng), None

    def log_prob(self, params, states, actions, pre_actions=None) -> np.ndarray:
        logits = params.reshape(self.n_states, self.n_actions)[np.asarray(states, dtype=int)]
        return _log_softmax(logits)[np.arange(len(logits)), np.asarray(actions, dtype=int)]

    def log_prob_grad(self, params, states, actions, cot, pre_actions=None) -> np.ndarray:
        states = np.asarray(states, dtype=int)
        p = self.probs(params, states)
        onehot = np.zeros_like(p)
        onehot[np.arange(len(p)), np.asarray(actions, dtype=int)] = 1.0
        g = np.zeros((self.n_states, self.n_actions))
        np.add.at(g, states, np.asarray(cot)[:, None] * (onehot - p))
        return g.ravel()

    def greedy(self, params, states, rng: np.random.Generator | None = None) -> np.ndarray:
        """Most likely action; ties are broken uniformly with ``rng`` (lowest index without)."""
        logits = params.reshape(self.n_states, self.n_actions)[np.asarray(states, dtype=int)]
        if rng is None:
            return np.argmax(logits, axis=1)
        best = logits >= logits.max(axis=1, keepdims=True)
        return _categorical(best / best.sum(axis=1, keepdims=True), rng)


class GaussianPolicy:
    """MLP trunk feeding a tanh-squashed Gaussian head scaled to the action bound."""

    discrete = False

    def __init__(self, obs_dim: int, action_dim: int, hidden=(64, 64), activation="relu",
                 bound: float = 1.0, squash: bool = True):
        self.spec = nn.MlpSpec(obs_dim, tuple(hidden), 2 * action_dim, activation)
        self.head = nn.GaussianHead(action_dim, squash=squash, scale=bound)
        self.action_dim = action_dim
        self.size = self.spec.layout.size

    def init(self, rng):
        return nn.init_params(self.spec, rng, out_scale=0.01)

    def features(self, params, states, cache=None):
        return nn.forward(self.spec, params, _rows(states), cache)

    def sample(self, params, states, rng, eps=None):
        if eps is None:
            eps = rng.standard_normal((len(states), self.action_dim))
        a, _, u = self.head.sample(self.features(params, states), eps)
        return a, u

    def log_prob(self, params, states, actions, pre_actions=None) -> np.ndarray:
        u = self.head.preimage(_rows(actions)) if pre_actions is None else _rows(pre_actions)
        return self.head.log_prob(self.features(params, states), u)

    def log_prob_grad(self, params, states, actions, cot, pre_actions=None) -> np.ndarray:
        u = self.head.preimage(_rows(actions)) if pre_actions is None else _rows(pre_actions)
        cache = []
        out = self.features(params, states, cache)
        d_out, _ = self.head.log_prob_backward(out, u, cot)
        return nn.backward(self.spec, params, cache, d_out)[0]

    def greedy(self, params, states, rng=None) -> np.ndarray:
        out = self.features(params, states)
        return self.head.action(out[:, : self.action_dim])


class SoftmaxDynamics:
    """Tabular variational dynamics: logits of shape (n_states, n_actions, n_states)."""

    discrete = True

    def __init__(self, n_states: int, n_actions: int):
        self.shape = (n_states, n_actions, n_states)
        self.size = int(np.prod(self.shape))

    def init(self, rng):
        return np.zeros(self.size)

    def table(self, params) -> np.ndarray:
        return _softmax(params.reshape(self.shape))

    def sample(self, params, states, actions, rng):
        logits = params.reshape(self.shape)[np.asarray(states, dtype=int), np.asarray(actions, dtype=int)]
        return _categorical(_softmax(logits), rng)

    def log_prob(self, params, states, actions, next_states) -> np.ndarray:
        s, a = np.asarray(states, dtype=int), np.asarray(actions, dtype=int)
        logits = params.reshape(self.shape)[s, a]
        return _log_softmax(logits)[np.arange(len(s)), np.asarray(next_states, dtype=int)]

    def log_prob_grad(self, params, states, actions, next_states, cot) -> np.ndarray:
        s, a = np.asarray(states, dtype=int), np.asarray(actions, dtype=int)
        p = _softmax(params.reshape(self.shape)[s, a])
        onehot = np.zeros_like(p)
        onehot[np.arange(len(s)), np.asarray(next_states, dtype=int)] = 1.0
        g = np.zeros(self.shape)
        np.add.at(g, (s, a), np.asarray(cot)[:, None] * (onehot - p))
        return g.ravel()


class GaussianDynamics:
    """Diagonal Gaussian over the state change, conditioned on (state, action)."""

    discrete = False

    def __init__(self, obs_dim: int, action_dim: int, hidden=(64, 64), activation="relu"):
        self.spec = nn.MlpSpec(obs_dim + action_dim, tuple(hidden), 2 * obs_dim, activation)
        self.head = nn.GaussianHead(obs_dim)
        self.obs_dim = obs_dim
        self.size = self.spec.layout.size

    def init(self, rng):
        return nn.init_params(self.spec, rng, out_scale=0.01)

    def _inputs(self, states, actions):
        return np.hstack([_rows(states), _rows(actions)])

    def sample(self, params, states, actions, rng):
        out = nn.forward(self.spec, params, self._inputs(states, actions))
        eps = rng.standard_normal((len(out), self.obs_dim))
        delta, _, _ = self.head.sample(out, eps)
        return _rows(states) + delta

    def log_prob(self, params, states, actions, next_states) -> np.ndarray:
        out = nn.forward(self.spec, params, self._inputs(states, actions))
        return self.head.log_prob(out, _rows(next_states) - _rows(states))

    def log_prob_grad(self, params, states, actions, next_states, cot) -> np.ndarray:
        cache = []
        out = nn.forward(self.spec, params, self._inputs(states, actions), cache)
        d_out, _ = self.head.log_prob_backward(out, _rows(next_states) - _rows(states), cot)
        return nn.backward(self.spec, params, cache, d_out)[0]


@dataclass
class VmbpoNets:
    policy: object
    dynamics: object
    log_ratio: object
    value: object
    action_value: object
    params: dict
    opt: dict = field(default_factory=dict)
    # number of soft target updates applied so far
    target_updates: int = 0

    def __post_init__(self):
        sizes = {"pi": self.policy.size, "qc": self.policy.size, "qd": self.dynamics.size,
                 "nu": self.log_ratio.size, "v": self.value.size, "q": self.action_value.size,
                 "v_targ": self.value.size, "q_targ": self.action_value.size}
        for k, n in sizes.items():
            if self.params[k].shape != (n,):
                raise ValueError(f"parameter vector {k} has shape {self.params[k].shape}, expected ({n},)")
        for k in TRAINED:
            self.opt.setdefault(k, nn.AdamState.zeros(sizes[k]))

    @property
    def discrete(self):
        return self.policy.discrete


def make_tabular_nets(n_states: int, n_actions: int, seed=0) -> VmbpoNets:
    rng = np.random.default_rng(seed)
    fns = dict(policy=SoftmaxPolicy(n_states, n_actions), dynamics=SoftmaxDynamics(n_states, n_actions),
               log_ratio=TableFunction((n_states, n_actions, n_states)), value=TableFunction((n_states,)),
               action_value=TableFunction((n_states, n_actions)))
    return _assemble(fns, rng)


def make_continuous_nets(obs_dim: int, action_dim: int, bound: float, hidden=(64, 64),
                         activation="relu", seed=0) -> VmbpoNets:
    rng = np.random.default_rng(seed)
    h, act = tuple(hidden), activation
    fns = dict(policy=GaussianPolicy(obs_dim, action_dim, h, act, bound),
               dynamics=GaussianDynamics(obs_dim, action_dim, h, act),
               # nu starts near zero, i.e. at q_d = p
               log_ratio=MlpFunction(nn.MlpSpec(2 * obs_dim + action_dim, h, 1, act), out_scale=0.01),
               value=MlpFunction(nn.MlpSpec(obs_dim, h, 1, act)),
               action_value=MlpFunction(nn.MlpSpec(obs_dim + action_dim, h, 1, act)))
    return _assemble(fns, rng)


def _assemble(fns, rng) -> VmbpoNets:
    params = {"pi": fns["policy"].init(rng), "qd": fns["dynamics"].init(rng), "nu": fns["log_ratio"].init(rng),
              "v": fns["value"].init(rng), "q": fns["action_value"].init(rng)}
    params["qc"] = params["pi"].copy()
    params["v_targ"] = params["v"].copy()
    params["q_targ"] = params["q"].copy()
    return VmbpoNets(params=params, **fns)


# ---------------------------------------------------------------------------
# updates


def _check_batch(batch: Batch, source: str | None, who: str):
    if len(batch) == 0:
        raise ValueError(f"{who}: empty batch")
    if source is not None and batch.source != source:
        raise ValueError(f"{who}: needs a {source} batch, got {batch.source}")


def _step(nets: VmbpoNets, name: str, gradient: np.ndarray, lr: float, loss: float, who: str):
    if not (np.isfinite(loss) and np.all(np.isfinite(gradient))):
        raise NumericalAbort(f"{who}: non-finite loss {loss!r}")
    new, nets.opt[name] = nn.adam_step(nets.opt[name], nets.params[name], gradient, lr)
    if not np.all(np.isfinite(new)):
        raise NumericalAbort(f"{who}: non-finite parameters")
    nets.params[name] = new


def _next_value(nets, batch, gamma):
    v_next = nets.value.value(nets.params["v_targ"], batch.next_states)
    return gamma * np.where(batch.terminals, 0.0, v_next)


def dynamics_weights(nets: VmbpoNets, batch: Batch, eta: float, gamma: float = 1.0,
                     clip: float = EXP_CLIP) -> np.ndarray:
    """exp(clip(eta r + gamma V'(x') - Q'(x, a))), in [e^-clip, e^clip]."""
    q_targ = nets.action_value.value(nets.params["q_targ"], batch.states, batch.actions)
    arg = eta * batch.rewards + _next_value(nets, batch, gamma) - q_targ
    return np.exp(np.clip(arg, -clip, clip))


def update_dynamics(nets: VmbpoNets, batch: Batch, eta: float, lr: float, steps: int = 1,
                    gamma: float = 1.0, clip: float = EXP_CLIP) -> float:
    """Weighted maximum likelihood of real next states under the variational dynamics."""
    _check_batch(batch, "real", "update_dynamics")
    coef = batch.weights * dynamics_weights(nets, batch, eta, gamma, clip)
    fn = nets.dynamics
    loss = float("nan")
    for _ in range(steps):
        p = nets.params["qd"]
        loss = -float(coef @ fn.log_prob(p, batch.states, batch.actions, batch.next_states))
        g = -fn.log_prob_grad(p, batch.states, batch.actions, batch.next_states, coef)
        _step(nets, "qd", g, lr, loss, "update_dynamics")
    return loss


def model_next_states(nets: VmbpoNets, batch: Batch, rng: np.random.Generator) -> Batch:
    """Copy of ``batch`` whose next states are redrawn from the variational dynamics."""
    y = nets.dynamics.sample(nets.params["qd"], batch.states, batch.actions, rng)
    return replace(batch, next_states=y, source="synthetic")


def log_ratio_objective(nets: VmbpoNets, real: Batch, synthetic: Batch, clip: float = EXP_CLIP) -> float:
    """E_qd[nu] - E_p[exp(nu)], the quantity update_log_ratio ascends."""
    nu = nets.log_ratio
    p = nets.params["nu"]
    s = nu.value(p, synthetic.states, synthetic.actions, synthetic.next_states)
    r = nu.value(p, real.states, real.actions, real.next_states)
    return float(synthetic.weights @ s - real.weights @ np.exp(np.clip(r, -clip, clip)))


def update_log_ratio(nets: VmbpoNets, real: Batch, synthetic: Batch, lr: float, steps: int = 1,
                     clip: float = EXP_CLIP) -> float:
    """Fit nu = log(qd / p) through the convex dual of the KL divergence.

    ``real`` must hold environment next states and ``synthetic`` next states
    drawn from the variational dynamics.
    """
    _check_batch(real, "real", "update_log_ratio")
    _check_batch(synthetic, "synthetic", "update_log_ratio")
    nu = nets.log_ratio
    loss = float("nan")
    for _ in range(steps):
        p = nets.params["nu"]
        r = nu.value(p, real.states, real.actions, real.next_states)
        inside = np.abs(r) <= clip
        er = np.exp(np.clip(r, -clip, clip))
        loss = -log_ratio_objective(nets, real, synthetic, clip)
        g = nu.grad(p, real.weights * er * inside, real.states, real.actions, real.next_states) \
            - nu.grad(p, synthetic.weights, synthetic.states, synthetic.actions, synthetic.next_states)
        _step(nets, "nu", g, lr, loss, "update_log_ratio")
    return loss


def q_targets(nets: VmbpoNets, batch: Batch, eta: float, gamma: float = 1.0) -> np.ndarray:
    """eta r + gamma V'(x') - nu(x'|x, a)."""
    nu = nets.log_ratio.value(nets.params["nu"], batch.states, batch.actions, batch.next_states)
    return eta * batch.rewards + _next_value(nets, batch, gamma) - nu


def update_q(nets: VmbpoNets, batch: Batch, eta: float, lr: float, steps: int = 1, gamma: float = 1.0) -> float:
    """Square-loss regression of Q on model transitions (actions from qc, next states from qd)."""
    _check_batch(batch, "synthetic", "update_q")
    y = q_targets(nets, batch, eta, gamma)
    fn = nets.action_value
    loss = float("nan")
    for _ in range(steps):
        err = fn.value(nets.params["q"], batch.states, batch.actions) - y
        loss = float(batch.weights @ err**2)
        g = fn.grad(nets.params["q"], 2 * batch.weights * err, batch.states, batch.actions)
        _step(nets, "q", g, lr, loss, "update_q")
    return loss


def policy_log_ratio(nets: VmbpoNets, states, actions, pre_actions=None) -> np.ndarray:
    """log qc(a|x) - log pi(a|x)."""
    pol = nets.policy
    return pol.log_prob(nets.params["qc"], states, actions, pre_actions) \
        - pol.log_prob(nets.params["pi"], states, actions, pre_actions)


def update_v(nets: VmbpoNets, batch: Batch, lr: float, steps: int = 1) -> float:
    """Regress V(x) onto Q(x, a) - log(qc / pi)(a|x) with a drawn from qc."""
    _check_batch(batch, "synthetic", "update_v")
    target = nets.action_value.value(nets.params["q"], batch.states, batch.actions) \
        - policy_log_ratio(nets, batch.states, batch.actions, batch.pre_actions)
    fn = nets.value
    loss = float("nan")
    for _ in range(steps):
        err = fn.value(nets.params["v"], batch.states) - target
        loss = float(batch.weights @ err**2)
        g = fn.grad(nets.params["v"], 2 * batch.weights * err, batch.states)
        _step(nets, "v", g, lr, loss, "update_v")
    return loss


def _tabular_actor(nets, states, w):
    pol = nets.policy
    n_actions = pol.n_actions
    logits = nets.params["qc"].reshape(pol.n_states, n_actions)[states]
    log_qc = _log_softmax(logits)
    qc = np.exp(log_qc)
    log_pi = _log_softmax(nets.params["pi"].reshape(pol.n_states, n_actions)[states])
    q = nets.action_value.value(nets.params["q"], np.repeat(states, n_actions),
                                np.tile(np.arange(n_actions), len(states))).reshape(len(states), n_actions)
    f = log_qc - q - log_pi
    mean_f = (qc * f).sum(axis=1, keepdims=True)
    g = np.zeros((pol.n_states, n_actions))
    np.add.at(g, states, w[:, None] * qc * (f - mean_f))
    return float(w @ mean_f[:, 0]), g.ravel()


def _pathwise_actor(nets, states, eps, w):
    pol = nets.policy
    cache = []
    out = pol.features(nets.params["qc"], states, cache)
    a, logq, u = pol.head.sample(out, eps)
    out_pi = pol.features(nets.params["pi"], states)
    logpi = pol.head.log_prob(out_pi, u)
    q = nets.action_value.value(nets.params["q"], states, a)
    loss = float(w @ (logq - q - logpi))
    _, (_, dq_da) = nets.action_value.vjp(nets.params["q"], w, states, a)
    _, dlogpi_du = pol.head.log_prob_backward(out_pi, u, w)
    d_out = pol.head.sample_backward(out, eps, d_action=-dq_da, d_logp=w, d_u=-dlogpi_du)
    return loss, nn.backward(pol.spec, nets.params["qc"], cache, d_out)[0]


def actor_loss_and_grad(nets: VmbpoNets, states, noise=None, weights=None):
    """E[log qc(a|x) - Q(x, a) - log pi(a|x)] for a ~ qc and its gradient.

    Tabular policies use the exact expectation over actions; Gaussian ones use
    the reparameterized sample ``noise``.
    """
    n = len(states)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    if nets.discrete:
        return _tabular_actor(nets, np.asarray(states, dtype=int), w)
    return _pathwise_actor(nets, _rows(states), _rows(noise), w)


def update_actor(nets: VmbpoNets, states, noise, lr: float, steps: int = 1, weights=None) -> float:
    if len(states) == 0:
        raise ValueError("update_actor: empty batch")
    loss = float("nan")
    for _ in range(steps):
        loss, g = actor_loss_and_grad(nets, states, noise, weights)
        _step(nets, "qc", g, lr, loss, "update_actor")
    return loss


def soft_target_update(nets: VmbpoNets, tau: float) -> None:
    if not 0 < tau <= 1:
        raise ValueError(f"tau must lie in (0, 1], got {tau!r}")
    for online, target in (("v", "v_targ"), ("q", "q_targ")):
        nets.params[target] = tau * nets.params[online] + (1 - tau) * nets.params[target]
    nets.target_updates += 1


def _policy_kl_and_grad(nets, states, old, w):
    """sum_i w_i KL(pi_old(.|x_i) || pi(.|x_i)) and its gradient w.r.t. pi's parameters."""
    pol = nets.policy
    p = nets.params["pi"]
    if nets.discrete:
        shape = (pol.n_states, pol.n_actions)
        s = np.asarray(states, dtype=int)
        lo, lp = _log_softmax(old.reshape(shape)[s]), _log_softmax(p.reshape(shape)[s])
        kl = (np.exp(lo) * (lo - lp)).sum(axis=1)
        g = np.zeros(shape)
        np.add.at(g, s, w[:, None] * (np.exp(lp) - np.exp(lo)))
        return float(w @ kl), g.ravel()
    cache = []
    out = pol.features(p, states, cache)
    out_old = pol.features(old, states)
    kl = pol.head.kl(out_old, out)
    d_out = pol.head.kl_backward_q(out_old, out, w)
    return float(w @ kl), nn.backward(pol.spec, p, cache, d_out)[0]


def m_step_update(nets: VmbpoNets, batch: Batch | None = None, mode: str = "copy", lam: float = 0.0,
                  lr: float = 2e-4, steps: int = 1) -> float:
    """Move the baseline policy toward the variational one.

    ``copy`` sets pi to qc. ``map`` ascends E[log pi(a|x)] - lam KL(pi_old || pi)
    over model samples, with pi_old the policy on entry.
    """
    if mode not in M_STEP_MODES:
        raise ValueError(f"M-step mode must be one of {M_STEP_MODES}")
    if mode == "copy":
        nets.params["pi"] = nets.params["qc"].copy()
        return 0.0
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    _check_batch(batch, "synthetic", "m_step_update")
    pol = nets.policy
    old = nets.params["pi"].copy()
    loss = float("nan")
    for _ in range(steps):
        p = nets.params["pi"]
        loss = -float(batch.weights @ pol.log_prob(p, batch.states, batch.actions, batch.pre_actions))
        g = -pol.log_prob_grad(p, batch.states, batch.actions, batch.weights, batch.pre_actions)
        if lam > 0:
            kl, gk = _policy_kl_and_grad(nets, batch.states, old, batch.weights)
            loss += lam * kl
            g = g + lam * gk
        _step(nets, "pi", g, lr, loss, "m_step_update")
    return loss


def exp_td_loss_and_grad(nets: VmbpoNets, batch: Batch, eta: float, gamma: float = 1.0,
                         temperature: float = 1.0, clip: float = EXP_CLIP):
    """sum w (exp(clip(temperature (Q - eta r - gamma V'))) - 1)^2 and its gradient."""
    fn = nets.action_value
    q = fn.value(nets.params["q"], batch.states, batch.actions)
    arg = temperature * (q - eta * batch.rewards - _next_value(nets, batch, gamma))
    inside = np.abs(arg) <= clip
    e = np.exp(np.clip(arg, -clip, clip))
    loss = float(batch.weights @ (e - 1.0) ** 2)
    cot = 2 * batch.weights * (e - 1.0) * e * temperature * inside
    return loss, fn.grad(nets.params["q"], cot, batch.states, batch.actions)


def update_q_exp_td(nets: VmbpoNets, batch: Batch, eta: float, lr: float, steps: int = 1, gamma: float = 1.0,
                    temperature: float = 1.0, clip: float = EXP_CLIP) -> float:
    """Exponential-TD critic on real transitions (model-free E-step)."""
    _check_batch(batch, "real", "update_q_exp_td")
    loss = float("nan")
    for _ in range(steps):
        loss, g = exp_td_loss_and_grad(nets, batch, eta, gamma, temperature, clip)
        _step(nets, "q", g, lr, loss, "update_q_exp_td")
    return loss


def policy_actions(nets: VmbpoNets, states, rng: np.random.Generator) -> Batch:
    """States paired with fresh qc actions (rewards and next states left empty)."""
    a, u = nets.policy.sample(nets.params["qc"], states, rng)
    n = len(states)
    return Batch.uniform(states, a, np.zeros(n), states, np.zeros(n, dtype=bool), "synthetic", u)


def model_rollout(nets: VmbpoNets, env, states, rng: np.random.Generator) -> Batch:
    """One-step synthetic transitions: a ~ qc(.|x), x' ~ qd(.|x, a), known reward."""
    b = policy_actions(nets, states, rng)
    y = nets.dynamics.sample(nets.params["qd"], b.states, b.actions, rng)
    return replace(b, rewards=np.asarray(env.reward(b.states, b.actions), dtype=float), next_states=y,
                   terminals=np.asarray(env.is_terminal(y), dtype=bool))


# ---------------------------------------------------------------------------
# training loops


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "vmbpo"
    eta: float = 1.0
    discount: float = 0.99
    total_steps: int = 50_000
    steps_per_iteration: int = 20
    inner_iterations: int = 20
    warmup_steps: int = 256
    batch_size: int = 64
    model_batch_size: int = 256
    synthetic_per_step: int = 128
    lr_model: float = 3e-4
    lr_log_ratio: float = 3e-4
    lr_critic: float = 5e-4
    lr_actor: float = 2e-4
    tau: float = 0.005
    buffer_size: int = 10**6
    hidden: tuple = (64, 64)
    activation: str = "relu"
    m_step: str = "copy"
    m_step_lambda: float = 0.0
    m_step_steps: int = 1
    exp_clip: float = EXP_CLIP
    mfe_temperature: float = 1.0
    eval_interval: int = 1000
    eval_episodes: int = 5
    smoothing_window: int = 3
    exploration_sigma: float = 1.0
    exploration_decay: float = 0.999
    exploration_min: float = 0.025
    max_episode_steps: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        checks = [
            (self.algorithm in ALGORITHMS, "train.algorithm", f"one of {ALGORITHMS}"),
            (self.eta > 0, "train.eta", "positive"),
            (0 < self.discount <= 1, "train.discount", "in (0, 1]"),
            (self.total_steps >= 0, "train.total_steps", ">= 0"),
            (self.steps_per_iteration >= 1, "train.steps_per_iteration", ">= 1"),
            (self.inner_iterations >= 1, "train.inner_iterations", ">= 1"),
            (self.warmup_steps >= 1, "train.warmup_steps", ">= 1"),
            (self.batch_size >= 1, "train.batch_size", ">= 1"),
            (self.model_batch_size >= 1, "train.model_batch_size", ">= 1"),
            (self.synthetic_per_step in SYNTHETIC_PER_STEP, "train.synthetic_per_step",
             f"one of {SYNTHETIC_PER_STEP}"),
            (min(self.lr_model, self.lr_log_ratio, self.lr_critic, self.lr_actor) > 0, "train.lr_*", "positive"),
            (0 < self.tau <= 1, "train.tau", "in (0, 1]"),
            (self.buffer_size >= 1, "train.buffer_size", ">= 1"),
            (len(self.hidden) >= 1 and min(self.hidden) >= 1, "train.hidden", "nonempty, sizes >= 1"),
            (self.activation in ("tanh", "relu"), "train.activation", "tanh or relu"),
            (self.m_step in M_STEP_MODES, "train.m_step", f"one of {M_STEP_MODES}"),
            (self.m_step_lambda >= 0, "train.m_step_lambda", ">= 0"),
            (self.m_step_steps >= 1, "train.m_step_steps", ">= 1"),
            (self.exp_clip > 0, "train.exp_clip", "positive"),
            (self.mfe_temperature > 0, "train.mfe_temperature", "positive"),
            (self.eval_interval >= 1, "train.eval_interval", ">= 1"),
            (self.eval_episodes >= 1, "train.eval_episodes", ">= 1"),
            (self.smoothing_window >= 1, "train.smoothing_window", ">= 1"),
            (self.exploration_sigma >= 0 and self.exploration_min >= 0, "train.exploration_sigma", ">= 0"),
            (0 < self.exploration_decay <= 1, "train.exploration_decay", "in (0, 1]"),
            (self.max_episode_steps >= 1, "train.max_episode_steps", ">= 1"),
        ]
        for ok, name, need in checks:
            if not ok:
                raise ConfigError(f"{name} must be {need}")
        if self.algorithm == "vmbpo_mfe" and self.m_step != "copy":
            raise ConfigError("train.m_step must be copy for vmbpo_mfe")


# Table entries move by about one learning rate per Adam step, so tabular runs
# need far larger rates than the network defaults to converge in a few
# thousand environment steps.
TABULAR_DEFAULTS = dict(lr_model=0.05, lr_log_ratio=0.05, lr_critic=0.05, lr_actor=0.05,
                        warmup_steps=64, max_episode_steps=100)


def tabular_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**TABULAR_DEFAULTS, **overrides})


def make_nets_for(env, cfg: TrainConfig, seed) -> VmbpoNets:
    if env.discrete:
        return make_tabular_nets(env.n_states, env.n_actions, seed)
    return make_continuous_nets(env.obs_dim, env.action_dim, env.action_bound, cfg.hidden, cfg.activation, seed)


class _Collector:
    """Steps the environment with the baseline policy and feeds buffer D."""

    def __init__(self, env, cfg: TrainConfig, rng):
        self.env, self.cfg, self.rng = env, cfg, rng
        self.sigma = cfg.exploration_sigma
        self.obs = None

    def run(self, nets: VmbpoNets, buffer: ReplayBuffer, n: int):
        env, rng = self.env, self.rng
        rows = []
        for _ in range(n):
            if self.obs is None:
                self.obs = env.reset(rng)
            x = self.obs
            a, _ = nets.policy.sample(nets.params["pi"], np.asarray([x]), rng)
            a = a[0]
            if not env.discrete:
                a = np.clip(a + self.sigma * rng.standard_normal(a.shape), -env.action_bound, env.action_bound)
                self.sigma = max(self.cfg.exploration_min, self.sigma * self.cfg.exploration_decay)
            y, r, terminated, truncated = env.step(a, rng)
            # truncation is not a terminal: critics keep bootstrapping through it
            rows.append((x, a, r, y, terminated))
            self.obs = None if (terminated or truncated) else y
        if rows:
            xs, as_, rs, ys, ts = zip(*rows)
            buffer.add_batch(np.asarray(xs), np.asarray(as_), np.asarray(rs, dtype=float), np.asarray(ys),
                             np.asarray(ts, dtype=bool))


def collect_steps(env, nets: VmbpoNets, buffer: ReplayBuffer, n: int, rng: np.random.Generator,
                  cfg: TrainConfig | None = None):
    """Append ``n`` real transitions gathered with the baseline policy; resets on episode end."""
    if buffer.source != "real":
        raise ValueError("collect_steps writes real transitions only")
    cfg = cfg or TrainConfig(exploration_sigma=0.0, exploration_min=0.0)
    _Collector(env, cfg, rng).run(nets, buffer, n)
    return buffer


def evaluate(env, nets: VmbpoNets, episodes: int, rng: np.random.Generator, max_steps: int):
    """Returns of greedy (mode-action) baseline-policy episodes and their start states."""
    returns, starts = [], []
    for _ in range(episodes):
        x = env.reset(rng)
        starts.append(x)
        total = 0.0
        for _ in range(max_steps):
            a = nets.policy.greedy(nets.params["pi"], np.asarray([x]), rng)[0]
            x, r, terminated, truncated = env.step(a, rng)
            total += r
            if terminated or truncated:
                break
        returns.append(total)
    return np.asarray(returns), np.asarray(starts)


@dataclass
class TrainResult:
    rows: list
    nets: VmbpoNets
    real_buffer: ReplayBuffer
    synthetic_buffer: ReplayBuffer | None

    def final_return(self, window: int = 3) -> float:
        vals = [r["mean_return"] for r in self.rows[-window:]]
        return float(np.mean(vals)) if vals else float("nan")


def _vmbpo_round(nets, env, D, E, cfg: TrainConfig, rng, losses):
    gamma, eta = cfg.discount, cfg.eta
    real = D.sample(cfg.model_batch_size)
    losses["loss_dynamics"] = update_dynamics(nets, real, eta, cfg.lr_model, 1, gamma, cfg.exp_clip)
    real = D.sample(cfg.model_batch_size)
    losses["loss_nu"] = update_log_ratio(nets, real, model_next_states(nets, real, rng), cfg.lr_log_ratio,
                                         1, cfg.exp_clip)
    synthetic = model_rollout(nets, env, D.sample_states(cfg.synthetic_per_step), rng)
    E.add_batch(synthetic.states, synthetic.actions, synthetic.rewards, synthetic.next_states,
                synthetic.terminals, synthetic.pre_actions)
    for chunk in np.array_split(np.arange(len(synthetic)), max(1, len(synthetic) // cfg.batch_size)):
        mb = synthetic.take(chunk)
        losses["loss_q"] = update_q(nets, mb, eta, cfg.lr_critic, 1, gamma)
        losses["loss_v"] = update_v(nets, policy_actions(nets, mb.states, rng), cfg.lr_critic, 1)
        eps = None if nets.discrete else rng.standard_normal((len(mb), env.action_dim))
        losses["loss_actor"] = update_actor(nets, mb.states, eps, cfg.lr_actor, 1)
    soft_target_update(nets, cfg.tau)


def _mfe_round(nets, env, D, cfg: TrainConfig, rng, losses):
    gamma, eta = cfg.discount, cfg.eta
    for _ in range(max(1, cfg.synthetic_per_step // cfg.batch_size)):
        real = D.sample(cfg.batch_size)
        losses["loss_q"] = update_q_exp_td(nets, real, eta, cfg.lr_critic, 1, gamma, cfg.mfe_temperature,
                                           cfg.exp_clip)
        losses["loss_v"] = update_v(nets, policy_actions(nets, real.states, rng), cfg.lr_critic, 1)
        eps = None if nets.discrete else rng.standard_normal((len(real), env.action_dim))
        losses["loss_actor"] = update_actor(nets, real.states, eps, cfg.lr_actor, 1)
    soft_target_update(nets, cfg.tau)


def _m_step(nets, env, D, cfg: TrainConfig, rng):
    if cfg.m_step == "copy":
        m_step_update(nets, mode="copy")
        return
    synthetic = model_rollout(nets, env, D.sample_states(cfg.synthetic_per_step), rng)
    m_step_update(nets, synthetic, "map", cfg.m_step_lambda, cfg.lr_actor, cfg.m_step_steps)


def train(env, cfg: TrainConfig, seed: int, sink=None, algorithm: str | None = None) -> TrainResult:
    """Interleave real-data collection, K E-step rounds with target updates, and the M-step.

    ``sink`` (if given) receives each metrics row as soon as it is produced.
    """
    algorithm = algorithm or cfg.algorithm
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"train.algorithm must be one of {ALGORITHMS}")
    ss = np.random.SeedSequence(seed)
    init_seq, env_seq, agent_seq, eval_seq, buf_seq = ss.spawn(5)
    nets = make_nets_for(env, cfg, init_seq)
    agent_rng = np.random.default_rng(agent_seq)
    eval_rng = np.random.default_rng(eval_seq)
    buf_d, buf_e = np.random.default_rng(buf_seq).spawn(2)
    D = ReplayBuffer(cfg.buffer_size, "real", buf_d)
    E = ReplayBuffer(cfg.buffer_size, "synthetic", buf_e) if algorithm == "vmbpo" else None
    collector = _Collector(env, cfg, np.random.default_rng(env_seq))
    eval_env = env.spawn()
    losses = {k: float("nan") for k in METRIC_COLUMNS[5:]}
    rows = []
    rounds = 0

    def emit(env_steps):
        returns, starts = evaluate(eval_env, nets, cfg.eval_episodes, eval_rng, cfg.max_episode_steps)
        elbo_est = float(np.mean(nets.value.value(nets.params["v"], starts)))
        row = dict(wall_step=rounds, env_steps=env_steps, mean_return=float(returns.mean()),
                   return_sd=float(returns.std()), elbo_estimate=elbo_est, **losses)
        rows.append(row)
        if sink is not None:
            sink(row)

    emit(0)
    env_steps = 0
    while env_steps < cfg.total_steps:
        n = min(cfg.steps_per_iteration, cfg.total_steps - env_steps)
        collector.run(nets, D, n)
        before, env_steps = env_steps, env_steps + n
        if len(D) >= cfg.warmup_steps:
            for _ in range(cfg.inner_iterations):
                rounds += 1
                try:
                    if algorithm == "vmbpo":
                        _vmbpo_round(nets, env, D, E, cfg, agent_rng, losses)
                    else:
                        _mfe_round(nets, env, D, cfg, agent_rng, losses)
                except NumericalAbort as err:
                    raise NumericalAbort(str(err), rounds) from err
            try:
                _m_step(nets, env, D, cfg, agent_rng)
            except NumericalAbort as err:
                raise NumericalAbort(str(err), rounds) from err
        if env_steps // cfg.eval_interval > before // cfg.eval_interval or env_steps == cfg.total_steps:
            emit(env_steps)
    return TrainResult(rows, nets, D, E)


def train_vmbpo(env, cfg: TrainConfig, seed: int, sink=None) -> TrainResult:
    return train(env, cfg, seed, sink, "vmbpo")


def train_vmbpo_mfe(env, cfg: TrainConfig, seed: int, sink=None) -> TrainResult:
    return train(env, cfg, seed, sink, "vmbpo_mfe")


def smooth(values, window: int = 3) -> np.ndarray:
    """Trailing moving average over up to ``window`` points."""
    values = np.asarray(values, dtype=float)
    out = np.empty_like(values)
    for i in range(len(values)):
        out[i] = values[max(0, i - window + 1): i + 1].mean()
    return out
