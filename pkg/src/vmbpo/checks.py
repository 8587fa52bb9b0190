"""Named invariant suites run by ``vmbpo check`` and by the acceptance tests.

Each check takes a seed and returns a :class:`CheckResult`. The worst
observed error is reported next to the tolerance it was held to.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import agent, nets as nn, solvers, variational
from .envs import make_chain, make_random_mdp, make_twist2
from .mdp import enumerate_trajectories, uniform_policy
from .oracles import path_moments, random_distribution, regularized_argmax


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: worst {self.worst:.3e} vs tolerance {self.tolerance:.0e}{extra}"


def _result(name, errors, tol, detail=""):
    worst = float(np.max(errors)) if len(errors) else 0.0
    return CheckResult(name, bool(np.isfinite(worst) and worst < tol), worst, tol, detail)


def mdp_family(count: int = 50, seed: int = 0):
    """Random layered MDPs with up to 8 states, 4 actions and 5 layers."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        n_states = int(rng.integers(2, 9))
        layers = int(rng.integers(1, min(5, n_states - 1) + 1))
        n_actions = int(rng.integers(1, 5))
        out.append(make_random_mdp(n_states, n_actions, layers, seed=int(rng.integers(2**31)) + i))
    return out


def _policy(mdp, rng):
    return rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)


# ---------------------------------------------------------------------------
# exact-solver suites


def check_lemma6_policy(seed=0, instances=100) -> CheckResult:
    """Closed-form policy twist and soft value against a numerical simplex maximizer."""
    rng = np.random.default_rng(seed)
    errs = []
    for i in range(instances):
        n = int(rng.integers(1, 7))
        base = random_distribution(rng, n, zeros=i % 3 == 0)
        scores = rng.normal(0, 3, n)
        q_num, value_num = regularized_argmax(base, scores)
        q = variational.twist_policy(base[None], scores[None])[0]
        value = variational.softmax_value(base[None], scores[None])[0]
        errs.append(max(np.max(np.abs(q - q_num)), abs(value - value_num)))
    return _result("lemma6_policy", errs, 1e-6, f"{instances} instances")


def check_lemma6_dynamics(seed=0, instances=20) -> CheckResult:
    """Closed-form dynamics twist against a numerical simplex maximizer, per (state, action)."""
    rng = np.random.default_rng(seed)
    errs = []
    for k in range(instances):
        mdp = make_random_mdp(6, 2, 3, int(rng.integers(2**31)), max_successors=3)
        v = rng.normal(0, 2, mdp.n_states)
        v[mdp.terminal_mask] = 0.0
        qd = variational.twist_dynamics(mdp, v)
        for x in mdp.nonterminals:
            for a in range(mdp.n_actions):
                target, _ = regularized_argmax(mdp.transition[x, a], v)
                errs.append(np.max(np.abs(qd[x, a] - target)))
    return _result("lemma6_dynamics", errs, 1e-6, f"{instances} MDPs")


def check_monotonicity(seed=0, instances=50) -> CheckResult:
    """Policy iteration never lowers any state's value, for both improvement modes."""
    rng = np.random.default_rng(seed)
    family = mdp_family(instances, seed)
    drops = []
    for mode in solvers.IMPROVEMENT_MODES:
        cfg = solvers.SolverConfig(improvement_mode=mode)
        for mdp in family:
            pi = _policy(mdp, rng)
            for solve in (solvers.model_based_pi, solvers.model_free_pi):
                hist = solve(mdp, 1.0, pi, cfg).value_history
                drops.extend(np.max(a - b, initial=0.0) for a, b in zip(hist, hist[1:]))
    return _result("monotonicity", drops, 1e-10, "largest decrease V_k - V_k+1")


def solve_all(mdp, eta, pi, cfg=solvers.SolverConfig()):
    return {name: f(mdp, eta, pi, cfg) for name, f in solvers.E_STEP_SOLVERS.items()}


def check_pi_vi_agreement(seed=0, instances=50) -> CheckResult:
    """Both policy iterations and both value iterations agree on V, q_c* and q_d*."""
    rng = np.random.default_rng(seed)
    errs = []
    for mdp in mdp_family(instances, seed):
        sols = solve_all(mdp, 1.0, _policy(mdp, rng))
        for a, b in combinations(sols.values(), 2):
            errs.append(max(np.max(np.abs(a.v_pi - b.v_pi)),
                            np.max(np.abs(a.q_c_star - b.q_c_star)),
                            np.max(np.abs(a.q_d_star - b.q_d_star))))
    return _result("pi_vi_agreement", errs, 1e-8, f"{instances} MDPs, 4 solvers pairwise")


def check_oracle_equality(seed=0, instances=50) -> CheckResult:
    """sum_x p0 V from value iteration against the recursive log-likelihood."""
    rng = np.random.default_rng(seed)
    errs = []
    for mdp in mdp_family(instances, seed):
        pi = _policy(mdp, rng)
        v = solvers.value_iteration(mdp, 1.0, pi).v_pi
        _, _, mgf = path_moments(mdp, pi, 1.0)
        errs.append(abs(float(mdp.initial @ v) - math.log(mgf)))
    return _result("oracle_equality", errs, 1e-8, f"{instances} MDPs")


def check_elbo_bound(seed=0, instances=20) -> CheckResult:
    """ELBO <= log-likelihood for random q, with equality at the twisted pair."""
    rng = np.random.default_rng(seed)
    excess, gaps = [], []
    for _ in range(instances):
        mdp = make_random_mdp(6, 3, 4, int(rng.integers(2**31)))
        pi = _policy(mdp, rng)
        trajs = enumerate_trajectories(mdp)
        ll = variational.log_likelihood(mdp, 1.0, pi, trajs)
        qd = np.where(mdp.transition > 0, rng.random(mdp.transition.shape), 0.0)
        qd /= qd.sum(axis=-1, keepdims=True)
        excess.append(max(0.0, variational.elbo(mdp, 1.0, _policy(mdp, rng), qd, pi, trajs) - ll))
        sol = solvers.value_iteration(mdp, 1.0, pi)
        gaps.append(abs(ll - variational.elbo(mdp, 1.0, sol.q_c_star, sol.q_d_star, pi, trajs)))
    return _result("elbo_bound", np.maximum(excess, gaps), 1e-8, "violation and gap at the optimum")


# ---------------------------------------------------------------------------
# finite differences


FD_FLOOR = 1e-7
FD_SCALE = 1e-6
FD_TOL = 1e-4


def gradient_error(analytic, f, theta) -> float:
    """Largest relative error of ``analytic`` against central differences of ``f``.

    Coordinates below ``FD_FLOOR``, or below ``FD_SCALE`` times the largest
    entry, are compared against that floor: there round-off in ``f`` dominates.
    """
    numeric = nn.numerical_gradient(f, theta)
    floor = max(FD_FLOOR, FD_SCALE * float(np.max(np.abs(numeric), initial=0.0)))
    return float(nn.relative_error(analytic, numeric, floor).max())


def _with(params, name, f):
    saved = params[name]

    def g(theta):
        params[name] = theta
        try:
            return f()
        finally:
            params[name] = saved

    return g


def finite_difference_errors(seed: int, config: int) -> dict:
    """Relative FD error of every differentiable path on one random tanh configuration."""
    rng = np.random.default_rng([seed, config])
    obs_dim, act_dim = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    hidden = tuple(int(h) for h in rng.integers(2, 6, rng.integers(1, 3)))
    net = agent.make_continuous_nets(obs_dim, act_dim, float(rng.uniform(0.5, 2.0)), hidden, "tanh", [seed, config])
    p = net.params
    for name in p:
        p[name] = p[name] + rng.normal(0, 0.2, p[name].shape)
    n = int(rng.integers(2, 6))
    s = rng.normal(size=(n, obs_dim))
    a = net.policy.sample(p["qc"], s, rng)[0]
    s2 = s + rng.normal(0, 0.3, s.shape)
    w = rng.dirichlet(np.ones(n))
    cot = rng.normal(size=n)
    dyn, qf, pol = net.dynamics, net.action_value, net.policy
    out = {}
    out["dynamics"] = gradient_error(
        dyn.log_prob_grad(p["qd"], s, a, s2, cot),
        _with(p, "qd", lambda: float(dyn.log_prob(p["qd"], s, a, s2) @ cot)), p["qd"])
    for name, fn, args in (("nu", net.log_ratio, (s, a, s2)), ("q", qf, (s, a)), ("v", net.value, (s,))):
        out[f"{name}_net"] = gradient_error(
            fn.grad(p[name], cot, *args), _with(p, name, lambda: float(fn.value(p[name], *args) @ cot)), p[name])
    _, (_, d_a) = qf.vjp(p["q"], cot, s, a)
    out["q_action_input"] = gradient_error(
        d_a.ravel(), lambda flat: float(qf.value(p["q"], s, flat.reshape(a.shape)) @ cot), a.ravel())
    out["policy_log_prob"] = gradient_error(
        pol.log_prob_grad(p["pi"], s, a, cot), _with(p, "pi", lambda: float(pol.log_prob(p["pi"], s, a) @ cot)),
        p["pi"])
    noise = rng.standard_normal((n, act_dim))
    _, g = agent.actor_loss_and_grad(net, s, noise, w)
    out["actor"] = gradient_error(g, _with(p, "qc", lambda: agent.actor_loss_and_grad(net, s, noise, w)[0]),
                                  p["qc"])
    old = p["pi"] + rng.normal(0, 0.3, p["pi"].shape)
    _, g = agent._policy_kl_and_grad(net, s, old, w)
    out["m_step_kl"] = gradient_error(g, _with(p, "pi", lambda: agent._policy_kl_and_grad(net, s, old, w)[0]),
                                      p["pi"])
    # rewards placed so the exponent lies in [-1, 1], where the loss is O(1)
    temperature, gamma = float(rng.uniform(0.3, 1.5)), 0.99
    v_next = net.value.value(p["v_targ"], s2)
    r = (qf.value(p["q"], s, a) - gamma * v_next - rng.uniform(-1, 1, n) / temperature) / 0.7
    batch = agent.Batch(s, a, r, s2, np.zeros(n, bool), w)
    _, g = agent.exp_td_loss_and_grad(net, batch, 0.7, gamma, temperature)
    out["exp_td"] = gradient_error(
        g, _with(p, "q", lambda: agent.exp_td_loss_and_grad(net, batch, 0.7, gamma, temperature)[0]), p["q"])
    return out


def check_finite_difference(seed=0, instances=5) -> CheckResult:
    """Every network gradient the learners use, against central differences."""
    errs = {}
    for k in range(instances):
        for path, e in finite_difference_errors(seed, k).items():
            errs[path] = max(errs.get(path, 0.0), e)
    worst = max(errs, key=errs.get)
    return _result("finite_difference", list(errs.values()), FD_TOL, f"{instances} configurations, worst {worst}")


# ---------------------------------------------------------------------------
# tabular sanity chain


SANITY_STEPS = 10_000
SANITY_LR = 0.01


def exhaustive_batch(mdp, source="real", kernel=None, policy=None) -> agent.Batch:
    """Every (x, a, x') of the live states, weighted by policy(a|x) kernel(x'|x, a)."""
    kernel = mdp.transition if kernel is None else kernel
    rows = []
    live = mdp.nonterminals
    for x in live:
        for a in range(mdp.n_actions):
            pa = 1.0 if policy is None else policy[x, a]
            for y in np.flatnonzero(kernel[x, a] > 0):
                rows.append((x, a, mdp.reward[x, a], y, y in mdp.terminals, pa * kernel[x, a, y] / len(live)))
    s, a, r, y, t, w = map(np.array, zip(*rows))
    return agent.Batch(s, a, r.astype(float), y, t.astype(bool), w / w.sum(), source)


def _tv(p, q):
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1).max())


def tabular_sanity_errors(steps: int = SANITY_STEPS, lr: float = SANITY_LR) -> dict:
    """Drive each sampled update to convergence on exhaustive batches.

    Returns the distance of every learned quantity from its exact
    counterpart: total variation for distributions, absolute error for values.
    """
    chain, twist = make_chain(), make_twist2()
    eta = 1.0
    v_twist = solvers.value_iteration(twist, eta, uniform_policy(twist)).v_pi
    qd_twist = variational.twist_dynamics(twist, v_twist)
    q_chain = variational.q_from_v(chain, eta, np.zeros(2))
    out = {}

    net = agent.make_tabular_nets(4, 1)
    net.params["v_targ"] = v_twist.copy()
    net.params["q_targ"] = variational.q_from_v(twist, eta, v_twist).ravel().copy()
    agent.update_dynamics(net, exhaustive_batch(twist), eta, lr, steps)
    out["dynamics"] = _tv(net.dynamics.table(net.params["qd"])[0, 0], qd_twist[0, 0])

    net = agent.make_tabular_nets(4, 1)
    real = exhaustive_batch(twist)
    synth = exhaustive_batch(twist, "synthetic", kernel=qd_twist)
    agent.update_log_ratio(net, real, synth, lr, steps)
    nu = net.log_ratio.value(net.params["nu"], real.states, real.actions, real.next_states)
    exact_nu = np.log(qd_twist[real.states, real.actions, real.next_states]
                      / twist.transition[real.states, real.actions, real.next_states])
    out["log_ratio"] = float(np.max(np.abs(nu - exact_nu)))

    net = agent.make_tabular_nets(4, 1)
    nu_table = np.zeros((4, 1, 4))
    live = twist.transition > 0
    nu_table[live] = np.log(qd_twist[live] / twist.transition[live])
    net.params["nu"] = nu_table.ravel()
    net.params["v_targ"] = v_twist.copy()
    agent.update_q(net, exhaustive_batch(twist, "synthetic", kernel=qd_twist), eta, lr, steps)
    out["critic_q"] = abs(float(net.params["q"][0]) - float(v_twist[0]))

    net = agent.make_tabular_nets(2, 2)
    net.params["q"] = q_chain.ravel().copy()
    net.params["qc"] = q_chain.ravel().copy()
    qc = net.policy.table(net.params["qc"])
    acts = agent.Batch(np.zeros(2, int), np.arange(2), np.zeros(2), np.zeros(2, int), np.zeros(2, bool),
                       qc[0].copy(), "synthetic")
    agent.update_v(net, acts, lr, steps)
    v_chain = variational.softmax_value(uniform_policy(chain), q_chain)
    out["critic_v"] = abs(float(net.params["v"][0]) - float(v_chain[0]))

    net = agent.make_tabular_nets(2, 2)
    net.params["q"] = q_chain.ravel().copy()
    agent.update_actor(net, np.array([0]), None, lr, steps)
    target = variational.twist_policy(uniform_policy(chain), q_chain)
    out["actor"] = _tv(net.policy.table(net.params["qc"])[0], target[0])

    net = agent.make_tabular_nets(2, 2)
    net.params["qc"] = q_chain.ravel().copy()
    agent.m_step_update(net, acts, "map", 0.0, lr, steps)
    out["m_step"] = _tv(net.policy.table(net.params["pi"])[0], target[0])

    net = agent.make_tabular_nets(2, 2)
    agent.update_q_exp_td(net, exhaustive_batch(chain), eta, lr, steps)
    out["exp_td"] = float(np.max(np.abs(net.params["q"].reshape(2, 2)[0] - q_chain[0])))
    return out


def check_tabular_sanity(seed=0, instances=None) -> CheckResult:
    """Each sampled update converges to its exact counterpart on CHAIN2/TWIST2."""
    errs = tabular_sanity_errors()
    worst = max(errs, key=errs.get)
    return _result("tabular_sanity", list(errs.values()), 1e-3, f"worst stage {worst}")


CHECKS = {
    "lemma6_policy": check_lemma6_policy,
    "lemma6_dynamics": check_lemma6_dynamics,
    "monotonicity": check_monotonicity,
    "pi_vi_agreement": check_pi_vi_agreement,
    "elbo_bound": check_elbo_bound,
    "oracle_equality": check_oracle_equality,
    "finite_difference": check_finite_difference,
    "tabular_sanity": check_tabular_sanity,
}


# ---------------------------------------------------------------------------
# fault injection


def _corrupt_twist_policy(baseline, q):
    good = _ORIGINALS["twist_policy"](baseline, q)
    return 0.9 * good + 0.1 * baseline


def _corrupt_twist_dynamics(mdp, v):
    good = _ORIGINALS["twist_dynamics"](mdp, v)
    return 0.9 * good + 0.1 * mdp.transition


_ORIGINALS = {"twist_policy": variational.twist_policy, "twist_dynamics": variational.twist_dynamics}
FAULTS = {"twist_policy": _corrupt_twist_policy, "twist_dynamics": _corrupt_twist_dynamics}


@contextlib.contextmanager
def injected_fault(name: str | None):
    """Temporarily replace a closed-form twist with a slightly wrong one (test hook)."""
    if name is None:
        yield
        return
    if name not in FAULTS:
        raise ValueError(f"unknown fault {name!r}; expected one of {sorted(FAULTS)}")
    modules = [m for m in (variational, solvers) if getattr(m, name, None) is _ORIGINALS[name]]
    for m in modules:
        setattr(m, name, FAULTS[name])
    try:
        yield
    finally:
        for m in modules:
            setattr(m, name, _ORIGINALS[name])


def run_checks(names=None, seed: int = 0, fault: str | None = None) -> list[CheckResult]:
    names = list(CHECKS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown checks {unknown}; expected names from {list(CHECKS)}")
    with injected_fault(fault):
        return [CHECKS[n](seed) for n in names]
