"""E-step operators, closed-form exponential twisting, the ELBO and the exact likelihood.

``eta`` is the temperature that turns rewards into log-likelihoods of
optimality. All log-sum-exp reductions are max-shifted (via
:func:`scipy.special.logsumexp`) and KL sums use ``0 * log(0/0) = 0``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .errors import SupportError
from .mdp import FiniteMdp, TrajectorySet, enumerate_trajectories

MODES = ("model_based", "model_free")


def _check_eta(eta):
    if not eta > 0:
        raise ValueError(f"temperature eta must be positive, got {eta!r}")


def xlogy_ratio(q, p):
    """Elementwise ``q * log(q / p)`` with ``0 log 0 = 0``; raises where q > 0 = p."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    if ((q > 0) & (p <= 0)).any():
        raise SupportError("distribution puts mass outside the reference support")
    out = np.zeros(np.broadcast(q, p).shape)
    pos = np.broadcast_to(q > 0, out.shape)
    qq, pp = np.broadcast_to(q, out.shape), np.broadcast_to(p, out.shape)
    out[pos] = qq[pos] * (np.log(qq[pos]) - np.log(pp[pos]))
    return out


def log_expect_exp(weights, values, axis=-1):
    """``log sum_i w_i exp(v_i)`` along ``axis``, max-shifted."""
    return logsumexp(values, axis=axis, b=weights)


def q_from_v(mdp: FiniteMdp, eta: float, v: np.ndarray) -> np.ndarray:
    """Q(x,a) = eta r(x,a) + log E_{x'~p}[exp V(x')]; terminal rows are zero."""
    _check_eta(eta)
    v = np.asarray(v, dtype=float)
    with np.errstate(divide="ignore"):
        q = eta * mdp.reward + log_expect_exp(mdp.transition, v[None, None, :])
    q[mdp.terminal_mask] = 0.0
    return q


def softmax_value(policy: np.ndarray, q: np.ndarray, terminal: np.ndarray | None = None) -> np.ndarray:
    """V(x) = log E_{a~policy}[exp Q(x,a)]; zero on ``terminal`` states."""
    v = log_expect_exp(policy, q)
    if terminal is not None:
        v = np.where(terminal, 0.0, v)
    return v


def _twist(base: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Rows of ``base * exp(scores)`` renormalized; zero-mass entries stay zero."""
    support = base > 0
    with np.errstate(invalid="ignore"):
        shift = np.where(support, scores, -np.inf).max(axis=-1, keepdims=True)
        w = np.where(support, base * np.exp(np.where(support, scores - shift, 0.0)), 0.0)
        return w / w.sum(axis=-1, keepdims=True)


def twist_dynamics(mdp: FiniteMdp, v: np.ndarray) -> np.ndarray:
    """q_d^V(x'|x,a) proportional to p(x'|x,a) exp V(x'). Terminal rows are copied from p."""
    v = np.asarray(v, dtype=float)
    qd = _twist(mdp.transition, np.broadcast_to(v, mdp.transition.shape))
    qd[mdp.terminal_mask] = mdp.transition[mdp.terminal_mask]
    return qd


def twist_policy(baseline: np.ndarray, q: np.ndarray) -> np.ndarray:
    """q_c^Q(a|x) proportional to pi(a|x) exp Q(x,a)."""
    return _twist(np.asarray(baseline, dtype=float), np.asarray(q, dtype=float))


def apply_induced_operator(mdp: FiniteMdp, eta: float, baseline: np.ndarray, q_c: np.ndarray,
                           v: np.ndarray, mode: str = "model_free") -> np.ndarray:
    """One application of the q_c-induced operator to ``v``.

    ``model_based`` realizes the inner maximization over variational dynamics
    with :func:`twist_dynamics` and evaluates the regularized expectation
    explicitly; ``model_free`` uses the rewritten form
    ``E_{q_c}[Q - log(q_c / pi)]``. Both agree up to round-off.
    """
    _check_eta(eta)
    v = np.asarray(v, dtype=float)
    live = mdp.nonterminals
    qc = q_c[live]
    policy_kl = xlogy_ratio(qc, baseline[live]).sum(axis=1)
    if mode == "model_free":
        q = q_from_v(mdp, eta, v)[live]
    elif mode == "model_based":
        qd = twist_dynamics(mdp, v)[live]
        inner = (qd * v).sum(axis=-1) - xlogy_ratio(qd, mdp.transition[live]).sum(axis=-1)
        q = eta * mdp.reward[live] + inner
    else:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    out = np.zeros(mdp.n_states)
    out[live] = (qc * q).sum(axis=1) - policy_kl
    return out


def apply_optimal_operator(mdp: FiniteMdp, eta: float, baseline: np.ndarray, v: np.ndarray) -> np.ndarray:
    """T[V](x) = log E_{a~pi, x'~p}[exp(eta r(x,a) + V(x'))]."""
    _check_eta(eta)
    v = np.asarray(v, dtype=float)
    live = mdp.nonterminals
    weights = baseline[live, :, None] * mdp.transition[live]
    scores = eta * mdp.reward[live, :, None] + v[None, None, :]
    out = np.zeros(mdp.n_states)
    out[live] = logsumexp(scores, axis=(1, 2), b=weights)
    return out


def _check_support(mdp, q_c, q_d, baseline):
    live = mdp.nonterminals
    if ((q_c[live] > 0) & (baseline[live] <= 0)).any():
        raise SupportError("variational policy puts mass where the baseline policy has none")
    if ((q_d[live] > 0) & (mdp.transition[live] <= 0)).any():
        raise SupportError("variational dynamics put mass where the true dynamics have none")


def elbo(mdp: FiniteMdp, eta: float, q_c: np.ndarray, q_d: np.ndarray, baseline: np.ndarray,
         trajectories: TrajectorySet | None = None) -> float:
    """Exact ELBO by enumerating every trajectory under (p0, q_d, q_c)."""
    _check_eta(eta)
    _check_support(mdp, q_c, q_d, baseline)
    trajs = trajectories if trajectories is not None else enumerate_trajectories(mdp)
    if not trajs.complete:
        raise ValueError("trajectory enumeration is incomplete; ELBO needs an enumerable MDP")
    logq = trajs.log_probs(mdp, q_c, q_d)
    weight = np.exp(logq)
    keep = weight > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        step = (eta * mdp.reward - (np.log(q_c) - np.log(baseline)))[:, :, None] \
            - (np.log(q_d) - np.log(mdp.transition))
    # only trajectories with positive q-probability contribute; their terms are finite
    step = np.where(np.isfinite(step), step, 0.0)
    per_traj = trajs.step_sum(step)
    return float(np.sum(weight[keep] * per_traj[keep]))


def log_likelihood(mdp: FiniteMdp, eta: float, baseline: np.ndarray,
                   trajectories: TrajectorySet | None = None) -> float:
    """log sum_xi p_pi(xi) exp(eta * return(xi)) over all enumerated trajectories."""
    _check_eta(eta)
    trajs = trajectories if trajectories is not None else enumerate_trajectories(mdp)
    if not trajs.complete:
        raise ValueError("trajectory enumeration is incomplete; likelihood needs an enumerable MDP")
    logp = trajs.log_probs(mdp, baseline)
    return float(logsumexp(logp + eta * trajs.returns(mdp)))
