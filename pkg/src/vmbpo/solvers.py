"""Exact E-step solvers (policy and value iteration, model-based and model-free),
the exact tabular M-step, and the EM outer loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, ConvergenceError, EnumerationBudgetError
from .mdp import FiniteMdp, check_transient_under, enumerate_trajectories, policy_evaluation_matrix
from .variational import (
    MODES,
    apply_induced_operator,
    apply_optimal_operator,
    elbo,
    log_likelihood,
    q_from_v,
    twist_dynamics,
    twist_policy,
    xlogy_ratio,
)

IMPROVEMENT_MODES = ("closed_form", "kl_projection")


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-10
    max_sweeps: int = 100_000
    improvement_mode: str = "closed_form"

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ConfigError(f"solver.tolerance must be positive, got {self.tolerance!r}")
        if int(self.max_sweeps) < 1:
            raise ConfigError(f"solver.max_sweeps must be >= 1, got {self.max_sweeps!r}")
        if self.improvement_mode not in IMPROVEMENT_MODES:
            raise ConfigError(f"solver.improvement_mode must be one of {IMPROVEMENT_MODES}")


@dataclass
class EStepSolution:
    q_c_star: np.ndarray
    q_d_star: np.ndarray
    v_pi: np.ndarray
    q_pi: np.ndarray
    iterations: int
    residual: float
    # V of each evaluated variational policy (policy iteration only)
    value_history: list = field(default_factory=list)


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _finish(mdp, eta, baseline, v, iterations, history=()):
    q = q_from_v(mdp, eta, v)
    residual = float(np.max(np.abs(apply_optimal_operator(mdp, eta, baseline, v) - v)))
    return EStepSolution(
        q_c_star=twist_policy(baseline, q),
        q_d_star=twist_dynamics(mdp, v),
        v_pi=v,
        q_pi=q,
        iterations=iterations,
        residual=residual,
        value_history=list(history),
    )


def policy_evaluation(mdp: FiniteMdp, eta: float, baseline: np.ndarray, q_c: np.ndarray,
                      mode: str = "model_based", cfg: SolverConfig = SolverConfig(),
                      v0: np.ndarray | None = None):
    """Fixed point of the q_c-induced operator by repeated full (Jacobi) sweeps.

    Returns ``(V, Q)`` with ``Q = q_from_v(V)``.
    """
    _check_mode(mode)
    v = np.zeros(mdp.n_states) if v0 is None else np.array(v0, dtype=float)
    v[mdp.terminal_mask] = 0.0
    residual = np.inf
    for _ in range(cfg.max_sweeps):
        new = apply_induced_operator(mdp, eta, baseline, q_c, v, mode)
        residual = float(np.max(np.abs(new - v)))
        v = new
        if residual <= cfg.tolerance:
            return v, q_from_v(mdp, eta, v)
    raise ConvergenceError(f"policy evaluation did not converge, residual {residual:.3e}",
                           residual, cfg.max_sweeps)


def _kl_projection(baseline, q, tol, step=1.0, max_iter=1000):
    """argmin over the simplex of KL(q_c || pi exp(Q) / Z), by entropic mirror descent.

    The KL gradient in log-coordinates is ``log q_c - log target``; a unit step
    lands on the minimizer, later steps only confirm stationarity.
    """
    support = baseline > 0
    with np.errstate(divide="ignore"):
        log_pi = np.log(baseline)
    log_target = np.where(support, log_pi + q, -np.inf)
    log_target -= logsumexp(log_target, axis=-1, keepdims=True)
    log_q = log_pi - logsumexp(log_pi, axis=-1, keepdims=True)
    current = np.exp(log_q)
    for _ in range(max_iter):
        with np.errstate(invalid="ignore"):
            grad = np.where(support, log_q - log_target, 0.0)
        log_q = np.where(support, log_q - step * grad, -np.inf)
        log_q -= logsumexp(log_q, axis=-1, keepdims=True)
        new = np.exp(log_q)
        if np.max(np.abs(new - current)) <= tol:
            return new
        current = new
    raise ConvergenceError("KL projection did not converge")


def policy_improvement(baseline: np.ndarray, q: np.ndarray, cfg: SolverConfig = SolverConfig()) -> np.ndarray:
    if cfg.improvement_mode == "closed_form":
        return twist_policy(baseline, q)
    return _kl_projection(np.asarray(baseline, dtype=float), np.asarray(q, dtype=float), cfg.tolerance * 1e-3)


def _policy_iteration(mdp, eta, baseline, cfg, mode):
    live = mdp.nonterminals
    q_c = np.array(baseline, dtype=float)
    v = np.zeros(mdp.n_states)
    history = []
    for k in range(1, cfg.max_sweeps + 1):
        v, q = policy_evaluation(mdp, eta, baseline, q_c, mode, cfg, v0=v)
        history.append(v)
        new = policy_improvement(baseline, q, cfg)
        change = float(np.max(np.abs(new[live] - q_c[live]))) if len(live) else 0.0
        q_c = new
        if change < cfg.tolerance:
            return _finish(mdp, eta, baseline, v, k, history)
    raise ConvergenceError("policy iteration did not converge", change, cfg.max_sweeps)


def model_based_pi(mdp: FiniteMdp, eta: float, baseline: np.ndarray,
                   cfg: SolverConfig = SolverConfig()) -> EStepSolution:
    """Policy iteration whose evaluation sweeps twist the dynamics at every step."""
    return _policy_iteration(mdp, eta, baseline, cfg, "model_based")


def model_free_pi(mdp: FiniteMdp, eta: float, baseline: np.ndarray,
                  cfg: SolverConfig = SolverConfig()) -> EStepSolution:
    """Policy iteration that only forms the variational dynamics once converged."""
    return _policy_iteration(mdp, eta, baseline, cfg, "model_free")


def value_iteration(mdp: FiniteMdp, eta: float, baseline: np.ndarray, mode: str = "model_free",
                    cfg: SolverConfig = SolverConfig(), v0: np.ndarray | None = None) -> EStepSolution:
    _check_mode(mode)
    v = np.zeros(mdp.n_states) if v0 is None else np.array(v0, dtype=float)
    v[mdp.terminal_mask] = 0.0
    residual = np.inf
    for sweep in range(1, cfg.max_sweeps + 1):
        if mode == "model_free":
            new = apply_optimal_operator(mdp, eta, baseline, v)
        else:
            q_c = twist_policy(baseline, q_from_v(mdp, eta, v))
            new = apply_induced_operator(mdp, eta, baseline, q_c, v, "model_based")
        residual = float(np.max(np.abs(new - v)))
        v = new
        if residual <= cfg.tolerance:
            return _finish(mdp, eta, baseline, v, sweep)
    raise ConvergenceError(f"value iteration did not converge, residual {residual:.3e}",
                           residual, cfg.max_sweeps)


E_STEP_SOLVERS = {
    "model_based_pi": lambda mdp, eta, pi, cfg: model_based_pi(mdp, eta, pi, cfg),
    "model_free_pi": lambda mdp, eta, pi, cfg: model_free_pi(mdp, eta, pi, cfg),
    "value_iteration": lambda mdp, eta, pi, cfg: value_iteration(mdp, eta, pi, "model_free", cfg),
    "model_based_vi": lambda mdp, eta, pi, cfg: value_iteration(mdp, eta, pi, "model_based", cfg),
}


# ---------------------------------------------------------------------------
# M-step


def occupancy(mdp: FiniteMdp, policy: np.ndarray, dynamics: np.ndarray) -> np.ndarray:
    """Expected number of visits to each state before termination, from p0."""
    check_transient_under(mdp, policy, dynamics)
    P, live = policy_evaluation_matrix(mdp, policy, dynamics)
    d = np.zeros(mdp.n_states)
    d[live] = np.linalg.solve((np.eye(len(live)) - P).T, mdp.initial[live])
    return d


def m_step_objective(mdp: FiniteMdp, e_sol: EStepSolution, policy: np.ndarray,
                     old_policy: np.ndarray, lam: float) -> float:
    """E_{q*}[sum_t log pi(a_t|x_t) - lam KL(pi_old(.|x_t) || pi(.|x_t))]."""
    d = occupancy(mdp, e_sol.q_c_star, e_sol.q_d_star)
    live = mdp.nonterminals
    with np.errstate(divide="ignore"):
        logpi = np.log(policy[live])
    cross = np.where(e_sol.q_c_star[live] > 0, e_sol.q_c_star[live] * logpi, 0.0).sum(axis=1)
    kl = xlogy_ratio(old_policy[live], policy[live]).sum(axis=1) if lam > 0 else 0.0
    return float(d[live] @ (cross - lam * kl))


def m_step_exact(mdp: FiniteMdp, e_sol: EStepSolution, baseline: np.ndarray, lam: float = 0.0) -> np.ndarray:
    """Exact tabular maximizer of the regularized M-step objective.

    Per visited state the objective is ``sum_a (q*(a) + lam pi_old(a)) log pi(a)``
    up to constants and the positive visitation weight, whose maximizer on the
    simplex is the normalized coefficient vector.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam!r}")
    # q* must be transient for the objective (and its weights) to be finite
    occupancy(mdp, e_sol.q_c_star, e_sol.q_d_star)
    if lam == 0:
        return e_sol.q_c_star.copy()
    return (e_sol.q_c_star + lam * baseline) / (1.0 + lam)


@dataclass
class EmRecord:
    iteration: int
    baseline: np.ndarray
    solution: EStepSolution
    elbo: float
    log_likelihood: float


def em_solve(mdp: FiniteMdp, eta: float, pi0: np.ndarray, n_em_iters: int, lam: float = 0.0,
             cfg: SolverConfig = SolverConfig(), e_step: str = "value_iteration") -> list[EmRecord]:
    """Alternate an exact E-step with :func:`m_step_exact`.

    ELBO and log-likelihood are filled in only when the MDP is enumerable;
    otherwise they are NaN.
    """
    if e_step not in E_STEP_SOLVERS:
        raise ConfigError(f"unknown E-step solver {e_step!r}")
    try:
        trajs = enumerate_trajectories(mdp)
        if not trajs.complete:
            trajs = None
    except EnumerationBudgetError:
        trajs = None
    records = []
    pi = np.array(pi0, dtype=float)
    for k in range(n_em_iters):
        sol = E_STEP_SOLVERS[e_step](mdp, eta, pi, cfg)
        if trajs is not None:
            lb = elbo(mdp, eta, sol.q_c_star, sol.q_d_star, pi, trajs)
            ll = log_likelihood(mdp, eta, pi, trajs)
        else:
            lb = ll = float("nan")
        records.append(EmRecord(k, pi, sol, lb, ll))
        pi = m_step_exact(mdp, sol, pi, lam)
    return records
