"""Independent reference computations shared by the tests and the check command.

None of these call into the package's solvers or enumeration: trajectories
are walked by plain recursion and simplex maximizations are done by
scaled projected gradient ascent.
"""

import math

import numpy as np


def count_paths(mdp, max_len):
    """Number of (action, successor) paths from the start support that end at a terminal."""
    term = set(mdp.terminals)

    def walk(x, depth):
        if x in term:
            return 1
        if depth == max_len:
            return 0
        total = 0
        for a in range(mdp.n_actions):
            for y in range(mdp.n_states):
                if mdp.transition[x, a, y] > 0:
                    total += walk(y, depth + 1)
        return total

    return sum(walk(x, 0) for x in range(mdp.n_states) if mdp.initial[x] > 0)


def path_moments(mdp, policy, eta):
    """(sum_xi p(xi), sum_xi p(xi) R(xi), sum_xi p(xi) exp(eta R(xi))) by recursion in plain floats."""
    term = set(mdp.terminals)

    def walk(x, prob, ret):
        if x in term:
            return prob, prob * ret, prob * math.exp(eta * ret)
        acc = [0.0, 0.0, 0.0]
        for a in range(mdp.n_actions):
            pa = policy[x, a]
            if pa == 0:
                continue
            for y in range(mdp.n_states):
                py = mdp.transition[x, a, y]
                if py == 0:
                    continue
                for i, v in enumerate(walk(y, prob * pa * py, ret + mdp.reward[x, a])):
                    acc[i] += v
        return tuple(acc)

    out = [0.0, 0.0, 0.0]
    for x in range(mdp.n_states):
        if mdp.initial[x] > 0:
            for i, v in enumerate(walk(x, mdp.initial[x], 0.0)):
                out[i] += v
    return tuple(out)


def maximize_on_simplex(grad, curvature, dim, iters=500, tol=1e-13):
    """Iterative maximizer of a concave, coordinate-separable objective on the simplex.

    Each step is the gradient projected onto the simplex's tangent space in
    the metric given by ``curvature`` (the diagonal of the negative Hessian),
    shortened so iterates stay strictly positive and backtracked until the
    directional derivative at the new point is still nonnegative.
    """
    x = np.full(dim, 1.0 / dim)
    for _ in range(iters):
        g = grad(x)
        w = 1.0 / curvature(x)
        lam = (w @ g) / w.sum()
        d = w * (g - lam)
        if np.max(np.abs(d)) <= tol * (1 + np.max(np.abs(g))) * np.max(w):
            break
        t = 1.0
        neg = d < 0
        if neg.any():
            t = min(1.0, 0.9 * np.min(-x[neg] / d[neg]))
        for _ in range(60):
            if grad(x + t * d) @ d >= 0:
                break
            t *= 0.5
        new = x + t * d
        new = new / new.sum()
        if np.array_equal(new, x):
            break
        x = new
    return x


def regularized_argmax(base, scores):
    """argmax_q sum_i q_i (scores_i - log(q_i / base_i)) over the support of ``base``."""
    support = np.flatnonzero(base > 0)
    b, s = base[support], scores[support]

    def f(q):
        return float(np.sum(q * (s - np.log(q / b))))

    def g(q):
        return s - np.log(q / b) - 1.0

    q = maximize_on_simplex(g, lambda q: 1.0 / q, len(support))
    full = np.zeros_like(base, dtype=float)
    full[support] = q
    return full, f(q)


def m_step_argmax(target, old, lam):
    """argmax_pi sum_a target_a log pi_a - lam KL(old || pi) on the simplex."""
    c = target + lam * old

    return maximize_on_simplex(lambda p: c / p, lambda p: np.maximum(c, 1e-300) / p**2, len(target))


def random_distribution(rng, n, zeros=False):
    p = rng.dirichlet(np.ones(n))
    if zeros and n > 1:
        p[rng.integers(n)] = 0.0
        p /= p.sum()
    return p
