"""Independent reference computations used by the test-suite.

Nothing here calls into the estimator code paths it is used to check: exact
objectives come from summing over every trajectory of a small MDP, and
gradients from central finite differences of those sums.
"""
from __future__ import annotations

from itertools import product

import numpy as np

from arcvc.environments import TabularMDP
from arcvc.nn import MLP


def toy_mdp() -> TabularMDP:
    """Two states, two actions, three steps per episode."""
    P = np.array([
        [[0.7, 0.3], [0.2, 0.8]],
        [[0.5, 0.5], [0.9, 0.1]],
    ])
    R = np.array([
        [[1.0, -1.0], [0.5, -2.0]],
        [[0.0, 2.0], [-1.5, 1.0]],
    ])
    return TabularMDP(P, R, start=0, horizon=3)


def trajectory_distribution(mdp: TabularMDP, actor: MLP, gamma: float):
    """All (probability, discounted return) pairs for episodes from the start state."""
    probs = {s: actor.forward(np.eye(mdp.n_states)[s]) for s in range(mdp.n_states)}
    out = []
    for seq in product(range(mdp.n_actions), range(mdp.n_states), repeat=mdp.horizon):
        s, p, B = mdp.start, 1.0, 0.0
        for t in range(mdp.horizon):
            a, nxt = seq[2 * t], seq[2 * t + 1]
            p *= probs[s][a] * mdp.P[s, a, nxt]
            B += gamma ** t * mdp.R[s, a, nxt]
            s = nxt
        out.append((p, B))
    return out


def exact_objective(mdp, actor, gamma, f, D, lam, penalty, reference, nu_fixed=0.0, bootstrapped=False):
    """Penalised objective by enumeration. ``reference='J'`` recomputes J(theta)."""
    dist = trajectory_distribution(mdp, actor, gamma)
    J = sum(p * B for p, B in dist)
    nu = J if reference == "J" else nu_fixed
    g = lambda x: max(0.0, x) ** 2
    phi = (lambda a: a * g(a)) if bootstrapped else g
    if penalty == "risk_network":
        R = sum(p * f.value(B - nu) for p, B in dist)
        return J - lam * phi(R - D)
    return sum(p * (B - lam * phi(f.value(B - nu) - D)) for p, B in dist)


def exact_gradient(mdp, actor, gamma, h=1e-6, **kw) -> np.ndarray:
    theta = actor.params.copy()
    grad = np.zeros_like(theta)
    probe = actor.copy()
    for i in range(theta.size):
        probe.params = theta.copy()
        probe.params[i] += h
        up = exact_objective(mdp, probe, gamma, **kw)
        probe.params[i] -= 2 * h
        down = exact_objective(mdp, probe, gamma, **kw)
        grad[i] = (up - down) / (2 * h)
    return grad


def exact_moments(mdp, actor, gamma, f, nu):
    dist = trajectory_distribution(mdp, actor, gamma)
    J = sum(p * B for p, B in dist)
    R = sum(p * f.value(B - nu) for p, B in dist)
    return J, R


def enumerate_ruin_paths(m: int, k: int) -> float:
    """Probability of bankruptcy within k bets, by brute force over all 2**k sequences."""
    hits = 0
    for seq in product((1, -1), repeat=k):
        f = m
        for s in seq:
            if f <= 0:
                break
            f += s
        if f <= 0:
            hits += 1
    return hits / 2 ** k


def finite_difference(fn, params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(params)
    for i in range(params.size):
        p = params.copy()
        p[i] += h
        up = fn(p)
        p[i] -= 2 * h
        grad[i] = (up - fn(p)) / (2 * h)
    return grad
