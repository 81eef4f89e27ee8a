"""Per-episode records and the evaluation measures built on them."""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, fields

import numpy as np

from .trajectory import rollout


@dataclass(frozen=True)
class RunRecord:
    episode: int
    total_reward: float
    B0: float
    violation: bool
    success: bool
    sample_risk: float
    reference: float
    wall_ms: float = 0.0

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)


def _window(records, window: int | None):
    records = list(records)
    if window is None:
        window = len(records)
    if window <= 0 or not records:
        raise ValueError("empty evaluation window")
    if window > len(records):
        raise ValueError(f"window {window} exceeds {len(records)} records")
    return records[-window:]


def violation_rate(records, window: int | None = 100) -> float:
    recs = _window(records, window)
    return sum(bool(r.violation) for r in recs) / len(recs)


def success_rate(records, window: int | None = 100) -> float:
    recs = _window(records, window)
    return sum(bool(r.success) for r in recs) / len(recs)


def deviation_score(eps_g: float, eps_pi: float) -> float:
    """|eps_G - eps_pi| / max(eps_G, eps_pi), defined as 0 when both vanish."""
    top = max(eps_g, eps_pi)
    if top == 0:
        return 0.0
    return abs(eps_g - eps_pi) / top


@dataclass(frozen=True)
class EpsilonBarSample:
    gamma: float
    eps_g: float
    eps_pi: float
    eps_bar: float
    eps_g_se: float
    eps_pi_se: float


def stationary_states(env, policy, n_steps: int, rng, max_steps=None) -> Counter:
    """Visit counts of a long run under ``policy``, restarting episodes as they end."""
    counts: Counter = Counter()
    total = 0
    while total < n_steps:
        ep = rollout(env, policy, rng, max_steps=max_steps)
        for st in ep.states[: n_steps - total]:
            counts[tuple(st[:-1])] += 1
        total += max(len(ep), 1)
    return counts


def epsilon_bar(policy, env, gamma: float, n_states: int, n_episodes: int, rng,
                f, tau: int | None = None, stationary_steps: int = 100_000,
                max_steps: int | None = None) -> EpsilonBarSample:
    """Global-mean versus per-state reference risk, weighted by visit frequency.

    States are drawn from the empirical stationary distribution.  For each one
    a first batch of rollouts estimates J(x); an independent second batch
    provides the returns B that enter f.
    """
    if n_episodes < 1 or n_states < 1:
        raise ValueError("need at least one state and one episode")
    counts = stationary_states(env, policy, stationary_steps, rng, max_steps)
    keys = sorted(counts)
    p = np.array([counts[k] for k in keys], dtype=float)
    picks = rng.choice(len(keys), size=n_states, p=p / p.sum())
    J = np.empty(n_states)
    B = np.empty((n_states, n_episodes))
    for i, j in enumerate(picks):
        start = keys[j] + (0,)
        for pass_ in range(2):
            vals = np.empty(n_episodes)
            for e in range(n_episodes):
                ep = rollout(env, policy, rng, max_steps=max_steps, gamma=gamma, tau=tau, start=start)
                vals[e] = ep.returns[0] if len(ep) else 0.0
            if pass_ == 0:
                J[i] = vals.mean()
            else:
                B[i] = vals
    J_bar = J.mean()
    fv = np.vectorize(f.value, otypes=[float])
    per_pi = fv(B - J[:, None]).mean(axis=1)
    per_g = fv(B - J_bar).mean(axis=1)
    eps_pi = float(per_pi.mean())
    eps_g = float(per_g.mean())
    se = (lambda a: float(a.std(ddof=1) / np.sqrt(a.size)) if a.size > 1 else 0.0)
    return EpsilonBarSample(gamma, eps_g, eps_pi, deviation_score(eps_g, eps_pi), se(per_g), se(per_pi))
