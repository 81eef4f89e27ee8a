"""Episode rollouts, discounted reward-to-go and the two buffers."""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .environments import ACTION_NAMES, GridWorld
from .nn import MLP, TrainingError


def reward_to_go(rewards, gamma: float, tau: int) -> float:
    """Discounted sum of the first ``tau + 1`` rewards (fewer if the sequence is shorter)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("reward sequence is empty")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    n = min(tau + 1, r.size)
    return float(np.dot(gamma ** np.arange(n), r[:n]))


def discounted_returns(rewards, gamma: float, tau: int | None = None) -> np.ndarray:
    """All per-step returns B_t with a window of ``tau + 1`` rewards, truncated at the end."""
    r = np.asarray(rewards, dtype=np.float64)
    T = r.size
    window = T if tau is None else min(tau + 1, T)
    out = np.empty(T)
    if window >= T:
        acc = 0.0
        for t in range(T - 1, -1, -1):
            acc = r[t] + gamma * acc
            out[t] = acc
        return out
    powers = gamma ** np.arange(window)
    for t in range(T):
        seg = r[t:t + window]
        out[t] = np.dot(powers[:seg.size], seg)
    return out


class FiniteTimeBuffer:
    """FIFO of the most recent rewards; yields B_t once a full window is held.

    ``push`` returns the discounted return of the oldest reward as soon as the
    buffer holds ``capacity`` rewards; ``flush`` returns the (truncated) returns
    of everything not yet emitted, oldest first.
    """

    def __init__(self, capacity: int, gamma: float):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.gamma = gamma
        self._buf: deque[float] = deque(maxlen=capacity)
        self._head_emitted = False
        self._powers = None

    def __len__(self) -> int:
        return len(self._buf)

    def rewards(self) -> list[float]:
        return list(self._buf)

    def push(self, reward: float) -> float | None:
        if len(self._buf) == self.capacity:
            # maxlen evicts the oldest, whose return was already emitted
            self._head_emitted = False
        self._buf.append(float(reward))
        if len(self._buf) == self.capacity:
            self._head_emitted = True
            if self._powers is None:
                self._powers = self.gamma ** np.arange(self.capacity)
            return float(np.dot(self._powers, np.fromiter(self._buf, float, self.capacity)))
        return None

    def flush(self) -> list[float]:
        items = list(self._buf)
        out = []
        acc = 0.0
        for r in reversed(items):
            acc = r + self.gamma * acc
            out.append(acc)
        out.reverse()
        if self._head_emitted:
            out = out[1:]
        self.clear()
        return out

    def clear(self) -> None:
        self._buf.clear()
        self._head_emitted = False


@dataclass
class EpisodeBatch:
    states: list
    features: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    probs: np.ndarray
    returns: np.ndarray
    next_features: np.ndarray
    terminals: np.ndarray
    success: bool = False
    low_prob_count: int = 0

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def logit_scores(self) -> np.ndarray:
        """d log mu(a_t|x_t) / d logits, i.e. one_hot(a_t) - mu(.|x_t)."""
        s = -self.probs.copy()
        s[np.arange(len(self.actions)), self.actions] += 1.0
        return s

    def write_trace(self, path, env) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            cols = list(env.trace_columns(self.states[0]).keys())
            w.writerow(["step", *cols, "action", "reward", "B_t"])
            for t, st in enumerate(self.states):
                action = self.actions[t]
                name = ACTION_NAMES[action] if isinstance(env, GridWorld) else int(action)
                w.writerow([t, *env.trace_columns(st).values(), name, repr(float(self.rewards[t])),
                            repr(float(self.returns[t]))])


class ReplayBuffer:
    """Bounded FIFO store of (x, r, a, x', B, terminal) with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.x = np.zeros((capacity, state_dim))
        self.x_next = np.zeros((capacity, state_dim))
        self.r = np.zeros(capacity)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.B = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._next = 0

    def __len__(self) -> int:
        return self.size

    def push(self, x, r, a, x_next, B, terminal=False) -> None:
        i = self._next
        self.x[i] = x
        self.r[i] = r
        self.a[i] = a
        self.x_next[i] = x_next
        self.B[i] = B
        self.terminal[i] = terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push_episode(self, ep: EpisodeBatch) -> None:
        for t in range(len(ep)):
            self.push(ep.features[t], ep.rewards[t], ep.actions[t], ep.next_features[t],
                      ep.returns[t], ep.terminals[t])

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=n)

    def sample(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        idx = self.sample_indices(n, rng)
        return {
            "x": self.x[idx], "r": self.r[idx], "a": self.a[idx],
            "x_next": self.x_next[idx], "B": self.B[idx], "terminal": self.terminal[idx],
        }


class UniformPolicy:
    def __init__(self, n_actions: int):
        self.p = np.full(n_actions, 1.0 / n_actions)

    def __call__(self, features):
        return self.p


class FixedActionPolicy:
    def __init__(self, n_actions: int, action: int):
        self.p = np.zeros(n_actions)
        self.p[action] = 1.0

    def __call__(self, features):
        return self.p


def _sample_action(p: np.ndarray, rng: np.random.Generator) -> int:
    if p.size == 1:
        return 0
    a = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return min(a, p.size - 1)


def rollout(env, policy, rng: np.random.Generator, max_steps: int | None = None,
            gamma: float = 1.0, tau: int | None = None, start=None) -> EpisodeBatch:
    """Run one episode; ``policy`` maps a feature vector to action probabilities.

    The policy is assumed fixed for the episode, so its output is cached per
    state.  ``tau=None`` means full-episode returns.
    """
    state = env.reset(rng, start)
    cache: dict = {}
    states, feats, next_feats, actions, rewards, probs, terms = [], [], [], [], [], [], []
    # tau=None: a window no episode can fill, so every return is computed at flush
    window = 2 ** 62 if tau is None else tau + 1
    ftb = FiniteTimeBuffer(window, gamma)
    returns: list[float] = []
    low = 0
    terminal = False
    steps = 0
    while not terminal and (max_steps is None or steps < max_steps):
        key = state[:-1]
        x = env.encode(state)
        p = cache.get(key)
        if p is None:
            p = np.asarray(policy(x), dtype=np.float64)
            if not np.all(np.isfinite(p)):
                raise TrainingError("policy produced non-finite probabilities")
            cache[key] = p
        a = _sample_action(p, rng)
        if p[a] < 1e-12:
            low += 1
        nxt, r, terminal = env.step(state, a, rng)
        states.append(state)
        feats.append(x)
        next_feats.append(env.encode(nxt))
        actions.append(a)
        rewards.append(r)
        probs.append(p)
        terms.append(terminal)
        done = ftb.push(r)
        if done is not None:
            returns.append(done)
        state = nxt
        steps += 1
    returns.extend(ftb.flush())
    return EpisodeBatch(
        states=states,
        features=np.array(feats),
        actions=np.array(actions, dtype=np.int64),
        rewards=np.array(rewards, dtype=np.float64),
        probs=np.array(probs),
        returns=np.array(returns),
        next_features=np.array(next_feats),
        terminals=np.array(terms, dtype=bool),
        success=bool(env.is_success(state)) if steps else False,
        low_prob_count=low,
    )


def actor_policy(net: MLP):
    return net.forward


def monte_carlo_value(env, policy, state, n_episodes: int, gamma: float, tau: int | None,
                      rng: np.random.Generator, max_steps: int | None = None) -> tuple[float, float]:
    """Sample mean of B from ``state`` and its standard error."""
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    samples = sample_returns(env, policy, state, n_episodes, gamma, tau, rng, max_steps)
    se = float(samples.std(ddof=1) / np.sqrt(n_episodes)) if n_episodes > 1 else float("nan")
    return float(samples.mean()), se


def sample_returns(env, policy, state, n_episodes, gamma, tau, rng, max_steps=None) -> np.ndarray:
    out = np.empty(n_episodes)
    for i in range(n_episodes):
        ep = rollout(env, policy, rng, max_steps=max_steps, gamma=gamma, tau=tau, start=state)
        out[i] = ep.returns[0] if len(ep) else 0.0
    return out
