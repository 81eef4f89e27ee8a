"""Simulation domains: the mined grid world, gambler's ruin and small tabular MDPs.

All environments share a tiny duck-typed interface used by the rollout code::

    state = env.reset(rng)
    next_state, reward, terminal = env.step(state, action, rng)
    features = env.encode(state)

States are immutable named tuples (hashable, so policies can be cached per
state while the actor is frozen).  Every random draw goes through the
generator passed in by the caller.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .nn import ConfigurationError

UP, DOWN, RIGHT, LEFT = range(4)
ACTION_NAMES = ("up", "down", "right", "left")
MOVES = ((0, -1), (0, 1), (1, 0), (-1, 0))


class UsageError(RuntimeError):
    """Raised when an environment is driven outside its contract."""


# --------------------------------------------------------------------------- grid world


@dataclass(frozen=True)
class GridWorldConfig:
    width: int = 20
    height: int = 25
    p_mine: float = 0.2
    p_noise: float = 0.1
    r_mine: float = -1.0
    r_target: float = 1.0
    start: tuple[int, int] = (0, 0)
    target: tuple[int, int] | None = None  # default: lower-left corner
    max_steps: int = 500
    layout_seed: int = 0
    local_mines: bool = True

    def __post_init__(self):
        if self.target is None:
            object.__setattr__(self, "target", (0, self.height - 1))
        object.__setattr__(self, "start", tuple(self.start))
        object.__setattr__(self, "target", tuple(self.target))
        if self.width < 2 or self.height < 1:
            raise ConfigurationError("grid must be at least 2 cells wide")
        for name in ("p_mine", "p_noise"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name}={p} outside [0, 1]")
        if not self.r_mine < 0:
            raise ConfigurationError("r_mine must be negative")
        if not self.r_target > 0:
            raise ConfigurationError("r_target must be positive")
        if self.start == self.target:
            raise ConfigurationError("start and target must differ")
        for cell in (self.start, self.target):
            if not (0 <= cell[0] < self.width and 0 <= cell[1] < self.height):
                raise ConfigurationError(f"cell {cell} outside the grid")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be positive")

    @property
    def x_max(self) -> int:
        return self.width - 1

    @property
    def y_max(self) -> int:
        return self.height - 1


class GridWorldState(NamedTuple):
    x: int
    y: int
    steps: int = 0


def mine_probability(config: GridWorldConfig, x: int) -> float:
    return config.p_mine * (config.x_max - x) / config.x_max


def generate_layout(config: GridWorldConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Boolean mine mask indexed ``[y, x]``; start and target are never mined."""
    if rng is None:
        rng = np.random.default_rng(config.layout_seed)
    xs = np.arange(config.width)
    probs = config.p_mine * (config.x_max - xs) / config.x_max
    mines = rng.random((config.height, config.width)) < probs[None, :]
    for x, y in (config.start, config.target):
        mines[y, x] = False
    return mines


def layout_to_text(config: GridWorldConfig, mines: np.ndarray) -> str:
    rows = []
    for y in range(config.height):
        row = []
        for x in range(config.width):
            if (x, y) == config.start:
                row.append("S")
            elif (x, y) == config.target:
                row.append("T")
            else:
                row.append("M" if mines[y, x] else ".")
        rows.append("".join(row))
    return "\n".join(rows) + "\n"


def layout_from_text(text: str) -> tuple[np.ndarray, tuple[int, int], tuple[int, int]]:
    """Parse a text grid; returns ``(mines, start, target)``."""
    rows = [r for r in text.splitlines() if r.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ConfigurationError("layout rows must be non-empty and of equal length")
    mines = np.zeros((len(rows), len(rows[0])), dtype=bool)
    start = target = None
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch == "M":
                mines[y, x] = True
            elif ch == "S":
                start = (x, y)
            elif ch == "T":
                target = (x, y)
            elif ch != ".":
                raise ConfigurationError(f"unexpected layout character {ch!r}")
    if start is None or target is None:
        raise ConfigurationError("layout needs exactly one S and one T")
    return mines, start, target


class GridWorld:
    n_actions = 4

    def __init__(self, config: GridWorldConfig, mines: np.ndarray | None = None):
        self.config = config
        self.mines = generate_layout(config) if mines is None else np.asarray(mines, dtype=bool)
        if self.mines.shape != (config.height, config.width):
            raise ConfigurationError("mine mask shape does not match the grid")
        self.state_dim = 6 if config.local_mines else 2
        self._features: dict[tuple[int, int], np.ndarray] = {}

    def reset(self, rng=None, state: GridWorldState | None = None) -> GridWorldState:
        if state is not None:
            return GridWorldState(state[0], state[1], 0)
        return GridWorldState(*self.config.start, 0)

    def is_mine(self, x: int, y: int) -> bool:
        return bool(self.mines[y, x])

    def move(self, x: int, y: int, direction: int) -> tuple[int, int]:
        dx, dy = MOVES[direction]
        nx, ny = x + dx, y + dy
        if not (0 <= nx <= self.config.x_max and 0 <= ny <= self.config.y_max):
            return x, y
        return nx, ny

    def step(self, state: GridWorldState, action: int, rng: np.random.Generator):
        cfg = self.config
        if self.is_terminal(state):
            raise UsageError("step called on a terminal grid state")
        direction = int(action)
        if cfg.p_noise > 0 and rng.random() < cfg.p_noise:
            direction = int(rng.integers(4))
        nx, ny = self.move(state.x, state.y, direction)
        nxt = GridWorldState(nx, ny, state.steps + 1)
        if (nx, ny) == cfg.target:
            reward = cfg.r_target
        elif self.mines[ny, nx]:
            reward = cfg.r_mine
        else:
            reward = 0.0
        return nxt, reward, self.is_terminal(nxt)

    def is_terminal(self, state: GridWorldState) -> bool:
        return (state.x, state.y) == self.config.target or state.steps >= self.config.max_steps

    def is_success(self, state: GridWorldState) -> bool:
        return (state.x, state.y) == self.config.target

    def encode(self, state) -> np.ndarray:
        key = (state[0], state[1])
        feat = self._features.get(key)
        if feat is None:
            x, y = key
            cfg = self.config
            vals = [x / cfg.x_max, y / cfg.y_max if cfg.y_max else 0.0]
            if cfg.local_mines:
                for d in range(4):
                    nx, ny = self.move(x, y, d)
                    vals.append(1.0 if (nx, ny) != (x, y) and self.mines[ny, nx] else 0.0)
            feat = np.array(vals)
            self._features[key] = feat
        return feat

    def trace_columns(self, state) -> dict:
        return {"x": state.x, "y": state.y}

    def all_states(self) -> list[GridWorldState]:
        return [GridWorldState(x, y, 0) for y in range(self.config.height) for x in range(self.config.width)]


# --------------------------------------------------------------------------- gambler's ruin


@dataclass(frozen=True)
class GamblersRuinConfig:
    initial_fortune: int = 10
    k: int = 10
    horizon: int = 10  # trajectory truncation T_max
    gamma: float = 1.0
    fortune_cap: int = 100
    win_probability: float = 0.5

    def __post_init__(self):
        if self.initial_fortune < 0:
            raise ConfigurationError("initial fortune must be nonnegative")
        if self.k < 1:
            raise ConfigurationError("risk look-ahead k must be positive")
        if self.horizon < self.k:
            raise ConfigurationError("truncation horizon must be at least k")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]")
        if self.win_probability != 0.5:
            raise ConfigurationError("the gambler's ruin game is fair: win probability is 1/2")


class RuinState(NamedTuple):
    fortune: int
    steps: int = 0


def ruin_step(fortune: int, rng: np.random.Generator) -> tuple[int, int]:
    """One fair one-dollar bet; returns ``(next_fortune, reward)``."""
    if fortune < 1:
        raise UsageError("cannot gamble with no money")
    reward = 1 if rng.random() < 0.5 else -1
    return fortune + reward, reward


class GamblersRuin:
    """Markov reward process; the single 'action' is ignored."""

    n_actions = 1
    state_dim = 1

    def __init__(self, config: GamblersRuinConfig):
        self.config = config

    def reset(self, rng=None, state=None) -> RuinState:
        m = self.config.initial_fortune if state is None else int(state[0])
        return RuinState(m, 0)

    def step(self, state: RuinState, action, rng):
        if self.is_terminal(state):
            raise UsageError("step called on a terminal gambler's-ruin state")
        m, r = ruin_step(state.fortune, rng)
        nxt = RuinState(m, state.steps + 1)
        return nxt, float(r), self.is_terminal(nxt)

    def is_terminal(self, state: RuinState) -> bool:
        return state.fortune <= 0 or state.steps >= self.config.horizon

    def is_success(self, state: RuinState) -> bool:
        return state.fortune > 0

    def encode(self, state) -> np.ndarray:
        cap = self.config.fortune_cap
        return np.array([min(state[0], cap) / cap])

    def trace_columns(self, state) -> dict:
        return {"fortune": state.fortune}


@lru_cache(maxsize=None)
def _bankruptcy_table(k: int, m_max: int) -> tuple[tuple[float, ...], ...]:
    # rows: look-ahead 0..k, columns: fortune 0..m_max+k
    width = m_max + k + 2
    prev = [1.0] + [0.0] * (width - 1)
    rows = [tuple(prev)]
    for _ in range(k):
        cur = [1.0] + [0.5 * (prev[m - 1] + prev[m + 1]) for m in range(1, width - 1)] + [0.0]
        rows.append(tuple(cur))
        prev = cur
    return tuple(rows)


def bankruptcy_probability(m: int, k: int) -> float:
    """Exact probability of hitting $0 within ``k`` fair bets from fortune ``m``."""
    if m < 0 or k < 0:
        raise ConfigurationError("m and k must be nonnegative")
    if m == 0:
        return 1.0
    if m > k:
        return 0.0
    return _bankruptcy_table(k, m)[k][m]


def simulate_bankruptcy(m: int, k: int, n: int, rng: np.random.Generator) -> int:
    """Count of ``n`` simulated ``k``-step games from ``m`` that go bankrupt."""
    if m == 0:
        return n
    steps = np.where(rng.random((n, k)) < 0.5, 1, -1)
    paths = m + np.cumsum(steps, axis=1)
    return int(np.count_nonzero(paths.min(axis=1) <= 0))


def expected_discounted_winnings(m: int, horizon: int, gamma: float) -> float:
    """Dynamic-programming value of the discounted winnings over ``horizon`` bets."""
    width = m + horizon + 2
    value = np.zeros(width)
    for _ in range(horizon):
        nxt = np.zeros(width)
        for f in range(1, width - 1):
            nxt[f] = 0.5 * (1 + gamma * value[f + 1]) + 0.5 * (-1 + gamma * value[f - 1])
        value = nxt
    return float(value[m])


# --------------------------------------------------------------------------- tabular MDP


class TabularState(NamedTuple):
    s: int
    steps: int = 0


class TabularMDP:
    """Finite MDP with fixed episode length, one-hot features.

    ``P[s, a, s']`` are transition probabilities and ``R[s, a, s']`` the reward
    collected on that transition.
    """

    def __init__(self, P, R, start: int = 0, horizon: int = 2):
        self.P = np.asarray(P, dtype=np.float64)
        self.R = np.broadcast_to(np.asarray(R, dtype=np.float64), self.P.shape).copy()
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2]:
            raise ConfigurationError("P must have shape (S, A, S)")
        if not np.allclose(self.P.sum(axis=2), 1.0):
            raise ConfigurationError("transition rows must sum to one")
        self.n_states, self.n_actions = self.P.shape[:2]
        self.state_dim = self.n_states
        self.start = start
        self.horizon = horizon
        self._cdf = np.cumsum(self.P, axis=2)

    def reset(self, rng=None, state=None) -> TabularState:
        return TabularState(self.start if state is None else int(state[0]), 0)

    def step(self, state: TabularState, action: int, rng):
        if self.is_terminal(state):
            raise UsageError("step called on a terminal state")
        u = rng.random()
        nxt = int(np.searchsorted(self._cdf[state.s, action], u, side="right"))
        nxt = min(nxt, self.n_states - 1)
        new = TabularState(nxt, state.steps + 1)
        return new, float(self.R[state.s, action, nxt]), self.is_terminal(new)

    def is_terminal(self, state) -> bool:
        return state.steps >= self.horizon

    def is_success(self, state) -> bool:
        return True

    def encode(self, state) -> np.ndarray:
        v = np.zeros(self.n_states)
        v[state[0]] = 1.0
        return v

    def trace_columns(self, state) -> dict:
        return {"s": state.s}

    def all_states(self):
        return [TabularState(s, 0) for s in range(self.n_states)]


def single_state_mdp(reward_noise: float = 1.0, horizon: int = 20) -> TabularMDP:
    """One state, two actions paying +reward_noise and -reward_noise."""
    P = np.ones((1, 2, 1))
    R = np.array([[[reward_noise], [-reward_noise]]])
    return TabularMDP(P, R, start=0, horizon=horizon)
