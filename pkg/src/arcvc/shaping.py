"""Risk shaping: fit the bump 1/(1 + b (z - c)^2) to (B - J, risk) samples."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .environments import GamblersRuin, GamblersRuinConfig, bankruptcy_probability
from .risk import ShapedRisk
from .trajectory import UniformPolicy, monte_carlo_value, rollout


class DegenerateFitError(ValueError):
    """The samples cannot identify both fit parameters."""


@dataclass(frozen=True)
class ShapingSample:
    z: float
    y: float
    m: int


@dataclass(frozen=True)
class ShapedFit:
    b: float
    c: float
    rss: float
    n: int
    grid_rss: float = float("nan")
    iterations: int = 0


def bump(z, b: float, c: float):
    d = np.asarray(z, dtype=float) - c
    return 1.0 / (1.0 + b * d * d)


def collect_shaping_samples(config: GamblersRuinConfig, n_per_state: int, fortunes,
                            rng: np.random.Generator, n_value_episodes: int = 1000,
                            target: str = "exact") -> list[ShapingSample]:
    """Pair realisations of B - J(m) with the bankruptcy risk of fortune m.

    ``target="exact"`` uses the dynamic-programming probability; ``"empirical"``
    uses the bankruptcy frequency among the same ``n_per_state`` games.
    """
    if n_per_state < 1:
        raise ValueError("n_per_state must be >= 1")
    samples = []
    policy = UniformPolicy(1)
    for m in fortunes:
        m = int(m)
        if m <= 0:
            continue
        env = GamblersRuin(GamblersRuinConfig(
            initial_fortune=m, k=config.k, horizon=config.horizon, gamma=config.gamma,
            fortune_cap=config.fortune_cap))
        J, _ = monte_carlo_value(env, policy, None, n_value_episodes, config.gamma, None, rng)
        Bs, ruined = [], 0
        for _ in range(n_per_state):
            ep = rollout(env, policy, rng, gamma=config.gamma)
            Bs.append(float(ep.returns[0]))
            # the game only stops early at $0, so ruin within k bets is a short broke episode
            if len(ep) <= config.k and m + ep.rewards.sum() <= 0:
                ruined += 1
        y = bankruptcy_probability(m, config.k) if target == "exact" else ruined / n_per_state
        samples.extend(ShapingSample(B - J, y, m) for B in Bs)
    return samples


def _rss(z, y, log_b, c) -> float:
    r = y - bump(z, np.exp(log_b), c)
    return float(r @ r)


def fit_shaped_model(samples=None, z=None, y=None, grid_size: int = 61,
                     max_iter: int = 500, tol: float = 1e-15) -> ShapedFit:
    """Least-squares fit: coarse grid over (log b, c), then Levenberg-Marquardt.

    Optimises ``log b`` so that b stays positive.  Accepts either a list of
    ``ShapingSample`` or raw ``z``/``y`` arrays.
    """
    if samples is not None:
        z = np.array([s.z for s in samples], dtype=float)
        y = np.array([s.y for s in samples], dtype=float)
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if z.size < 3:
        raise DegenerateFitError("need at least three samples")
    if np.unique(z).size < 2:
        raise DegenerateFitError("all samples share the same z; (b, c) is not identifiable")

    log_bs = np.linspace(np.log(1e-3), np.log(1e3), grid_size)
    cs = np.linspace(z.min(), z.max(), grid_size)
    D = z[None, None, :] - cs[None, :, None]
    pred = 1.0 / (1.0 + np.exp(log_bs)[:, None, None] * D * D)
    rss_grid = ((y[None, None, :] - pred) ** 2).sum(axis=2)
    i, j = np.unravel_index(np.argmin(rss_grid), rss_grid.shape)
    p = np.array([log_bs[i], cs[j]])
    grid_best = float(rss_grid[i, j])

    rss = _rss(z, y, *p)
    mu = 1e-3
    it = 0
    for it in range(1, max_iter + 1):
        b = np.exp(p[0])
        d = z - p[1]
        m = 1.0 / (1.0 + b * d * d)
        r = y - m
        # residual Jacobian: dr/dlogb = b d^2 m^2, dr/dc = -2 b d m^2
        Jac = np.column_stack([b * d * d * m * m, -2.0 * b * d * m * m])
        A = Jac.T @ Jac
        grad = Jac.T @ r
        improved = False
        while mu < 1e12:
            step = np.linalg.solve(A + mu * np.diag(np.diag(A) + 1e-12), -grad)
            cand = p + step
            new_rss = _rss(z, y, *cand)
            if new_rss < rss:
                improved = True
                break
            mu *= 10.0
        if not improved:
            break
        rel = (rss - new_rss) / max(rss, 1e-300)
        p, rss = cand, new_rss
        mu = max(mu / 10.0, 1e-12)
        if rel < tol or rss == 0.0:
            break
    return ShapedFit(float(np.exp(p[0])), float(p[1]), rss, int(z.size), grid_best, it)


def shaped_risk_from_fit(fit: ShapedFit) -> ShapedRisk:
    return ShapedRisk(fit.b, fit.c)


def synthetic_samples(b: float, c: float, z=None, noise: float = 0.0,
                      rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Points on a planted bump, optionally with Gaussian noise on y."""
    z = np.linspace(c - 4.0, c + 4.0, 81) if z is None else np.asarray(z, dtype=float)
    y = bump(z, b, c)
    if noise:
        rng = np.random.default_rng(0) if rng is None else rng
        y = y + rng.normal(0.0, noise, size=z.shape)
    return z, y


def write_samples_csv(path, samples) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# schema: shaping-samples/v1\n")
        w = csv.writer(fh)
        w.writerow(["z", "y", "m"])
        for s in samples:
            w.writerow([repr(float(s.z)), repr(float(s.y)), int(s.m)])


def write_fit_csv(path, fit: ShapedFit) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# schema: shaping-fit/v1\n")
        w = csv.writer(fh)
        w.writerow(["b", "c", "rss", "n"])
        w.writerow([repr(fit.b), repr(fit.c), repr(fit.rss), fit.n])
