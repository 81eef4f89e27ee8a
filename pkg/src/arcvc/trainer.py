"""Actor / risk-critic / value-critic training under a soft risk constraint.

The actor maximises a penalised objective built from the reward-to-go ``B``,
a reference ``nu(x)`` and a risk function ``f``::

    risk_network:  eta = J - lam * phi(R - D),        R = E[f(B - nu)]
    sample_based:  eta = E[B - lam * phi(f(B - nu) - D)]

with ``phi = g`` (squared hinge) for the state-value, global-mean and constant
references and ``phi(a) = a * g(a)`` for the bootstrapped reference.  The
policy-gradient estimate is linear in the per-step scores, so it is assembled
as per-segment weights and pushed through a single batched backward pass.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .metrics import RunRecord
from .nn import MLP, AdamState, ConfigurationError, TrainingError, adam_step, save_params
from .risk import RiskSpec
from .trajectory import EpisodeBatch, ReplayBuffer, rollout

REFERENCE_KINDS = ("state_value", "bootstrapped", "global_mean", "constant")
PENALTY_KINDS = ("risk_network", "sample_based")


@dataclass(frozen=True)
class ReferenceMethod:
    kind: str = "state_value"
    nu0: float = 0.0
    step_size: float = 1.0
    decay: float = 1.0  # alpha_t = step_size / t**decay; 0 keeps it constant
    target: str = "return"  # global mean tracks per-step returns or one-step rewards

    def __post_init__(self):
        if self.kind not in REFERENCE_KINDS:
            raise ConfigurationError(f"unknown reference method {self.kind!r}")
        if not 0 < self.step_size <= 1:
            raise ConfigurationError("global-mean step size must lie in (0, 1]")
        if self.decay and not 0.5 <= self.decay <= 1.0:
            raise ConfigurationError("step decay exponent must be 0 or within [0.5, 1]")
        if self.target not in ("return", "reward"):
            raise ConfigurationError(f"unknown global-mean target {self.target!r}")

    @property
    def uses_value_network(self) -> bool:
        return self.kind in ("state_value", "bootstrapped")


class GlobalMean:
    """Stochastic-approximation estimate of a stationary mean."""

    def __init__(self, step_size: float = 1.0, decay: float = 1.0, value: float = 0.0):
        self.step_size = step_size
        self.decay = decay
        self.value = value
        self.t = 0

    def alpha(self) -> float:
        if not self.decay:
            return self.step_size
        return min(1.0, self.step_size / self.t ** self.decay)

    def observe(self, sample: float) -> float:
        self.t += 1
        self.value += self.alpha() * (sample - self.value)
        return self.value


@dataclass(frozen=True)
class ArcvcConfig:
    risk: RiskSpec
    reference: ReferenceMethod = ReferenceMethod()
    penalty: str = "risk_network"
    gamma: float = 0.9
    tau: int | None = None
    batch_size: int = 100
    episodes: int = 1000
    episodes_per_update: int = 1
    lr_actor: float = 1e-3
    lr_value: float = 1e-3
    lr_risk: float = 1e-3
    hidden: int = 64
    seed: int = 0
    grad_clip: float = 10.0
    critic_steps: int = 1
    value_mode: str = "mc"
    target_refresh: int = 100
    grad_j: str = "likelihood"
    segments: str = "all"
    replay_capacity: int = 10_000
    max_steps: int | None = None
    checkpoint_every: int = 0
    updates: str = "minibatch"  # "minibatch": ceil(T / batch_size) steps per network per episode

    def __post_init__(self):
        if self.penalty not in PENALTY_KINDS:
            raise ConfigurationError(f"unknown penalty method {self.penalty!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]")
        if self.batch_size < 1 or self.episodes_per_update < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if self.tau is not None and self.tau < 0:
            raise ConfigurationError("tau must be nonnegative")
        if self.value_mode not in ("mc", "td"):
            raise ConfigurationError(f"unknown value mode {self.value_mode!r}")
        if self.grad_j not in ("likelihood", "critic"):
            raise ConfigurationError(f"unknown grad_j mode {self.grad_j!r}")
        if self.segments not in ("all", "start"):
            raise ConfigurationError(f"unknown segment mode {self.segments!r}")
        if self.updates not in ("minibatch", "episode"):
            raise ConfigurationError(f"unknown update schedule {self.updates!r}")

    def with_(self, **kw) -> ArcvcConfig:
        return replace(self, **kw)


class ArcvcAgent:
    """Holds the actor and whichever critics the configuration calls for."""

    def __init__(self, config: ArcvcConfig, state_dim: int, n_actions: int):
        self.config = config
        init_actor, init_value, init_risk = np.random.SeedSequence([config.seed, 1]).spawn(3)
        # hidden=0 drops the hidden layers (linear-softmax actor, linear critics)
        h = config.hidden
        actor_sizes = [state_dim, h, n_actions] if h else [state_dim, n_actions]
        critic_sizes = [state_dim, h, h, 1] if h else [state_dim, 1]
        self.actor = MLP.initialized(actor_sizes, "softmax", np.random.default_rng(init_actor))
        self.actor_opt = AdamState(self.actor.params.size, lr=config.lr_actor)
        self.value = self.value_opt = self.value_target = None
        self.replay = None
        if config.reference.uses_value_network:
            self.value = MLP.initialized(critic_sizes, "linear", np.random.default_rng(init_value))
            self.value_opt = AdamState(self.value.params.size, lr=config.lr_value)
            self.value_target = self.value.copy()
            self.replay = ReplayBuffer(config.replay_capacity, state_dim)
        self.risk = self.risk_opt = None
        if config.penalty == "risk_network":
            self.risk = MLP.initialized(critic_sizes, "linear", np.random.default_rng(init_risk))
            self.risk_opt = AdamState(self.risk.params.size, lr=config.lr_risk)
        ref = config.reference
        self.global_mean = GlobalMean(ref.step_size, ref.decay) if ref.kind == "global_mean" else None
        self.value_updates = 0
        self.low_prob_count = 0

    def networks(self) -> dict[str, MLP]:
        nets = {"actor": self.actor}
        if self.value is not None:
            nets["value"] = self.value
        if self.risk is not None:
            nets["risk"] = self.risk
        return nets

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(n.params)) for n in self.networks().values())


# --------------------------------------------------------------------------- building blocks


def _f_vec(f, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return (np.array([f.value(v) for v in z.tolist()]),
            np.array([f.derivative(v) for v in z.tolist()]))


def _penalty_fns(spec: RiskSpec, bootstrapped: bool):
    g = spec.g
    if not bootstrapped:
        return g.value, g.derivative
    return (lambda a: a * g.value(a)), (lambda a: g.value(a) + a * g.derivative(a))


def score_function(agent: ArcvcAgent, features, action: int) -> np.ndarray:
    """Gradient of log mu(action | x) w.r.t. the actor parameters."""
    p = agent.actor.forward(features)
    if p[action] < 1e-12:
        agent.low_prob_count += 1
    cot = -p
    cot[action] += 1.0
    return agent.actor.backward(features, cot, wrt="logits")


def reference_value(agent: ArcvcAgent, features) -> np.ndarray:
    """nu(x) for a batch of feature rows (or a single row)."""
    X = np.atleast_2d(features)
    kind = agent.config.reference.kind
    if kind in ("state_value", "bootstrapped"):
        if agent.value is None:
            raise ConfigurationError("value critic is not initialised")
        out = agent.value.forward(X)[:, 0]
    elif kind == "global_mean":
        out = np.full(X.shape[0], agent.global_mean.value)
    else:
        out = np.full(X.shape[0], agent.config.reference.nu0)
    return out if np.ndim(features) > 1 else out[:1]


def risk_estimate(agent: ArcvcAgent, features) -> np.ndarray:
    if agent.risk is None:
        raise ConfigurationError("risk critic is not initialised")
    return agent.risk.forward(np.atleast_2d(features))[:, 0]


def _segments(ep: EpisodeBatch, tau: int | None, mode: str) -> list[tuple[int, int]]:
    T = len(ep)
    width = T if tau is None else tau + 1
    starts = range(T) if mode == "all" else range(min(1, T))
    return [(t, min(t + width, T)) for t in starts]


def policy_gradient_estimate(episodes: list[EpisodeBatch], agent: ArcvcAgent,
                             config: ArcvcConfig | None = None,
                             segments: str | None = None, subset=None) -> np.ndarray:
    """Ascent direction for the penalised objective, averaged over segments.

    Each segment is a window of one episode starting at ``x_t`` whose return
    ``B_t`` is already stored on the episode.  ``segments="start"`` keeps only
    the window from the initial state.  ``subset`` restricts the average to the
    given segment indices; scores are then taken under the current actor.
    """
    config = agent.config if config is None else config
    mode = config.segments if segments is None else segments
    spec = config.risk
    lam = spec.lam
    ref_kind = config.reference.kind

    seg_B, seg_X, seg_keys, spans = [], [], [], []
    offset = 0
    for ep in episodes:
        for t, e in _segments(ep, config.tau, mode):
            seg_B.append(ep.returns[t])
            seg_X.append(ep.features[t])
            seg_keys.append(tuple(ep.states[t][:-1]))
            spans.append((offset + t, offset + e))
        offset += len(ep)
    if subset is not None:
        subset = np.asarray(subset, dtype=int)
        seg_B = [seg_B[i] for i in subset]
        seg_X = [seg_X[i] for i in subset]
        seg_keys = [seg_keys[i] for i in subset]
        spans = [spans[i] for i in subset]
    N = len(seg_B)
    if N == 0:
        raise ValueError("no segments to estimate a gradient from")
    B = np.array(seg_B)
    X = np.array(seg_X)

    if lam == 0.0:
        w = B.copy()
        corr = np.zeros(N)
    else:
        nu = reference_value(agent, X)
        fz, fpz = _f_vec(spec.f, B - nu)
        phi, dphi = _penalty_fns(spec, ref_kind == "bootstrapped")
        if config.penalty == "risk_network":
            arg = risk_estimate(agent, X) - spec.D
            slope = np.array([dphi(a) for a in arg.tolist()])
            w = B - lam * slope * fz
        else:
            arg = fz - spec.D
            w = B - lam * np.array([phi(a) for a in arg.tolist()])
            slope = np.array([dphi(a) for a in arg.tolist()])
        # d/dtheta of -lam*phi(.) through nu(x): +lam * phi' * f'(B - nu) * grad nu
        corr = lam * slope * fpz
        if ref_kind != "state_value":
            corr = np.zeros(N)

    all_X = np.concatenate([ep.features for ep in episodes])
    if subset is None:
        all_scores = np.concatenate([ep.logit_scores for ep in episodes])
    else:
        all_scores = -agent.actor.forward(all_X)
        all_scores[np.arange(len(all_X)), np.concatenate([ep.actions for ep in episodes])] += 1.0
    coef = np.zeros(all_X.shape[0])

    if np.any(corr != 0.0) and config.grad_j == "likelihood":
        # leave-one-out estimate of grad J(x) from other segments sharing the start state
        groups: dict = {}
        for i, k in enumerate(seg_keys):
            groups.setdefault(k, []).append(i)
        for idx in groups.values():
            if len(idx) < 2:
                continue
            idx = np.array(idx)
            C = corr[idx].sum()
            w[idx] += B[idx] * (C - corr[idx]) / (len(idx) - 1)
    elif np.any(corr != 0.0):
        coef += _critic_grad_j_coefficients(episodes, agent, config, spans, corr, all_X)

    for wi, (s, e) in zip(w, spans):
        coef[s:e] += wi
    cot = coef[:, None] * all_scores
    grad = agent.actor.backward(all_X, cot, wrt="logits") / N
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite policy-gradient estimate")
    return grad


def _critic_grad_j_coefficients(episodes, agent, config, spans, corr, all_X) -> np.ndarray:
    """grad J(x_t) ~ sum_s gamma^(s-t) delta_s score_s with TD errors from the value critic."""
    gamma = config.gamma
    rewards = np.concatenate([ep.rewards for ep in episodes])
    v = agent.value.forward(all_X)[:, 0]
    v_next = agent.value.forward(np.concatenate([ep.next_features for ep in episodes]))[:, 0]
    term = np.concatenate([ep.terminals for ep in episodes])
    delta = rewards + gamma * np.where(term, 0.0, v_next) - v
    coef = np.zeros(all_X.shape[0])
    for c, (s, e) in zip(corr, spans):
        if c:
            coef[s:e] += c * delta[s:e] * gamma ** np.arange(e - s)
    return coef


def _clip(grad: np.ndarray, limit: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if limit and norm > limit:
        return grad * (limit / norm)
    return grad


def bootstrapped_targets(agent: ArcvcAgent, X: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Regression targets for the bootstrapped reference (per-sample objective)."""
    spec = agent.config.risk
    nu = agent.value.forward(X)[:, 0]
    fz, _ = _f_vec(spec.f, B - nu)
    if agent.risk is not None:
        pen = np.array([spec.g.value(a) for a in (risk_estimate(agent, X) - spec.D).tolist()])
    else:
        pen = np.array([spec.g.value(a) for a in (fz - spec.D).tolist()])
    return B - spec.lam * (fz - spec.D) * pen


def update_value_critic(agent: ArcvcAgent, sample: dict, gamma: float) -> float:
    """One optimizer step on the value critic; returns the pre-step mean loss."""
    cfg = agent.config
    X = sample["x"]
    if len(X) == 0:
        raise ValueError("empty replay sample")
    pred = agent.value.forward(X)[:, 0]
    if cfg.value_mode == "td":
        nxt = agent.value_target.forward(sample["x_next"])[:, 0]
        target = sample["r"] + gamma * np.where(sample["terminal"], 0.0, nxt)
    elif cfg.reference.kind == "bootstrapped":
        target = bootstrapped_targets(agent, X, sample["B"])
    else:
        target = sample["B"]
    err = pred - target
    loss = float(np.mean(err ** 2))
    grad = agent.value.backward(X, (2.0 * err / len(err))[:, None])
    agent.value.params = adam_step(agent.value_opt, agent.value.params, grad)
    agent.value_updates += 1
    if cfg.value_mode == "td" and agent.value_updates % cfg.target_refresh == 0:
        agent.value_target = agent.value.copy()
    return loss


def update_risk_critic(agent: ArcvcAgent, ep: EpisodeBatch, spec: RiskSpec | None = None,
                       reference: np.ndarray | None = None, idx=None) -> float:
    """Regress R_hat(x_t) onto rho_t = f(B_t - nu(x_t)); returns the pre-step mean loss.

    ``idx`` selects a minibatch of the episode's steps.
    """
    if agent.risk is None:
        raise ConfigurationError("risk critic update requested with sample-based penalty")
    spec = agent.config.risk if spec is None else spec
    idx = slice(None) if idx is None else np.asarray(idx, dtype=int)
    X = ep.features[idx]
    nu = reference_value(agent, X) if reference is None else np.asarray(reference)[idx]
    rho, _ = _f_vec(spec.f, ep.returns[idx] - nu)
    pred = agent.risk.forward(X)[:, 0]
    err = pred - rho
    loss = float(np.mean(err ** 2))
    grad = agent.risk.backward(X, (2.0 * err / len(err))[:, None])
    agent.risk.params = adam_step(agent.risk_opt, agent.risk.params, grad)
    return loss


@dataclass
class TrainResult:
    records: list[RunRecord]
    agent: ArcvcAgent
    diverged: bool = False
    error: str = ""
    checkpoints: list[Path] = field(default_factory=list)


def save_checkpoint(agent: ArcvcAgent, directory, episode: int) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, net in agent.networks().items():
        p = directory / f"{name}_ep{episode:06d}.params"
        save_params(net, p)
        paths.append(p)
    return paths


def _n_minibatches(n: int, config: ArcvcConfig) -> int:
    return 1 if config.updates == "episode" else max(1, -(-n // config.batch_size))


def _minibatches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def _actor_updates(agent: ArcvcAgent, episodes: list[EpisodeBatch], config: ArcvcConfig,
                   rng: np.random.Generator) -> None:
    if config.updates == "episode":
        grad = _clip(policy_gradient_estimate(episodes, agent, config), config.grad_clip)
        agent.actor.params = adam_step(agent.actor_opt, agent.actor.params, -grad)
        return
    n_seg = sum(len(_segments(ep, config.tau, config.segments)) for ep in episodes)
    for idx in _minibatches(n_seg, config.batch_size, rng):
        grad = _clip(policy_gradient_estimate(episodes, agent, config, subset=np.sort(idx)),
                     config.grad_clip)
        agent.actor.params = adam_step(agent.actor_opt, agent.actor.params, -grad)


def train(config: ArcvcConfig, env, checkpoint_dir=None, trace_callback=None) -> TrainResult:
    """Episodic training loop; deterministic for a given config and environment."""
    agent = ArcvcAgent(config, env.state_dim, env.n_actions)
    rollout_ss, replay_ss = np.random.SeedSequence([config.seed, 2]).spawn(2)
    rng = np.random.default_rng(rollout_ss)
    replay_rng = np.random.default_rng(replay_ss)
    spec = config.risk
    records: list[RunRecord] = []
    pending: list[EpisodeBatch] = []
    result = TrainResult(records, agent)

    for i in range(config.episodes):
        t0 = time.perf_counter()
        try:
            ep = rollout(env, agent.actor.forward, rng, max_steps=config.max_steps,
                         gamma=config.gamma, tau=config.tau)
            agent.low_prob_count += ep.low_prob_count
            nu0 = float(reference_value(agent, ep.features[:1])[0])
            B0 = float(ep.returns[0])
            risk0 = spec.f.value(B0 - nu0)
            if agent.replay is not None:
                agent.replay.push_episode(ep)

            pending.append(ep)
            if len(pending) >= config.episodes_per_update:
                _actor_updates(agent, pending, config, replay_rng)
                pending = []
            n_mb = _n_minibatches(len(ep), config)
            for _ in range(config.critic_steps):
                if agent.value is not None:
                    for _ in range(n_mb):
                        update_value_critic(agent, agent.replay.sample(config.batch_size, replay_rng),
                                            config.gamma)
                if agent.risk is not None:
                    if config.updates == "episode":
                        update_risk_critic(agent, ep)
                    else:
                        for idx in _minibatches(len(ep), config.batch_size, replay_rng):
                            update_risk_critic(agent, ep, idx=idx)
            if agent.global_mean is not None:
                samples = ep.returns if config.reference.target == "return" else ep.rewards
                for v in samples.tolist():
                    agent.global_mean.observe(v)
            if not agent.all_finite():
                raise TrainingError("non-finite network parameters")
        except TrainingError as exc:
            result.diverged = True
            result.error = str(exc)
            break
        if trace_callback is not None:
            trace_callback(i, ep)
        records.append(RunRecord(
            episode=i,
            total_reward=float(ep.rewards.sum()),
            B0=B0,
            violation=bool(risk0 > spec.D),
            success=ep.success,
            sample_risk=float(risk0),
            reference=nu0,
            wall_ms=(time.perf_counter() - t0) * 1e3,
        ))
        if checkpoint_dir is not None and config.checkpoint_every and (i + 1) % config.checkpoint_every == 0:
            result.checkpoints += save_checkpoint(agent, checkpoint_dir, i + 1)
    if checkpoint_dir is not None and not result.diverged:
        result.checkpoints += save_checkpoint(agent, checkpoint_dir, len(records))
    if not all(math.isfinite(v) for r in records for v in (r.B0, r.sample_risk, r.reference)):
        result.diverged = True
    return result
