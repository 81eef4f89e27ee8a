import numpy as np
import pytest

from arcvc.environments import GridWorld, GridWorldConfig, single_state_mdp
from arcvc.metrics import success_rate
from arcvc.nn import AdamState, ConfigurationError, adam_step
from arcvc.risk import ConstantRisk, OneSidedAbs, OneSidedSqrt, OneSidedVariance, RiskSpec
from arcvc.trainer import (PENALTY_KINDS, REFERENCE_KINDS, ArcvcAgent, ArcvcConfig, GlobalMean,
                           ReferenceMethod, bootstrapped_targets, policy_gradient_estimate,
                           score_function, train, update_risk_critic, update_value_critic)
from arcvc.trajectory import rollout
from gradient_check import GradientCheck
from oracles import toy_mdp


def spec(lam=10.0, f=None, D=0.1):
    return RiskSpec(OneSidedAbs() if f is None else f, D, lam)


@pytest.fixture(scope="module")
def check():
    return GradientCheck(20_000)


@pytest.mark.parametrize("penalty", PENALTY_KINDS)
@pytest.mark.parametrize("reference", REFERENCE_KINDS)
def test_gradient_estimate_is_unbiased(check, penalty, reference):
    for lam in (0.0, 10.0):
        z = check.z_scores(lam, penalty, reference)
        assert z.max() < 3.5, (lam, z)


@pytest.mark.parametrize("penalty", PENALTY_KINDS)
def test_dropping_the_reference_correction_is_detected(check, penalty):
    # a frozen-reference gradient differs from the true one when nu = J(theta)
    assert check.z_scores(10.0, penalty, "state_value", frozen=True).max() > 10


def test_expected_score_is_zero():
    cfg = ArcvcConfig(risk=spec(), hidden=8, seed=1)
    agent = ArcvcAgent(cfg, 6, 4)
    x = np.random.default_rng(0).normal(size=6)
    p = agent.actor(x)
    expected = sum(p[a] * score_function(agent, x, a) for a in range(4))
    assert np.allclose(expected, 0.0, atol=1e-12)


def test_agent_allocates_only_the_networks_it_needs():
    a = ArcvcAgent(ArcvcConfig(risk=spec(), penalty="sample_based",
                               reference=ReferenceMethod("global_mean")), 6, 4)
    assert set(a.networks()) == {"actor"} and a.replay is None and a.global_mean is not None
    b = ArcvcAgent(ArcvcConfig(risk=spec()), 6, 4)
    assert set(b.networks()) == {"actor", "value", "risk"}
    assert b.actor.sizes == [6, 64, 4] and b.value.sizes == [6, 64, 64, 1]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ArcvcConfig(risk=spec(), penalty="magic")
    with pytest.raises(ConfigurationError):
        ArcvcConfig(risk=spec(), gamma=1.2)
    with pytest.raises(ConfigurationError):
        ReferenceMethod("median")
    with pytest.raises(ConfigurationError):
        ReferenceMethod("global_mean", decay=0.3)


def test_global_mean_step_schedule():
    gm = GlobalMean(step_size=1.0, decay=1.0)
    for v in (1.0, 2.0, 3.0, 6.0):
        gm.observe(v)
    # alpha_t = 1/t gives the running mean
    assert gm.value == pytest.approx(3.0)
    gm = GlobalMean(step_size=1.0, decay=0.5)
    alphas = []
    for _ in range(50):
        gm.observe(0.0)
        alphas.append(gm.alpha())
    assert all(0 < a <= 1 for a in alphas)
    assert all(a >= b for a, b in zip(alphas, alphas[1:]))
    assert alphas[-1] == pytest.approx(50 ** -0.5)


def test_global_mean_converges_to_stationary_mean():
    gm = GlobalMean()
    rng = np.random.default_rng(0)
    for v in rng.normal(1.5, 1.0, size=20000):
        gm.observe(v)
    assert gm.value == pytest.approx(1.5, abs=0.03)


def test_bootstrapped_targets_reduce_to_returns_when_risk_sits_at_the_limit():
    # f(B - nu) = D identically, so the risk term vanishes and the target is B itself
    D = 0.25
    cfg = ArcvcConfig(risk=RiskSpec(ConstantRisk(D), D, 10.0), penalty="sample_based",
                      reference=ReferenceMethod("bootstrapped"), hidden=4)
    agent = ArcvcAgent(cfg, 3, 2)
    X = np.random.default_rng(0).normal(size=(7, 3))
    B = np.random.default_rng(1).normal(size=7)
    assert np.array_equal(bootstrapped_targets(agent, X, B), B)


def test_bootstrapped_value_critic_learns_J_in_degenerate_case():
    mdp = single_state_mdp(1.0, horizon=4)
    D = 0.3
    cfg = ArcvcConfig(risk=RiskSpec(ConstantRisk(D), D, 10.0), penalty="sample_based",
                      reference=ReferenceMethod("bootstrapped"), hidden=0, gamma=0.9, lr_value=0.01,
                      lr_actor=0.0, batch_size=64, episodes=1000, seed=0)
    res = train(cfg, mdp)
    # the single feature is constant, so the critic settles on the mean of E[B_t] over
    # the four steps; with the risk term gone that is the plain return average
    p = res.agent.actor(np.ones(1))
    drift = p[0] - p[1]
    target = np.mean([drift * (1 - 0.9 ** (4 - t)) / (1 - 0.9) for t in range(4)])
    nu = res.agent.value(np.ones(1))[0]
    assert abs(nu - target) < 0.1


def test_value_and_risk_critic_updates_reduce_loss():
    env = GridWorld(GridWorldConfig(layout_seed=1))
    cfg = ArcvcConfig(risk=spec(), seed=0, lr_value=0.01, lr_risk=0.01)
    agent = ArcvcAgent(cfg, env.state_dim, 4)
    rng = np.random.default_rng(0)
    ep = rollout(env, agent.actor.forward, rng, gamma=0.9)
    agent.replay.push_episode(ep)
    batch = {"x": ep.features, "B": ep.returns, "r": ep.rewards, "x_next": ep.next_features,
             "terminal": ep.terminals}
    first = update_value_critic(agent, batch, 0.9)
    for _ in range(30):
        last = update_value_critic(agent, batch, 0.9)
    assert last < first
    first = update_risk_critic(agent, ep)
    for _ in range(30):
        last = update_risk_critic(agent, ep)
    assert last < first


def test_td_mode_refreshes_target_network():
    env = GridWorld(GridWorldConfig(layout_seed=1))
    cfg = ArcvcConfig(risk=spec(), value_mode="td", target_refresh=2)
    agent = ArcvcAgent(cfg, env.state_dim, 4)
    ep = rollout(env, agent.actor.forward, np.random.default_rng(0), gamma=0.9)
    batch = {"x": ep.features, "B": ep.returns, "r": ep.rewards, "x_next": ep.next_features,
             "terminal": ep.terminals}
    before = agent.value_target.params.copy()
    update_value_critic(agent, batch, 0.9)
    assert np.array_equal(agent.value_target.params, before)
    update_value_critic(agent, batch, 0.9)
    assert np.array_equal(agent.value_target.params, agent.value.params)


def test_risk_critic_absent_in_sample_mode():
    cfg = ArcvcConfig(risk=spec(), penalty="sample_based")
    agent = ArcvcAgent(cfg, 6, 4)
    ep = rollout(GridWorld(GridWorldConfig()), agent.actor.forward, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        update_risk_critic(agent, ep)


def _reference_reinforce(config: ArcvcConfig, env) -> list[np.ndarray]:
    """Plain REINFORCE: grad = mean_t B_t * sum_{s >= t} grad log mu(a_s | x_s)."""
    agent = ArcvcAgent(config, env.state_dim, env.n_actions)
    actor = agent.actor
    opt = AdamState(actor.params.size, lr=config.lr_actor)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]).spawn(2)[0])
    history = []
    for _ in range(config.episodes):
        ep = rollout(env, actor.forward, rng, gamma=config.gamma)
        grad = np.zeros_like(actor.params)
        T = len(ep)
        for t in range(T):
            for s in range(t, T):
                p = actor(ep.features[s])
                cot = -p
                cot[ep.actions[s]] += 1.0
                grad += ep.returns[t] * actor.backward(ep.features[s], cot, wrt="logits")
        grad /= T
        norm = np.linalg.norm(grad)
        if norm > config.grad_clip:
            grad *= config.grad_clip / norm
        actor.params = adam_step(opt, actor.params, -grad)
        history.append(actor.params.copy())
    return history


def test_zero_penalty_matches_reference_reinforce():
    env = GridWorld(GridWorldConfig(width=5, height=5, layout_seed=2, max_steps=40))
    cfg = ArcvcConfig(risk=spec(lam=0.0), reference=ReferenceMethod("constant"), hidden=8,
                      episodes=15, seed=4, updates="episode", lr_actor=0.01)
    ours = train(cfg, env).agent.actor.params
    ref = _reference_reinforce(cfg, env)[-1]
    assert np.allclose(ours, ref, rtol=0, atol=1e-12)


def test_training_is_deterministic():
    env = GridWorld(GridWorldConfig(width=8, height=8, layout_seed=3, max_steps=100))
    cfg = ArcvcConfig(risk=spec(f=OneSidedSqrt(), D=0.3), episodes=20, seed=9, hidden=16)
    a, b = train(cfg, env), train(cfg, env)
    strip = lambda recs: [(r.episode, r.total_reward, r.B0, r.violation, r.success, r.sample_risk,
                           r.reference) for r in recs]
    assert strip(a.records) == strip(b.records)
    assert np.array_equal(a.agent.actor.params, b.agent.actor.params)


def test_zero_penalty_reaches_target_on_mine_free_grid():
    env = GridWorld(GridWorldConfig(width=5, height=5, p_mine=0.0))
    cfg = ArcvcConfig(risk=spec(lam=0.0), episodes=200, seed=0)
    res = train(cfg, env)
    assert not res.diverged
    assert success_rate(res.records, 100) >= 0.9


def test_records_and_checkpoints(tmp_path):
    env = GridWorld(GridWorldConfig(width=6, height=6, max_steps=50))
    cfg = ArcvcConfig(risk=spec(f=OneSidedVariance(), D=0.01), episodes=6, checkpoint_every=3,
                      penalty="sample_based")
    res = train(cfg, env, checkpoint_dir=tmp_path)
    assert len(res.records) == 6
    for r in res.records:
        assert r.violation == (r.sample_risk > 0.01)
        assert np.isfinite([r.B0, r.sample_risk, r.reference]).all()
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["actor_ep000003.params", "actor_ep000006.params",
                     "value_ep000003.params", "value_ep000006.params"]


def test_divergence_is_reported_not_raised():
    env = GridWorld(GridWorldConfig(width=5, height=5, max_steps=30))
    cfg = ArcvcConfig(risk=spec(), episodes=5, seed=0)

    calls = []

    def poison(i, ep):
        calls.append(i)
        if i == 1:
            res_agent.actor.params[0] = np.nan

    import arcvc.trainer as trainer_mod
    original = trainer_mod.ArcvcAgent

    class Capturing(original):
        def __init__(self, *a, **k):
            global res_agent
            super().__init__(*a, **k)
            res_agent = self

    global res_agent
    trainer_mod.ArcvcAgent = Capturing
    try:
        res = train(cfg, env, trace_callback=poison)
    finally:
        trainer_mod.ArcvcAgent = original
    assert res.diverged and res.error
    assert len(res.records) == 2


def test_minibatch_subset_estimate_matches_full_when_all_segments_used():
    mdp = toy_mdp()
    cfg = ArcvcConfig(risk=spec(), hidden=0, gamma=0.9, tau=2, seed=1)
    agent = ArcvcAgent(cfg, 2, 2)
    rng = np.random.default_rng(0)
    eps = [rollout(mdp, agent.actor.forward, rng, gamma=0.9, tau=2) for _ in range(5)]
    full = policy_gradient_estimate(eps, agent, cfg)
    n = sum(len(e) for e in eps)
    assert np.allclose(policy_gradient_estimate(eps, agent, cfg, subset=np.arange(n)), full)
