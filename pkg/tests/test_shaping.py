import numpy as np
import pytest

from arcvc.environments import GamblersRuinConfig, bankruptcy_probability
from arcvc.risk import ShapedRisk
from arcvc.shaping import (DegenerateFitError, ShapedFit, ShapingSample, bump,
                           collect_shaping_samples, fit_shaped_model, shaped_risk_from_fit,
                           synthetic_samples, write_fit_csv, write_samples_csv)


def test_bump_peak_and_decay():
    assert bump(-1.0, 2.0, -1.0) == 1.0
    assert bump(0.0, 2.0, -1.0) == pytest.approx(1 / 3)


def test_noiseless_recovery():
    z, y = synthetic_samples(2.0, -1.0)
    fit = fit_shaped_model(z=z, y=y)
    assert fit.b == pytest.approx(2.0, abs=1e-6) and fit.c == pytest.approx(-1.0, abs=1e-6)
    assert fit.rss < 1e-20 and fit.n == 81


@pytest.mark.parametrize("b,c", [(0.05, 3.0), (30.0, 0.5), (1.0, -4.0)])
def test_recovery_across_parameter_range(b, c):
    z, y = synthetic_samples(b, c, z=np.linspace(c - 6, c + 6, 121))
    fit = fit_shaped_model(z=z, y=y)
    assert fit.b == pytest.approx(b, rel=1e-5) and fit.c == pytest.approx(c, abs=1e-5)


def test_noisy_fit_is_close():
    z, y = synthetic_samples(2.0, -1.0, noise=0.02, rng=np.random.default_rng(3))
    fit = fit_shaped_model(z=z, y=y)
    assert abs(fit.b - 2.0) < 0.3 and abs(fit.c + 1.0) < 0.05
    assert fit.rss <= fit.grid_rss


def test_degenerate_inputs():
    with pytest.raises(DegenerateFitError):
        fit_shaped_model(z=[1.0, 2.0], y=[0.5, 0.5])
    with pytest.raises(DegenerateFitError):
        fit_shaped_model(z=[1.0, 1.0, 1.0], y=[0.1, 0.2, 0.3])


def test_minimum_viable_input_still_fits():
    cfg = GamblersRuinConfig(k=10, horizon=10)
    samples = collect_shaping_samples(cfg, 1, [1, 2, 3], np.random.default_rng(0), n_value_episodes=20)
    assert len(samples) >= 3
    try:
        fit = fit_shaped_model(samples)
    except DegenerateFitError:
        return
    assert fit.b > 0 and np.isfinite(fit.rss)


def test_sample_targets_match_dp():
    cfg = GamblersRuinConfig(k=3, horizon=3)
    samples = collect_shaping_samples(cfg, 20, [0, 1, 4], np.random.default_rng(0), n_value_episodes=50)
    assert {s.m for s in samples} == {1, 4}
    assert all(s.y == pytest.approx(5 / 8) for s in samples if s.m == 1)
    assert all(s.y == 0.0 for s in samples if s.m == 4)


def test_empirical_targets_estimate_ruin_frequency():
    cfg = GamblersRuinConfig(k=4, horizon=4)
    samples = collect_shaping_samples(cfg, 4000, [2], np.random.default_rng(1), n_value_episodes=10,
                                      target="empirical")
    p = bankruptcy_probability(2, 4)
    assert samples[0].y == pytest.approx(p, abs=4 * np.sqrt(p * (1 - p) / 4000))


def test_gamblers_ruin_pipeline_gives_valid_fit():
    cfg = GamblersRuinConfig(k=10, horizon=10)
    samples = collect_shaping_samples(cfg, 50, range(1, 26), np.random.default_rng(0),
                                      n_value_episodes=200)
    fit = fit_shaped_model(samples)
    assert fit.b > 0 and np.isfinite(fit.rss)
    f = shaped_risk_from_fit(fit)
    assert isinstance(f, ShapedRisk)
    z1, z2 = fit.c - 1 / np.sqrt(fit.b), fit.c + 1 / np.sqrt(fit.b)
    assert f.value(0.5 * (z1 + z2)) > 0.5 * (f.value(z1) + f.value(z2))


@pytest.mark.xfail(strict=True, reason="B - J has mean zero for every fortune by construction (the game is "
                   "a martingale), so the per-fortune mean deviation carries no ordering to be monotone in")
def test_mean_deviation_orders_with_risk():
    cfg = GamblersRuinConfig(k=10, horizon=10)
    samples = collect_shaping_samples(cfg, 400, range(1, 12), np.random.default_rng(0),
                                      n_value_episodes=400)
    by_m = {}
    for s in samples:
        by_m.setdefault(s.m, []).append(s.z)
    ms = sorted(by_m)
    means = [np.mean(by_m[m]) for m in ms]
    risks = [bankruptcy_probability(m, 10) for m in ms]
    # higher risk should come with a more negative mean deviation
    order_z = np.argsort(means)
    order_r = np.argsort(risks)[::-1]
    assert list(order_z) == list(order_r)


def test_csv_writers(tmp_path):
    write_samples_csv(tmp_path / "s.csv", [ShapingSample(-0.5, 0.25, 3)])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("# schema:") and lines[1] == "z,y,m" and lines[2] == "-0.5,0.25,3"
    write_fit_csv(tmp_path / "f.csv", ShapedFit(2.0, -1.0, 0.0, 81))
    assert (tmp_path / "f.csv").read_text().splitlines()[1:] == ["b,c,rss,n", "2.0,-1.0,0.0,81"]
