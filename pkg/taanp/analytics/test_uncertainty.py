import numpy as np
import pytest

from taanp.analytics.metrics import rrmse
from taanp.analytics.uncertainty import (McSampleSet, UncertaintyConfig, decompose, episode_frame,
                                         error_rejection_curve, evaluate_episodes, interval, k_sweep, mc_infer,
                                         pcv_binning, predictive_cdf, sample_mixture)
from taanp.conftest import random_episode, small_config
from taanp.diffcore import RngStream
from taanp.errors import ConfigError, ContractError
from taanp.npmodel import ForwardMode, ModelParams
from taanp.training import build_episode


def test_decompose_example():
    samples = McSampleSet(mu=[[0.0], [2.0]], sigma=[[1.0], [np.sqrt(3.0)]])
    dec = decompose(samples)
    assert dec.mean[0] == pytest.approx(1.0)
    assert dec.au[0] == pytest.approx(2.0)
    assert dec.eu[0] == pytest.approx(1.0)
    assert dec.total_var[0] == pytest.approx(3.0)
    np.testing.assert_array_equal(dec.total_var, dec.au + dec.eu)


def test_total_variance_matches_monte_carlo():
    rng = RngStream(6)
    samples = McSampleSet(mu=rng.normal(5.0, 2.0, size=(8, 1)), sigma=rng.uniform(0.5, 2.0, size=(8, 1)))
    draws = sample_mixture(samples, 12_500, RngStream(7))
    assert draws.shape == (1, 100_000)
    assert np.var(draws) == pytest.approx(decompose(samples).total_var[0], rel=0.02)


def test_pcv_is_undefined_at_low_flow():
    samples = McSampleSet(mu=[[0.5, 1.0, 10.0]], sigma=[[1.0, 1.0, 1.0]])
    dec = decompose(samples)
    assert dec.pcv_defined.tolist() == [False, False, True]
    assert dec.pcv[2] == pytest.approx(10.0)
    assert dec.eu.tolist() == [0.0, 0.0, 0.0]


def test_predictive_cdf():
    single = McSampleSet(mu=[[0.0]], sigma=[[1.0]])
    assert predictive_cdf(single, [0.0])[0] == pytest.approx(0.5)
    assert predictive_cdf(single, [1.6449])[0] == pytest.approx(0.95, abs=1e-4)
    assert predictive_cdf(single, [1e6])[0] == 1.0
    mixture = McSampleSet(mu=[[0.0], [3.0]], sigma=[[1.0], [0.5]])
    grid = np.linspace(-5, 8, 200)
    values = np.array([predictive_cdf(mixture, [g])[0] for g in grid])
    assert np.all(np.diff(values) >= 0) and values.min() >= 0 and values.max() <= 1


def test_interval_single_component():
    bounds = interval(McSampleSet(mu=[[0.0]], sigma=[[1.0]]), 0.05)
    assert bounds.lower[0] == pytest.approx(-1.95996, abs=1e-5)
    assert bounds.upper[0] == pytest.approx(1.95996, abs=1e-5)
    narrow = interval(McSampleSet(mu=[[2.0]], sigma=[[1.0]]), 0.999)
    assert narrow.upper[0] - narrow.lower[0] < 0.01
    with pytest.raises(ConfigError):
        interval(McSampleSet(mu=[[0.0]], sigma=[[1.0]]), 1.0)


def test_interval_of_a_mixture():
    identical = McSampleSet(mu=[[1.0, -2.0]] * 3, sigma=[[0.5, 2.0]] * 3)
    single = McSampleSet(mu=[[1.0, -2.0]], sigma=[[0.5, 2.0]])
    a, b = interval(identical, 0.05), interval(single, 0.05)
    np.testing.assert_allclose(a.lower, b.lower, atol=1e-7)
    np.testing.assert_allclose(a.upper, b.upper, atol=1e-7)
    mixture = McSampleSet(mu=[[0.0, 5.0], [4.0, 5.5], [1.0, 7.0]], sigma=[[1.0, 0.3], [0.5, 0.2], [2.0, 1.0]])
    bounds = interval(mixture, 0.1)
    coverage = predictive_cdf(mixture, bounds.upper) - predictive_cdf(mixture, bounds.lower)
    np.testing.assert_allclose(coverage, 0.9, atol=1e-6)


def test_error_rejection_curve():
    y = np.full(6, 10.0)
    pred = y + np.array([6.0, 5.0, 4.0, 3.0, 2.0, 1.0])
    curve = error_rejection_curve(pcv=[60.0, 50.0, 40.0, 30.0, 20.0, 10.0], y_true=y, y_pred=pred,
                                  fractions=[0.0, 0.2, 0.5])
    assert curve["rejection_pct"].tolist() == [0.0, 20.0, 50.0]
    assert curve["n_retained"].tolist() == [6, 5, 3]
    assert np.all(np.diff(curve["rrmse"].to_numpy()) < 0)
    assert curve["rrmse"].iloc[0] == pytest.approx(rrmse(y, pred))
    with pytest.raises(ContractError):
        error_rejection_curve([1.0], [1.0, 2.0], [1.0, 2.0], [0.0])
    with pytest.raises(ConfigError):
        error_rejection_curve([1.0], [1.0], [1.0], [1.0])


def test_pcv_binning_counts():
    bins = pcv_binning([5.0, 15.0, 15.5, np.nan], [10.0, 10.0, 10.0, 10.0], [11.0, 9.0, 12.0, 0.0], [0, 10, 20])
    assert bins["count"].tolist() == [1, 2]
    assert bins["median_pcv"].tolist() == [5.0, 15.25]


def test_mc_infer_is_reproducible_and_shaped():
    params = ModelParams.init(small_config(x_dim=5))
    episode = random_episode()
    a = mc_infer(params, episode, 4, RngStream(3))
    b = mc_infer(params, episode, 4, RngStream(3))
    assert a.k == 4 and a.n_targets == 6
    np.testing.assert_array_equal(a.mu, b.mu)
    threaded = mc_infer(params, episode, 4, RngStream(3), n_jobs=2)
    np.testing.assert_array_equal(a.mu, threaded.mu)
    one = decompose(mc_infer(params, episode, 1, RngStream(3)))
    np.testing.assert_array_equal(one.eu, 0.0)
    with pytest.raises(ConfigError):
        mc_infer(params, episode, 0, RngStream(3))


def test_no_dropout_means_no_epistemic_spread():
    params = ModelParams.init(small_config(x_dim=5, dropout_rate=0.0))
    dec = decompose(mc_infer(params, random_episode(), 5, RngStream(0)))
    np.testing.assert_array_equal(dec.eu, 0.0)


def test_episode_frame_columns(tiny_sampler):
    params = ModelParams.init(small_config())
    episode = build_episode(tiny_sampler, 30)
    config = UncertaintyConfig(k_samples=3, samples_per_component=20)
    frame = episode_frame(params, episode, config, RngStream(0), tiny_sampler.features.flow_scale)
    assert len(frame) == episode.n_targets
    for column in ("segment", "t_index", "task", "y_true", "mu", "au", "eu", "pcv", "lower", "upper",
                   "pit", "crps", "horizon"):
        assert column in frame
    assert frame["pit"][~frame["valid"]].isna().all()
    assert frame["crps"][frame["valid"]].ge(0).all()
    assert set(frame["horizon"][frame["task"] != "estimate_unobserved"]) == {1, 2}
    assert set(frame["horizon"][frame["task"] == "estimate_unobserved"]) == {0}

    plain = evaluate_episodes(params, [episode], config, 0, tiny_sampler.features.flow_scale,
                              ForwardMode.INFER_PLAIN)
    assert (plain["eu"] == 0).all()


def test_k_sweep_rows():
    params = ModelParams.init(small_config(x_dim=5))
    table = k_sweep(params, [random_episode(seed=s) for s in range(3)], [1, 4, 2], 0,
                    UncertaintyConfig(samples_per_component=20))
    assert table["k"].tolist() == [1, 2, 4]
    assert table["picp"].between(0, 1).all()
    with pytest.raises(ConfigError):
        k_sweep(params, [random_episode()], [0], 0)
