import math

import numpy as np
import pandas as pd
import pytest
from scipy import integrate
from scipy.special import ndtr

from taanp.analytics.metrics import (compute_report, crps_gaussian, crps_predictive, crps_samples,
                                     evaluate_predictions, mae, picp, pit_bin_index, pit_histogram, qice, r2,
                                     retention_ratio, rmse, rrmse, smape)
from taanp.diffcore import RngStream
from taanp.errors import ConfigError, DomainError, UndefinedMetricError


def test_point_metrics_on_small_series():
    y = np.array([0.0, 2.0])
    assert mae(y, [1.0, 1.0]) == 1.0
    assert rmse(y, [1.0, 1.0]) == 1.0
    assert r2(y, [1.0, 1.0]) == 0.0
    assert mae(y, y) == 0.0 and rmse(y, y) == 0.0 and r2(y, y) == 1.0


def test_missing_entries_never_enter_a_score():
    y = np.array([0.0, np.nan, 2.0, 50.0])
    p = np.array([1.0, 99.0, 1.0, 0.0])
    mask = np.array([True, True, True, False])
    assert mae(y, p, mask) == 1.0
    with pytest.raises(UndefinedMetricError):
        mae(y, p, np.zeros(4, dtype=bool))
    with pytest.raises(UndefinedMetricError):
        r2([3.0, 3.0], [1.0, 2.0])


def test_smape_and_rrmse_examples():
    assert smape([100.0], [50.0]) == pytest.approx(200.0 / 3.0)
    assert smape([0.0], [5.0]) == pytest.approx(200.0)
    assert smape([0.0, 4.0], [0.0, 4.0]) == 0.0
    assert rrmse([10.0, 10.0], [9.0, 11.0]) == pytest.approx(10.0)
    assert rrmse([20.0, 20.0], [18.0, 22.0]) == pytest.approx(10.0)
    with pytest.raises(UndefinedMetricError):
        rrmse([0.0, 0.0], [1.0, 1.0])


def test_crps_gaussian_matches_the_integral_definition():
    assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(0.233695, abs=1e-6)
    for mu, sigma, y in [(0.0, 1.0, 0.7), (2.0, 0.5, 1.1), (-1.0, 3.0, 4.0)]:
        below, _ = integrate.quad(lambda x: ndtr((x - mu) / sigma) ** 2, -np.inf, y)
        above, _ = integrate.quad(lambda x: (ndtr((x - mu) / sigma) - 1.0) ** 2, y, np.inf)
        assert crps_gaussian(mu, sigma, y) == pytest.approx(below + above, abs=1e-6)
    assert crps_gaussian(0.0, 1.0, 1.3) == pytest.approx(crps_gaussian(0.0, 1.0, -1.3))
    assert crps_gaussian(0.0, 1e-9, 2.0) == pytest.approx(2.0, abs=1e-6)
    with pytest.raises(DomainError):
        crps_gaussian(0.0, 0.0, 1.0)


def test_crps_samples():
    assert crps_samples([3.0], 1.0) == pytest.approx(2.0)
    assert crps_samples([1.0] * 5, 1.0) == 0.0
    draws = RngStream(0).normal(size=10_000)
    assert crps_samples(draws, 0.0) == pytest.approx(0.2337, abs=0.01)
    rows = np.stack([draws[:50], draws[50:100]])
    np.testing.assert_allclose(crps_samples(rows, [0.0, 1.0]),
                               [crps_samples(draws[:50], 0.0), crps_samples(draws[50:100], 1.0)])


def test_crps_predictive_modes():
    mus = np.array([[0.0, 1.0], [0.0, 1.0]])
    sigmas = np.ones((2, 2))
    y = np.array([0.0, 1.0])
    moment = crps_predictive(mus, sigmas, y, mode="moment")
    np.testing.assert_allclose(moment, crps_gaussian(0.0, 1.0, 0.0))
    mixture = crps_predictive(mus, sigmas, y, RngStream(1), "mixture", samples_per_component=5_000)
    np.testing.assert_allclose(mixture, 0.2337, atol=0.01)
    with pytest.raises(ConfigError):
        crps_predictive(mus, sigmas, y, mode="quantile")


def test_picp_coverage():
    y = np.array([1.0, 2.0, 3.0])
    assert picp(np.full(3, -np.inf), np.full(3, np.inf), y) == 1.0
    assert picp(y + 1.0, y + 2.0, y) == 0.0
    assert picp(y, y, y) == 1.0
    draws = RngStream(4).normal(size=100_000)
    assert 0.947 <= picp(np.full(draws.size, -1.959964), np.full(draws.size, 1.959964), draws) <= 0.953


def test_pit_bins_are_half_open_with_a_closed_top():
    np.testing.assert_array_equal(pit_bin_index([0.0, 0.1, 0.0999, 0.95, 1.0], 10), [0, 1, 0, 9, 9])
    counts = pit_histogram([0.05, 0.15, np.nan, 1.0], 10)
    assert counts.sum() == 3 and counts[9] == 1
    with pytest.raises(ConfigError):
        pit_histogram([0.5], 1)


def test_qice_examples():
    uniform = (np.arange(100) + 0.5) / 100
    assert qice(uniform, 10) == pytest.approx(0.0)
    assert qice(np.full(20, 0.01), 10) == pytest.approx(0.18)
    calibrated = ndtr(RngStream(8).normal(size=100_000))
    assert qice(calibrated, 10) < 0.01


def test_pit_histogram_diagnostics():
    rng = RngStream(2)
    y = rng.normal(size=50_000)
    overconfident = pit_histogram(ndtr(y / 0.5), 10)
    assert overconfident[0] + overconfident[-1] > 2 * overconfident[4] + 2 * overconfident[5]
    biased_low = pit_histogram(ndtr(y + 1.0), 10)
    assert biased_low[-1] > biased_low[0]


def test_retention_ratio():
    assert retention_ratio(5.0, 5.0) == 1.0
    assert retention_ratio(10.0, 5.0) == 0.5
    with pytest.raises(DomainError):
        retention_ratio(0.0, 5.0)


def test_grouped_reports():
    frame = pd.DataFrame({
        "task": ["a", "a", "b", "b"],
        "y_true": [1.0, 3.0, 2.0, np.nan],
        "mu": [1.0, 1.0, 2.0, 7.0],
        "valid": [True, True, True, False],
        "crps": [0.1, 0.3, 0.2, 9.0],
        "lower": [0.0, 0.0, 0.0, 0.0],
        "upper": [2.0, 2.0, 2.0, 2.0],
        "pit": [0.5, 0.99, 0.5, np.nan],
    })
    reports = evaluate_predictions(frame, ["task"])
    assert [r.keys["task"] for r in reports] == ["all", "a", "b"]
    pooled, a, b = reports
    assert pooled.n_valid == 3
    assert pooled.crps == pytest.approx(0.2)
    assert pooled.picp == pytest.approx(2.0 / 3.0)
    assert a.mae == 1.0 and b.mae == 0.0
    assert b.r2 is None
    record = a.to_record()
    assert record["record"] == "metrics" and record["task"] == "a"
    with pytest.raises(ConfigError):
        evaluate_predictions(frame, ["segment"])
    assert math.isfinite(compute_report(frame).rmse)
