import numpy as np
import pytest

from taanp.errors import ConfigError
from taanp.features import (FCD_COLUMNS, FEATURE_COLUMNS, FEATURE_DIM, STATIC_COLUMNS, TEMPORAL_COLUMNS,
                            FeatureBuilder, parse_drop)


def test_layout_constants():
    assert FEATURE_DIM == len(FEATURE_COLUMNS) == 21
    assert FEATURE_COLUMNS[-3:] == FCD_COLUMNS


def test_flow_scale_uses_observed_training_flows_only(tiny_world):
    builder = FeatureBuilder.fit(tiny_world, time_limit=24)
    observed = tiny_world.sensors.observed
    flows = tiny_world.field.y_obs[observed, :24]
    valid = tiny_world.mask.valid[observed, :24]
    assert builder.flow_scale == pytest.approx(flows[valid].mean())


def test_point_features_shape_and_ranges(tiny_world, tiny_features):
    segments = np.array([0, 3, 9])
    times = np.array([0, 25, 47])
    x = tiny_features.point_features(tiny_world, segments, times)
    assert x.shape == (3, FEATURE_DIM)
    t_dim = len(TEMPORAL_COLUMNS)
    np.testing.assert_allclose(x[:, 0] ** 2 + x[:, 1] ** 2, 1.0)
    np.testing.assert_array_equal(x[:, 2:t_dim].sum(axis=1), 1.0)
    classes = x[:, t_dim:t_dim + 3]
    np.testing.assert_array_equal(classes.sum(axis=1), 1.0)
    static = x[:, t_dim:t_dim + len(STATIC_COLUMNS)]
    assert np.all(np.abs(static) <= 1.0 + 1e-12)


def test_day_of_week_follows_the_epoch(tiny_features):
    onehot = tiny_features.temporal(np.array([0, 24]))[:, 2:]
    # 2024-08-01 is a Thursday
    assert int(np.argmax(onehot[0])) == 3
    assert int(np.argmax(onehot[1])) == 4


def test_dropping_fcd_features(tiny_world, tiny_features):
    avail = np.argwhere(tiny_world.fcd.availability == 1)
    assert avail.size, "tiny world should have some probe coverage"
    seg, t = avail[:5, 0], avail[:5, 1]
    full = tiny_features.point_features(tiny_world, seg, t)
    no_flow = tiny_features.point_features(tiny_world, seg, t, ["fcd_flow"])
    none = tiny_features.point_features(tiny_world, seg, t, ["fcd_flow", "fcd_speed"])
    assert np.all(full[:, -3] > 0) and np.all(no_flow[:, -3] == 0)
    np.testing.assert_array_equal(no_flow[:, -2:], full[:, -2:])
    np.testing.assert_array_equal(none[:, -3:], 0.0)
    np.testing.assert_array_equal(none[:, :-3], full[:, :-3])
    with pytest.raises(ConfigError):
        parse_drop(["fcd_volume"])


def test_manifest_round_trip(tiny_features):
    rebuilt = FeatureBuilder.from_manifest(tiny_features.to_manifest())
    assert rebuilt == tiny_features
    with pytest.raises(ConfigError):
        FeatureBuilder.from_manifest({"feature.flow_scale": "1.0"})


def test_point_view_splits_the_vector(tiny_world, tiny_features):
    point = tiny_features.point(tiny_world, 2, 10)
    assert point.temporal.size == len(TEMPORAL_COLUMNS)
    assert point.static_attrs.size == len(STATIC_COLUMNS)
    assert point.fcd.size == len(FCD_COLUMNS)
    mu, sigma = tiny_features.unscale(np.array([1.0]), np.array([0.5]))
    assert mu[0] == pytest.approx(tiny_features.flow_scale)
    assert sigma[0] == pytest.approx(0.5 * tiny_features.flow_scale)
