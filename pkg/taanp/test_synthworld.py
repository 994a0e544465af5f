import numpy as np
import pytest

from taanp.errors import ConfigError, DatasetParseError, IntegrityError
from taanp.synthworld import (RoadGraph, WorldConfig, assign_sensors, diurnal_profile, generate_world,
                              load_dataset, save_dataset)


def test_world_is_a_pure_function_of_its_config(tiny_world_config, tiny_world):
    again = generate_world(tiny_world_config)
    np.testing.assert_array_equal(again.field.y_obs, tiny_world.field.y_obs)
    np.testing.assert_array_equal(again.mask.valid, tiny_world.mask.valid)
    assert again.graph.graph_hash() == tiny_world.graph.graph_hash()
    other = generate_world(tiny_world_config.model_copy(update={"seed": 4}))
    assert not np.array_equal(other.field.y_obs, tiny_world.field.y_obs)


def test_changing_the_sensor_split_leaves_flows_untouched(tiny_world_config, tiny_world):
    resplit = generate_world(tiny_world_config.model_copy(update={"unobserved_ratio": 0.3}))
    np.testing.assert_array_equal(resplit.field.y_obs, tiny_world.field.y_obs)
    assert resplit.sensors.observed.size == 7


def test_world_shapes_and_domains(tiny_world):
    n, steps = 10, 48
    assert tiny_world.field.y_obs.shape == (n, steps)
    assert np.all(tiny_world.field.y_obs >= 0)
    assert tiny_world.mask.valid.shape == (n, steps)
    missing = int((~tiny_world.mask.valid).sum())
    assert missing == int(round(0.05 * n * steps))
    fcd = tiny_world.fcd
    assert np.all(fcd.fcd_flow <= np.rint(tiny_world.field.f_true))
    assert np.all((fcd.fcd_speed > 0) == (fcd.availability == 1))
    assert np.all((fcd.penetration >= 0.02) & (fcd.penetration <= 0.10))


def test_weekday_peaks_beat_the_night():
    profile = diurnal_profile(np.arange(96))
    assert profile[32] > 5 * profile[12]


def test_assign_sensors_counts():
    graph = RoadGraph.from_edges(range(10), [(i, i + 1) for i in range(9)])
    assert assign_sensors(graph, 0.6, 0).observed.size == 4
    assert assign_sensors(graph, 0.95, 0).observed.size == 1
    split = assign_sensors(graph, 0.5, 7)
    assert np.array_equal(np.sort(np.concatenate([split.observed, split.unobserved])), np.arange(10))
    with pytest.raises(ConfigError):
        assign_sensors(graph, 0.0, 0)
    with pytest.raises(ConfigError):
        assign_sensors(graph, 0.01, 0)


def test_path_graph_centrality_peaks_in_the_middle():
    edges = [(i, i + 1) for i in range(4)] + [(i + 1, i) for i in range(4)]
    graph = RoadGraph.from_edges(range(5), edges)
    assert int(np.argmax(graph.betweenness)) == 2
    assert graph.betweenness[0] == 0.0
    assert graph.closeness[2] == graph.closeness.max()


def test_config_validation():
    with pytest.raises(ValueError):
        WorldConfig(n_segments=3)
    with pytest.raises(ValueError):
        WorldConfig(unobserved_ratio=1.0)
    with pytest.raises(ValueError):
        WorldConfig(penetration_range=(0.2, 0.1))


def test_dataset_round_trip(tmp_path, tiny_world):
    paths = save_dataset(tiny_world, str(tmp_path))
    assert len(paths) == 4
    loaded = load_dataset(str(tmp_path))
    np.testing.assert_array_equal(loaded.field.y_obs, tiny_world.field.y_obs)
    np.testing.assert_array_equal(loaded.mask.valid, tiny_world.mask.valid)
    np.testing.assert_array_equal(loaded.fcd.fcd_flow, tiny_world.fcd.fcd_flow)
    assert loaded.graph.edges == tiny_world.graph.edges
    assert loaded.field.f_true is None
    assert loaded.sensors is None


def test_bad_number_reports_file_line_and_column(tmp_path, tiny_world):
    save_dataset(tiny_world, str(tmp_path))
    series = tmp_path / "series.csv"
    lines = series.read_text().splitlines()
    fields = lines[3].split(",")
    fields[2] = "abc"
    lines[3] = ",".join(fields)
    series.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetParseError) as info:
        load_dataset(str(tmp_path))
    assert info.value.line == 4
    assert info.value.column == "flow"


def test_adjacency_to_unknown_segment_is_an_integrity_error(tmp_path, tiny_world):
    save_dataset(tiny_world, str(tmp_path))
    with open(tmp_path / "adjacency.csv", "a") as fh:
        fh.write("0,999\n")
    with pytest.raises(IntegrityError):
        load_dataset(str(tmp_path))


def test_missing_series_row_is_an_integrity_error(tmp_path, tiny_world):
    save_dataset(tiny_world, str(tmp_path))
    series = tmp_path / "series.csv"
    lines = series.read_text().splitlines()
    series.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(IntegrityError):
        load_dataset(str(tmp_path))
