import numpy as np
import pytest

from taanp.conftest import small_config
from taanp.errors import ConfigError, DatasetParseError
from taanp.npmodel import ModelParams, Variant
from taanp.utils.checkpoint import blob_path, load_checkpoint, save_checkpoint


def test_round_trip_preserves_tensors_features_and_meta(tmp_path, tiny_features):
    params = ModelParams.init(small_config())
    manifest, blob = save_checkpoint(tmp_path / "model.ckpt", params, tiny_features,
                                     extra_tensors={"adam.m": np.arange(3.0)}, meta={"best_epoch": 4},
                                     dtype="float64")
    assert blob == blob_path(manifest) and blob.exists()
    loaded = load_checkpoint(manifest)
    assert loaded.params.checksum() == params.checksum()
    assert loaded.params.config == params.config
    assert loaded.features.flow_scale == tiny_features.flow_scale
    np.testing.assert_array_equal(loaded.extra_tensors["adam.m"], [0.0, 1.0, 2.0])
    assert loaded.meta == {"best_epoch": "4"}


def test_float32_checkpoints_round_to_single_precision(tmp_path):
    params = ModelParams.init(small_config(Variant.ANP, x_dim=5))
    path, _ = save_checkpoint(tmp_path / "anp.ckpt", params, dtype="float32")
    loaded = load_checkpoint(path)
    for name, tensor in params.named():
        np.testing.assert_allclose(loaded.params.tensors[name].data, tensor.data, rtol=1e-6, atol=1e-7)
    assert loaded.features is None


def test_corrupt_checkpoints_are_rejected(tmp_path):
    params = ModelParams.init(small_config(x_dim=5))
    path, blob = save_checkpoint(tmp_path / "m.ckpt", params)
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(DatasetParseError):
        load_checkpoint(path)

    save_checkpoint(path, params)
    blob.write_bytes(blob.read_bytes() + b"\x00" * 4)
    with pytest.raises(DatasetParseError):
        load_checkpoint(path)

    bogus = tmp_path / "bogus.ckpt"
    bogus.write_text("format=something-else\n")
    with pytest.raises(DatasetParseError):
        load_checkpoint(bogus)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_unsupported_dtype_and_meta(tmp_path):
    params = ModelParams.init(small_config(x_dim=5))
    with pytest.raises(ConfigError):
        save_checkpoint(tmp_path / "m.ckpt", params, dtype="float16")
    with pytest.raises(ConfigError):
        save_checkpoint(tmp_path / "m.ckpt", params, meta={"note": "two\nlines"})


def test_default_checkpoints_restore_trained_values_exactly(tmp_path):
    params = ModelParams.init(small_config(x_dim=5))
    for _, tensor in params.named():
        tensor.data = tensor.data + 1e-9 / 3.0
    path, _ = save_checkpoint(tmp_path / "model.ckpt", params)
    loaded = load_checkpoint(path)
    for name, tensor in params.named():
        assert loaded.params.tensors[name].data.tobytes() == tensor.data.tobytes()
    assert loaded.params.checksum() == params.checksum()
