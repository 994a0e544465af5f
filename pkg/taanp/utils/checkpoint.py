"""
💾 CHECKPOINT IO
A text manifest (key=value lines: variant, hyperparameters, feature scalers,
tensor names and shapes) plus a little-endian float blob in manifest order.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from taanp.diffcore import parameter
from taanp.errors import ConfigError, DatasetParseError
from taanp.features import FeatureBuilder
from taanp.npmodel import ModelConfig, ModelParams
from taanp.utils.records import write_bytes_atomic, write_text_atomic

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "taanp-checkpoint"
CHECKPOINT_VERSION = "1"
DTYPES = {"float32": "<f4", "float64": "<f8"}
PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    params: ModelParams
    features: Optional[FeatureBuilder] = None
    extra_tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, str] = field(default_factory=dict)


def blob_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".bin")


def save_checkpoint(path: PathLike, params: ModelParams, features: Optional[FeatureBuilder] = None,
                    extra_tensors: Optional[Dict[str, np.ndarray]] = None,
                    meta: Optional[Dict[str, str]] = None, dtype: str = "float64") -> Tuple[Path, Path]:
    """Write manifest and blob atomically; returns both paths"""
    if dtype not in DTYPES:
        raise ConfigError(f"unsupported checkpoint dtype '{dtype}'")
    path = Path(path)
    entries: List[Tuple[str, str]] = [
        ("format", CHECKPOINT_FORMAT),
        ("format_version", CHECKPOINT_VERSION),
        ("dtype", dtype),
        ("byte_order", "little"),
        ("blob", blob_path(path).name),
    ]
    for key, value in params.config.model_dump(mode="json").items():
        entries.append((f"model.{key}", str(value)))
    if features is not None:
        entries.extend(features.to_manifest().items())
    for key, value in (meta or {}).items():
        if "\n" in str(value) or "=" in key:
            raise ConfigError(f"meta entry '{key}' cannot be stored in a key=value manifest")
        entries.append((f"meta.{key}", str(value)))

    named = [(name, t.data) for name, t in params.named()]
    named += [(f"extra.{name}", np.asarray(arr, dtype=np.float64)) for name, arr in (extra_tensors or {}).items()]
    chunks = []
    for i, (name, data) in enumerate(named):
        shape = "x".join(str(d) for d in data.shape) if data.ndim else "scalar"
        entries.append((f"tensor.{i}", f"{name}:{shape}"))
        chunks.append(np.ascontiguousarray(data, dtype=DTYPES[dtype]).tobytes())

    write_bytes_atomic(blob_path(path), b"".join(chunks))
    write_text_atomic(path, "".join(f"{k}={v}\n" for k, v in entries))
    logger.info(f"💾 Checkpoint written: {path} ({len(named)} tensors, {dtype})")
    return path, blob_path(path)


def _parse_manifest(path: Path) -> Dict[str, str]:
    entries: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "=" not in line:
                raise DatasetParseError("expected key=value", file=str(path), line=number)
            key, value = line.split("=", 1)
            entries[key] = value
    if entries.get("format") != CHECKPOINT_FORMAT:
        raise DatasetParseError("not a checkpoint manifest", file=str(path))
    return entries


def _shape(spec: str) -> Tuple[int, ...]:
    return () if spec == "scalar" else tuple(int(d) for d in spec.split("x"))


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    entries = _parse_manifest(path)
    dtype = entries.get("dtype", "float32")
    if dtype not in DTYPES:
        raise DatasetParseError(f"unsupported dtype '{dtype}'", file=str(path))
    blob = np.frombuffer(blob_path(path).read_bytes(), dtype=DTYPES[dtype])

    config_fields = {k[len("model."):]: v for k, v in entries.items() if k.startswith("model.")}
    try:
        config = ModelConfig.model_validate(config_fields)
    except ValueError as e:
        raise ConfigError(f"checkpoint hyperparameters invalid: {e}") from e

    tensors = {}
    extras = {}
    offset = 0
    i = 0
    while f"tensor.{i}" in entries:
        name, shape_spec = entries[f"tensor.{i}"].rsplit(":", 1)
        shape = _shape(shape_spec)
        count = int(np.prod(shape)) if shape else 1
        if offset + count > blob.size:
            raise DatasetParseError(f"blob too short for tensor '{name}'", file=str(blob_path(path)))
        data = blob[offset:offset + count].astype(np.float64).reshape(shape)
        offset += count
        if name.startswith("extra."):
            extras[name[len("extra."):]] = data
        else:
            tensors[name] = parameter(data)
        i += 1
    if offset != blob.size:
        raise DatasetParseError("blob has trailing data", file=str(blob_path(path)))

    try:
        params = ModelParams(config, tensors)
    except KeyError as e:
        raise DatasetParseError(f"checkpoint lacks tensor {e}", file=str(path)) from e
    features = FeatureBuilder.from_manifest(entries) if "feature.flow_scale" in entries else None
    meta = {k[len("meta."):]: v for k, v in entries.items() if k.startswith("meta.")}
    logger.info(f"💾 Checkpoint loaded: {path} ({config.variant.value})")
    return Checkpoint(params, features, extras, meta)
