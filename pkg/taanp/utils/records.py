"""
Line-delimited JSON records, atomic file writes and the run manifest.
"""

import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = "1"
PathLike = Union[str, Path]


def _clean(value: Any) -> Any:
    """JSON-safe copy: numpy scalars unwrapped, NaN/inf mapped to null"""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, Enum):
        return value.value
    return value


def write_text_atomic(path: PathLike, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return path


def write_bytes_atomic(path: PathLike, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
    return path


def write_json_atomic(path: PathLike, payload: Any) -> Path:
    return write_text_atomic(path, json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")


def dumps_record(record: Dict[str, Any]) -> str:
    return json.dumps(_clean(record), sort_keys=True, allow_nan=False)


def write_records(path: PathLike, records: Iterable[Dict[str, Any]], kind: Optional[str] = None) -> Path:
    """Write a whole report; a versioned header record comes first when kind is given"""
    lines = []
    if kind is not None:
        lines.append(dumps_record({"record": "header", "kind": kind, "format_version": REPORT_FORMAT_VERSION}))
    lines.extend(dumps_record(r) for r in records)
    return write_text_atomic(path, "\n".join(lines) + ("\n" if lines else ""))


def append_record(path: PathLike, record: Dict[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_record(record) + "\n")
        fh.flush()


def read_records(path: PathLike, include_header: bool = False) -> Iterator[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if record.get("record") == "header" and not include_header:
                continue
            yield record


def config_hash(config: Dict[str, Any]) -> str:
    canonical = json.dumps(_clean(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def file_digest(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Everything needed to re-execute a command and check its outputs"""
    command: str
    argv: List[str]
    config_hash: str
    version: str
    seeds: Dict[str, int] = field(default_factory=dict)
    started_at: float = field(default_factory=time.time)
    finished_at: Optional[float] = None
    wall_seconds: Optional[float] = None
    python: str = field(default_factory=lambda: sys.version.split()[0])
    platform: str = field(default_factory=platform.platform)
    exit_code: Optional[int] = None
    files: Dict[str, str] = field(default_factory=dict)

    def finish(self, exit_code: int, outputs: Iterable[PathLike] = ()) -> None:
        self.finished_at = time.time()
        self.wall_seconds = self.finished_at - self.started_at
        self.exit_code = exit_code
        for p in outputs:
            p = Path(p)
            if p.is_file():
                self.files[p.name] = file_digest(p)

    def save(self, path: PathLike) -> Path:
        return write_json_atomic(path, asdict(self))

    @classmethod
    def load(cls, path: PathLike) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(**data)
