"""
🏙️ SYNTHETIC METROPOLITAN SENSING WORLD
Road graph, latent flow field, fixed-sensor split, floating-car observations and
sensor missingness, plus the text dataset format used to exchange worlds.

Flows are vehicles per 15-min interval. A world is a pure function of its
WorldConfig: every random component draws from its own RngStream, so changing
one component (say the sensor split) leaves the others bit-identical.
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import pandas as pd
from pydantic import BaseModel, field_validator, model_validator
from scipy.spatial import Delaunay
from scipy.special import ndtr

from taanp.diffcore import RngStream
from taanp.errors import ConfigError, DatasetParseError, IntegrityError
from taanp.utils.records import write_text_atomic

logger = logging.getLogger(__name__)

INTERVAL_MINUTES = 15
DATASET_FORMAT_VERSION = "1"

# one stream per random component
STREAM_GRAPH = 0
STREAM_FLOW = 1
STREAM_NOISE = 2
STREAM_SENSORS = 3
STREAM_MISSING = 4
STREAM_FCD = 5


class RoadClass(Enum):
    ARTERIAL = "arterial"
    COLLECTOR = "collector"
    LOCAL = "local"


ROAD_CLASSES = [c.value for c in RoadClass]

CLASS_PROFILES: Dict[str, Dict] = {
    "arterial": {"share": 0.2, "lanes": (2, 4), "length_m": 420.0, "flow_per_lane": 95.0,
                 "free_flow_kmh": 60.0, "lane_capacity": 450.0},
    "collector": {"share": 0.35, "lanes": (1, 2), "length_m": 260.0, "flow_per_lane": 60.0,
                  "free_flow_kmh": 45.0, "lane_capacity": 380.0},
    "local": {"share": 0.45, "lanes": (1, 1), "length_m": 160.0, "flow_per_lane": 30.0,
              "free_flow_kmh": 30.0, "lane_capacity": 300.0},
}


class WorldConfig(BaseModel):
    """Desk-scale world defaults: 60 segments × 14 days × 96 intervals"""
    n_segments: int = 60
    horizon_days: int = 14
    intervals_per_day: int = 96
    noise_sigma: float = 8.0
    unobserved_ratio: float = 0.6
    missing_rate: float = 0.0976
    penetration_range: Tuple[float, float] = (0.02, 0.10)
    speed_noise_kmh: float = 2.0
    spatial_sd: float = 0.35
    day_ar_coef: float = 0.6
    day_sd: float = 0.12
    intraday_ar_coef: float = 0.9
    intraday_sd: float = 0.08
    smoothing: float = 2.0
    epoch: str = "2024-08-01T00:00"
    seed: int = 0

    @field_validator("n_segments")
    @classmethod
    def _enough_segments(cls, v: int) -> int:
        if v < 4:
            raise ValueError("n_segments must be >= 4")
        return v

    @field_validator("horizon_days", "intervals_per_day")
    @classmethod
    def _positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("noise_sigma", "speed_noise_kmh")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @model_validator(mode="after")
    def _ranges(self) -> "WorldConfig":
        lo, hi = self.penetration_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("penetration_range must lie in (0, 1]")
        if not 0.0 < self.unobserved_ratio < 1.0:
            raise ValueError("unobserved_ratio must lie in (0, 1)")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        return self


# --- domain types ----------------------------------------------------------------

@dataclass
class RoadGraph:
    """Segments are nodes; adjacency lists directed segment-to-segment connections"""
    segment_ids: np.ndarray
    road_class: List[str]
    lanes: np.ndarray
    length_m: np.ndarray
    coords_km: np.ndarray
    edges: List[Tuple[int, int]]
    betweenness: np.ndarray
    closeness: np.ndarray

    @property
    def n_segments(self) -> int:
        return len(self.segment_ids)

    def index_of(self, segment_id: int) -> int:
        return self._index[int(segment_id)]

    def __post_init__(self):
        self._index = {int(s): i for i, s in enumerate(self.segment_ids)}

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(int(s) for s in self.segment_ids)
        g.add_edges_from((int(a), int(b)) for a, b in self.edges)
        return g

    def hop_distances(self) -> np.ndarray:
        """All-pairs hop distance matrix in segment-index order"""
        g = self.to_networkx().to_undirected()
        n = self.n_segments
        dist = np.full((n, n), np.inf)
        for src, lengths in nx.all_pairs_shortest_path_length(g):
            i = self.index_of(src)
            for dst, d in lengths.items():
                dist[i, self.index_of(dst)] = d
        return dist

    def laplacian(self) -> np.ndarray:
        n = self.n_segments
        adj = np.zeros((n, n))
        for a, b in self.edges:
            i, j = self.index_of(a), self.index_of(b)
            adj[i, j] = adj[j, i] = 1.0
        return np.diag(adj.sum(axis=1)) - adj

    def free_flow_kmh(self) -> np.ndarray:
        return np.array([CLASS_PROFILES[c]["free_flow_kmh"] for c in self.road_class])

    def capacity(self) -> np.ndarray:
        return np.array([CLASS_PROFILES[c]["lane_capacity"] for c in self.road_class]) * self.lanes

    def graph_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.segment_ids, self.lanes, self.length_m, self.coords_km,
                    self.betweenness, self.closeness, np.asarray(self.edges, dtype=np.int64)):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(",".join(self.road_class).encode())
        return h.hexdigest()

    @classmethod
    def from_edges(cls, segment_ids: Sequence[int], edges: Sequence[Tuple[int, int]],
                   road_class: Optional[Sequence[str]] = None, lanes: Optional[Sequence[int]] = None,
                   length_m: Optional[Sequence[float]] = None,
                   coords_km: Optional[np.ndarray] = None) -> "RoadGraph":
        """Build a graph and compute exact centralities from a directed edge list"""
        ids = np.asarray(segment_ids, dtype=np.int64)
        n = len(ids)
        road_class = list(road_class) if road_class is not None else ["local"] * n
        lanes = np.asarray(lanes if lanes is not None else [1] * n, dtype=np.int64)
        length_m = np.asarray(length_m if length_m is not None else [100.0] * n, dtype=np.float64)
        coords = np.asarray(coords_km, dtype=np.float64) if coords_km is not None else np.zeros((n, 2))
        edges = [(int(a), int(b)) for a, b in edges]
        betweenness, closeness = compute_centrality(ids, edges)
        return cls(ids, road_class, lanes, length_m, coords, edges, betweenness, closeness)


@dataclass
class FlowField:
    """f_true is the noiseless latent flow (None when loaded from disk)"""
    y_obs: np.ndarray
    f_true: Optional[np.ndarray]
    noise_sigma: float
    intervals_per_day: int = 96
    epoch: str = "2024-08-01T00:00"

    @property
    def n_intervals(self) -> int:
        return self.y_obs.shape[1]

    @property
    def has_ground_truth(self) -> bool:
        return self.f_true is not None


@dataclass
class SensorAssignment:
    observed: np.ndarray  # segment indices, sorted
    n_segments: int
    unobserved_ratio: float

    @property
    def unobserved(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_segments), self.observed)

    def is_observed(self) -> np.ndarray:
        flags = np.zeros(self.n_segments, dtype=bool)
        flags[self.observed] = True
        return flags


@dataclass
class FcdProcess:
    penetration: np.ndarray
    fcd_flow: np.ndarray
    fcd_speed: np.ndarray
    availability: np.ndarray

    def penetration_estimate(self, flow: np.ndarray, valid: np.ndarray) -> np.ndarray:
        """Segment-wise time average of fcd_flow / flow over valid, non-zero intervals"""
        usable = valid & (flow > 0)
        ratio = np.where(usable, self.fcd_flow / np.where(usable, flow, 1.0), 0.0)
        counts = usable.sum(axis=1)
        return np.where(counts > 0, ratio.sum(axis=1) / np.maximum(counts, 1), 0.0)


@dataclass
class MissingnessMask:
    valid: np.ndarray
    missing_rate: float

    @property
    def realized_rate(self) -> float:
        return float(1.0 - self.valid.mean())


@dataclass
class SyntheticWorld:
    graph: RoadGraph
    field: FlowField
    fcd: FcdProcess
    mask: MissingnessMask
    sensors: Optional[SensorAssignment] = None
    config: Optional[WorldConfig] = None

    @property
    def n_segments(self) -> int:
        return self.graph.n_segments

    @property
    def n_intervals(self) -> int:
        return self.field.n_intervals

    def with_sensors(self, sensors: SensorAssignment) -> "SyntheticWorld":
        return SyntheticWorld(self.graph, self.field, self.fcd, self.mask, sensors, self.config)

    def penetration_by_segment(self) -> np.ndarray:
        return self.fcd.penetration_estimate(self.field.y_obs, self.mask.valid)


# --- graph -------------------------------------------------------------------------

def compute_centrality(segment_ids: np.ndarray, edges: Sequence[Tuple[int, int]]) -> Tuple[np.ndarray, np.ndarray]:
    """Exact hop-count betweenness and closeness, in segment order"""
    g = nx.DiGraph()
    g.add_nodes_from(int(s) for s in segment_ids)
    g.add_edges_from(edges)
    between = nx.betweenness_centrality(g, normalized=True)
    close = nx.closeness_centrality(g)
    b = np.array([between[int(s)] for s in segment_ids], dtype=np.float64)
    c = np.array([close[int(s)] for s in segment_ids], dtype=np.float64)
    return b, c


def generate_graph(n_segments: int, seed: int) -> RoadGraph:
    """Delaunay-based planar-ish network with class-dependent attributes"""
    if n_segments < 4:
        raise ConfigError(f"n_segments must be >= 4, got {n_segments}")
    rng = RngStream(seed, STREAM_GRAPH)
    side_km = 0.5 * math.sqrt(n_segments)
    coords = rng.uniform(0.0, side_km, size=(n_segments, 2))

    tri = Delaunay(coords)
    candidate = nx.Graph()
    candidate.add_nodes_from(range(n_segments))
    for simplex in tri.simplices:
        for a in range(3):
            i, j = int(simplex[a]), int(simplex[(a + 1) % 3])
            candidate.add_edge(i, j, weight=float(np.linalg.norm(coords[i] - coords[j])))

    lengths = np.array([d["weight"] for _, _, d in candidate.edges(data=True)])
    cutoff = 2.0 * np.median(lengths)
    kept = nx.minimum_spanning_tree(candidate)
    for i, j, d in candidate.edges(data=True):
        if d["weight"] <= cutoff:
            kept.add_edge(i, j, **d)

    edges = sorted({(i, j) for i, j in kept.edges()} | {(j, i) for i, j in kept.edges()})
    ids = np.arange(n_segments, dtype=np.int64)
    betweenness, closeness = compute_centrality(ids, edges)

    # busiest corridors become arterials
    order = np.lexsort((ids, -betweenness))
    n_art = max(1, int(round(CLASS_PROFILES["arterial"]["share"] * n_segments)))
    n_col = max(1, int(round(CLASS_PROFILES["collector"]["share"] * n_segments)))
    road_class = ["local"] * n_segments
    for rank, idx in enumerate(order):
        road_class[idx] = "arterial" if rank < n_art else ("collector" if rank < n_art + n_col else "local")

    lanes = np.array([rng.integers(CLASS_PROFILES[c]["lanes"][0], CLASS_PROFILES[c]["lanes"][1] + 1)
                      for c in road_class], dtype=np.int64)
    length_m = np.array([CLASS_PROFILES[c]["length_m"] * math.exp(0.3 * rng.normal()) for c in road_class])

    graph = RoadGraph(ids, road_class, lanes, length_m, coords, edges, betweenness, closeness)
    logger.info(f"🏙️ Generated road graph: {n_segments} segments, {len(edges)} directed links")
    return graph


# --- flow ---------------------------------------------------------------------------

def _epoch_weekday(epoch: str) -> int:
    return int(pd.Timestamp(epoch).dayofweek)


def diurnal_profile(t_index: np.ndarray, intervals_per_day: int = 96, epoch: str = "2024-08-01T00:00") -> np.ndarray:
    """Relative demand with morning and evening peaks on weekdays, a flatter weekend"""
    t_index = np.asarray(t_index)
    hours = (t_index % intervals_per_day) * 24.0 / intervals_per_day
    weekday = (t_index // intervals_per_day + _epoch_weekday(epoch)) % 7

    def bump(center, width):
        return np.exp(-0.5 * ((hours - center) / width) ** 2)

    workday = 0.08 + 0.95 * bump(8.0, 1.3) + 0.85 * bump(18.0, 1.6) + 0.45 * bump(13.0, 3.0)
    weekend = 0.08 + 0.45 * bump(11.5, 2.5) + 0.6 * bump(17.5, 2.8)
    return np.where(weekday >= 5, weekend, workday)


def _smoother(graph: RoadGraph, strength: float) -> np.ndarray:
    """Graph-diffusion smoothing operator (I + strength·L)^-1"""
    n = graph.n_segments
    return np.linalg.inv(np.eye(n) + strength * graph.laplacian())


def _smooth_standard_normal(smoother: np.ndarray, draws: np.ndarray) -> np.ndarray:
    field_ = smoother @ draws
    scale = field_.std(axis=0, keepdims=True)
    return field_ / np.where(scale > 0, scale, 1.0)


def generate_flow(graph: RoadGraph, horizon_days: int, seed: int, noise_sigma: float,
                  intervals_per_day: int = 96, epoch: str = "2024-08-01T00:00",
                  config: Optional[WorldConfig] = None) -> FlowField:
    """f_true = base × diurnal × spatial × day AR(1) × intraday AR(1); y_obs = max(0, f_true + ε)"""
    if horizon_days < 1:
        raise ConfigError("horizon_days must be >= 1")
    cfg = config or WorldConfig(n_segments=max(graph.n_segments, 4), horizon_days=horizon_days,
                                intervals_per_day=intervals_per_day, noise_sigma=noise_sigma, epoch=epoch)
    rng = RngStream(seed, STREAM_FLOW)
    n = graph.n_segments
    steps = horizon_days * intervals_per_day
    smoother = _smoother(graph, cfg.smoothing)

    base = np.array([CLASS_PROFILES[c]["flow_per_lane"] for c in graph.road_class]) * graph.lanes
    spatial = np.exp(cfg.spatial_sd * _smooth_standard_normal(smoother, rng.normal(size=(n, 1)))[:, 0])

    day_state = np.zeros((n, horizon_days))
    shocks = _smooth_standard_normal(smoother, rng.normal(size=(n, horizon_days)))
    day_state[:, 0] = shocks[:, 0]
    for d in range(1, horizon_days):
        day_state[:, d] = cfg.day_ar_coef * day_state[:, d - 1] + math.sqrt(1 - cfg.day_ar_coef ** 2) * shocks[:, d]
    day_mod = np.exp(cfg.day_sd * np.repeat(day_state, intervals_per_day, axis=1))

    intra = np.zeros((n, steps))
    intra_shocks = _smooth_standard_normal(smoother, rng.normal(size=(n, steps)))
    intra[:, 0] = intra_shocks[:, 0]
    psi = cfg.intraday_ar_coef
    for t in range(1, steps):
        intra[:, t] = psi * intra[:, t - 1] + math.sqrt(1 - psi ** 2) * intra_shocks[:, t]
    intra_mod = np.exp(cfg.intraday_sd * intra)

    profile = diurnal_profile(np.arange(steps), intervals_per_day, epoch)
    f_true = base[:, None] * spatial[:, None] * profile[None, :] * day_mod * intra_mod

    noise = RngStream(seed, STREAM_NOISE).normal(size=f_true.shape)
    y_obs = np.maximum(0.0, f_true + noise_sigma * noise)
    logger.info(f"🌊 Generated flow field: {n} segments × {steps} intervals, noise σ={noise_sigma}")
    return FlowField(y_obs=y_obs, f_true=f_true, noise_sigma=noise_sigma,
                     intervals_per_day=intervals_per_day, epoch=epoch)


def simulate_fcd(field_: FlowField, graph: RoadGraph, penetration_range: Tuple[float, float], seed: int,
                 speed_noise_kmh: float = 2.0, smoothing: float = 2.0) -> FcdProcess:
    """Binomial probe thinning of the true flow plus a congestion-dependent probe speed"""
    lo, hi = penetration_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ConfigError(f"penetration_range must lie in (0, 1], got {penetration_range}")
    if not field_.has_ground_truth:
        raise ConfigError("simulate_fcd needs the ground-truth flow")
    rng = RngStream(seed, STREAM_FCD)
    n = graph.n_segments
    smooth = _smooth_standard_normal(_smoother(graph, smoothing), rng.normal(size=(n, 1)))[:, 0]
    penetration = lo + (hi - lo) * ndtr(smooth)

    counts = np.rint(field_.f_true).astype(np.int64)
    fcd_flow = rng.binomial(counts, penetration[:, None]).astype(np.float64)

    ratio = field_.f_true / graph.capacity()[:, None]
    speed = graph.free_flow_kmh()[:, None] / (1.0 + 0.15 * ratio ** 4)
    if speed_noise_kmh > 0:
        speed = speed + speed_noise_kmh * rng.normal(size=speed.shape)
    speed = np.maximum(speed, 1.0)

    availability = (fcd_flow > 0).astype(np.int8)
    fcd_speed = np.where(availability == 1, speed, 0.0)
    return FcdProcess(penetration=penetration, fcd_flow=fcd_flow, fcd_speed=fcd_speed, availability=availability)


def assign_sensors(graph: RoadGraph, unobserved_ratio: float, seed: int) -> SensorAssignment:
    """Uniform split; observed count = round((1 − ratio)·|V|), at least 1, strictly below |V|"""
    if not 0.0 < unobserved_ratio < 1.0:
        raise ConfigError(f"unobserved_ratio must lie in (0, 1), got {unobserved_ratio}")
    n = graph.n_segments
    n_observed = max(1, int(math.floor((1.0 - unobserved_ratio) * n + 0.5)))
    if n_observed >= n:
        raise ConfigError(f"ratio {unobserved_ratio} leaves no unobserved segment out of {n}")
    order = RngStream(seed, STREAM_SENSORS).permutation(n)
    return SensorAssignment(observed=np.sort(order[:n_observed]), n_segments=n, unobserved_ratio=unobserved_ratio)


def inject_missing(field_: FlowField, rate: float, seed: int, max_run: int = 8) -> MissingnessMask:
    """Blockwise outages (runs of 1..max_run intervals) until exactly round(rate·cells) are missing"""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"missing rate must lie in [0, 1), got {rate}")
    n, steps = field_.y_obs.shape
    valid = np.ones((n, steps), dtype=bool)
    target = int(round(rate * n * steps))
    rng = RngStream(seed, STREAM_MISSING)
    missing = 0
    while missing < target:
        seg = int(rng.integers(0, n))
        start = int(rng.integers(0, steps))
        run = int(rng.integers(1, max_run + 1))
        for t in range(start, min(start + run, steps)):
            if valid[seg, t]:
                valid[seg, t] = False
                missing += 1
                if missing == target:
                    break
    return MissingnessMask(valid=valid, missing_rate=rate)


def generate_world(config: WorldConfig) -> SyntheticWorld:
    """Full world as a pure function of (config, seed)"""
    graph = generate_graph(config.n_segments, config.seed)
    flow = generate_flow(graph, config.horizon_days, config.seed, config.noise_sigma,
                         config.intervals_per_day, config.epoch, config)
    fcd = simulate_fcd(flow, graph, config.penetration_range, config.seed,
                       config.speed_noise_kmh, config.smoothing)
    mask = inject_missing(flow, config.missing_rate, config.seed)
    sensors = assign_sensors(graph, config.unobserved_ratio, config.seed)
    logger.info(f"✅ World ready: {sensors.observed.size} observed / {graph.n_segments} segments, "
                f"missing {mask.realized_rate:.2%}")
    return SyntheticWorld(graph, flow, fcd, mask, sensors, config)


# --- dataset files ---------------------------------------------------------------------

SEGMENT_COLUMNS = ["id", "class", "lanes", "length_m", "betweenness", "closeness"]
OPTIONAL_SEGMENT_COLUMNS = ["x_km", "y_km"]
ADJACENCY_COLUMNS = ["from_id", "to_id"]
SERIES_COLUMNS = ["segment_id", "t_index", "flow", "valid_flag", "fcd_flow", "fcd_speed", "fcd_avail"]
FLOAT_FORMAT = "%.17g"


def save_dataset(world: SyntheticWorld, directory: str) -> List[str]:
    """Write manifest, segments, adjacency and series files; returns the written paths"""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    g, fl = world.graph, world.field
    n, steps = fl.y_obs.shape

    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "epoch": fl.epoch,
        "interval_minutes": str(INTERVAL_MINUTES),
        "intervals_per_day": str(fl.intervals_per_day),
        "n_intervals": str(steps),
        "n_segments": str(n),
        "noise_sigma": repr(float(fl.noise_sigma)),
    }
    write_text_atomic(out / "manifest.txt", "".join(f"{k}={v}\n" for k, v in manifest.items()))

    segments = pd.DataFrame({
        "id": g.segment_ids, "class": g.road_class, "lanes": g.lanes, "length_m": g.length_m,
        "betweenness": g.betweenness, "closeness": g.closeness,
        "x_km": g.coords_km[:, 0], "y_km": g.coords_km[:, 1],
    })
    write_text_atomic(out / "segments.csv",
                      segments.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n"))

    adjacency = pd.DataFrame(g.edges, columns=ADJACENCY_COLUMNS)
    write_text_atomic(out / "adjacency.csv", adjacency.to_csv(index=False, lineterminator="\n"))

    series = pd.DataFrame({
        "segment_id": np.repeat(g.segment_ids, steps),
        "t_index": np.tile(np.arange(steps), n),
        "flow": fl.y_obs.reshape(-1),
        "valid_flag": world.mask.valid.reshape(-1).astype(np.int8),
        "fcd_flow": world.fcd.fcd_flow.reshape(-1),
        "fcd_speed": world.fcd.fcd_speed.reshape(-1),
        "fcd_avail": world.fcd.availability.reshape(-1).astype(np.int8),
    })
    write_text_atomic(out / "series.csv", series.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n"))
    logger.info(f"💾 Dataset written to {out} ({n} segments × {steps} intervals)")
    return [str(out / name) for name in ("manifest.txt", "segments.csv", "adjacency.csv", "series.csv")]


def _read_manifest(path: Path) -> Dict[str, str]:
    if not path.exists():
        raise DatasetParseError("manifest file missing", file=str(path))
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetParseError("expected key=value", file=str(path), line=lineno)
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    for key in ("epoch", "intervals_per_day", "n_intervals"):
        if key not in entries:
            raise DatasetParseError(f"manifest key '{key}' missing", file=str(path))
    return entries


def _read_table(path: Path, required: List[str], numeric: List[str]) -> pd.DataFrame:
    if not path.exists():
        raise DatasetParseError("file missing", file=str(path))
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    for column in required:
        if column not in frame.columns:
            raise DatasetParseError("required column missing", file=str(path), line=1, column=column)
    for column in numeric:
        if column not in frame.columns:
            continue
        converted = pd.to_numeric(frame[column], errors="coerce")
        bad = np.flatnonzero(converted.isna().to_numpy())
        if bad.size:
            # header is line 1
            raise DatasetParseError(f"not a number: '{frame[column].iloc[bad[0]]}'",
                                    file=str(path), line=int(bad[0]) + 2, column=column)
        frame[column] = converted
    return frame


def load_dataset(directory: str) -> SyntheticWorld:
    """Load a world from disk; ground truth is unavailable (f_true is None)"""
    root = Path(directory)
    manifest = _read_manifest(root / "manifest.txt")
    steps = int(manifest["n_intervals"])
    per_day = int(manifest["intervals_per_day"])

    seg = _read_table(root / "segments.csv", SEGMENT_COLUMNS,
                      ["id", "lanes", "length_m", "betweenness", "closeness"] + OPTIONAL_SEGMENT_COLUMNS)
    bad_class = ~seg["class"].isin(ROAD_CLASSES)
    if bad_class.any():
        row = int(np.flatnonzero(bad_class.to_numpy())[0])
        raise DatasetParseError(f"unknown road class '{seg['class'].iloc[row]}'",
                                file=str(root / "segments.csv"), line=row + 2, column="class")
    ids = seg["id"].astype(np.int64).to_numpy()
    if len(np.unique(ids)) != len(ids):
        raise IntegrityError("duplicate segment id in segments file")
    known = set(int(i) for i in ids)
    has_coords = all(c in seg.columns for c in OPTIONAL_SEGMENT_COLUMNS)
    coords = seg[OPTIONAL_SEGMENT_COLUMNS].to_numpy(dtype=np.float64) if has_coords else np.zeros((len(ids), 2))

    adj = _read_table(root / "adjacency.csv", ADJACENCY_COLUMNS, ADJACENCY_COLUMNS)
    edges = []
    for a, b in zip(adj["from_id"].astype(np.int64), adj["to_id"].astype(np.int64)):
        for sid in (a, b):
            if int(sid) not in known:
                raise IntegrityError(f"adjacency references unknown segment id {int(sid)}")
        edges.append((int(a), int(b)))

    graph = RoadGraph(ids, seg["class"].tolist(), seg["lanes"].astype(np.int64).to_numpy(),
                      seg["length_m"].to_numpy(dtype=np.float64), coords, edges,
                      seg["betweenness"].to_numpy(dtype=np.float64), seg["closeness"].to_numpy(dtype=np.float64))

    series = _read_table(root / "series.csv", SERIES_COLUMNS, SERIES_COLUMNS)
    seg_col = series["segment_id"].astype(np.int64).to_numpy()
    unknown = np.setdiff1d(np.unique(seg_col), ids)
    if unknown.size:
        raise IntegrityError(f"series file references unknown segment id {int(unknown[0])}")
    t_col = series["t_index"].astype(np.int64).to_numpy()
    if t_col.min(initial=0) < 0 or t_col.max(initial=0) >= steps:
        raise IntegrityError(f"t_index outside [0, {steps}) declared by the manifest")

    n = len(ids)
    rows = np.array([graph.index_of(s) for s in seg_col], dtype=np.int64)
    seen = np.zeros((n, steps), dtype=np.int64)
    np.add.at(seen, (rows, t_col), 1)
    if (seen > 1).any():
        i, t = np.argwhere(seen > 1)[0]
        raise IntegrityError(f"duplicate series row for segment id {int(ids[i])} at t_index {int(t)}")
    if (seen == 0).any():
        i, t = np.argwhere(seen == 0)[0]
        raise IntegrityError(f"series row missing for segment id {int(ids[i])} at t_index {int(t)}")

    def grid(column: str, dtype=np.float64) -> np.ndarray:
        out = np.zeros((n, steps), dtype=dtype)
        out[rows, t_col] = series[column].to_numpy(dtype=dtype)
        return out

    flow = FlowField(y_obs=grid("flow"), f_true=None, noise_sigma=float(manifest.get("noise_sigma", "nan")),
                     intervals_per_day=per_day, epoch=manifest["epoch"])
    availability = grid("fcd_avail", np.int8)
    fcd = FcdProcess(penetration=np.zeros(n), fcd_flow=grid("fcd_flow"), fcd_speed=grid("fcd_speed"),
                     availability=availability)
    mask = MissingnessMask(valid=grid("valid_flag", np.int8).astype(bool), missing_rate=float("nan"))
    mask.missing_rate = mask.realized_rate
    fcd.penetration = fcd.penetration_estimate(flow.y_obs, mask.valid)
    logger.info(f"📂 Loaded dataset from {root}: {n} segments × {steps} intervals")
    return SyntheticWorld(graph, flow, fcd, mask)
