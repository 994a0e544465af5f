"""
🧩 POINT FEATURES
Builds identity vectors x(ν, t) for (segment, interval) pairs of a world and
holds the scalers that keep model inputs O(1).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional

import numpy as np
import pandas as pd

from taanp.errors import ConfigError
from taanp.npmodel import PointFeatures
from taanp.synthworld import ROAD_CLASSES, SyntheticWorld

logger = logging.getLogger(__name__)

FCD_FLOW = "fcd_flow"
FCD_SPEED = "fcd_speed"
DROPPABLE = frozenset({FCD_FLOW, FCD_SPEED})

TEMPORAL_COLUMNS = ["tod_sin", "tod_cos"] + [f"dow_{d}" for d in range(7)]
STATIC_COLUMNS = [f"class_{c}" for c in ROAD_CLASSES] + ["lanes", "length", "betweenness", "closeness", "x", "y"]
FCD_COLUMNS = [FCD_FLOW, FCD_SPEED, "fcd_avail"]
FEATURE_COLUMNS = TEMPORAL_COLUMNS + STATIC_COLUMNS + FCD_COLUMNS
FEATURE_DIM = len(FEATURE_COLUMNS)


def parse_drop(drop: Iterable[str]) -> FrozenSet[str]:
    drop = frozenset(drop or ())
    unknown = drop - DROPPABLE
    if unknown:
        raise ConfigError(f"unknown FCD features to drop: {sorted(unknown)}")
    return drop


@dataclass
class FeatureBuilder:
    """Scalers fitted on a world; everything needed to rebuild features at load time"""
    flow_scale: float
    lanes_scale: float = 1.0
    length_scale: float = 1.0
    betweenness_scale: float = 1.0
    closeness_scale: float = 1.0
    coord_center: List[float] = field(default_factory=lambda: [0.0, 0.0])
    coord_scale: float = 1.0
    speed_scale: float = 50.0
    intervals_per_day: int = 96
    epoch: str = "2024-08-01T00:00"

    @property
    def dim(self) -> int:
        return FEATURE_DIM

    @property
    def feature_split(self):
        return len(TEMPORAL_COLUMNS), len(STATIC_COLUMNS)

    @classmethod
    def fit(cls, world: SyntheticWorld, time_limit: Optional[int] = None) -> "FeatureBuilder":
        """Fit scalers; flow_scale is the mean valid flow of observed segments before time_limit"""
        graph = world.graph
        segments = world.sensors.observed if world.sensors is not None else np.arange(world.n_segments)
        stop = world.n_intervals if time_limit is None else int(time_limit)
        flows = world.field.y_obs[segments, :stop]
        valid = world.mask.valid[segments, :stop]
        flow_scale = float(flows[valid].mean()) if valid.any() else 1.0
        if not np.isfinite(flow_scale) or flow_scale <= 0:
            flow_scale = 1.0
        coords = graph.coords_km
        spread = float(np.max(np.abs(coords - coords.mean(axis=0)))) if coords.size else 0.0

        def positive_max(values: np.ndarray) -> float:
            top = float(np.max(values)) if values.size else 0.0
            return top if top > 0 else 1.0

        builder = cls(
            flow_scale=flow_scale,
            lanes_scale=positive_max(graph.lanes.astype(np.float64)),
            length_scale=positive_max(graph.length_m),
            betweenness_scale=positive_max(graph.betweenness),
            closeness_scale=positive_max(graph.closeness),
            coord_center=[float(v) for v in coords.mean(axis=0)] if coords.size else [0.0, 0.0],
            coord_scale=spread if spread > 0 else 1.0,
            speed_scale=positive_max(graph.free_flow_kmh().astype(np.float64)),
            intervals_per_day=world.field.intervals_per_day,
            epoch=world.field.epoch,
        )
        logger.info(f"🧩 Feature scalers fitted: flow_scale={flow_scale:.3f}")
        return builder

    # --- matrices ------------------------------------------------------------

    def temporal(self, times: np.ndarray) -> np.ndarray:
        times = np.asarray(times, dtype=np.int64)
        phase = 2.0 * np.pi * (times % self.intervals_per_day) / self.intervals_per_day
        weekday = (times // self.intervals_per_day + int(pd.Timestamp(self.epoch).dayofweek)) % 7
        onehot = np.zeros((times.size, 7))
        onehot[np.arange(times.size), weekday] = 1.0
        return np.column_stack([np.sin(phase), np.cos(phase), onehot])

    def static(self, world: SyntheticWorld) -> np.ndarray:
        """One row of static attributes per segment"""
        g = world.graph
        classes = np.zeros((g.n_segments, len(ROAD_CLASSES)))
        for i, c in enumerate(g.road_class):
            classes[i, ROAD_CLASSES.index(c)] = 1.0
        coords = (g.coords_km - np.asarray(self.coord_center)) / self.coord_scale
        return np.column_stack([
            classes,
            g.lanes / self.lanes_scale,
            g.length_m / self.length_scale,
            g.betweenness / self.betweenness_scale,
            g.closeness / self.closeness_scale,
            coords,
        ])

    def point_features(self, world: SyntheticWorld, segments: np.ndarray, times: np.ndarray,
                       drop: Iterable[str] = ()) -> np.ndarray:
        """Feature matrix with one row per (segment index, interval) pair"""
        drop = parse_drop(drop)
        segments = np.asarray(segments, dtype=np.int64).reshape(-1)
        times = np.asarray(times, dtype=np.int64).reshape(-1)
        if segments.shape != times.shape:
            raise ConfigError("segments and times must align")
        fcd = world.fcd
        avail = fcd.availability[segments, times].astype(np.float64)
        flow = np.where(avail > 0, fcd.fcd_flow[segments, times], 0.0) / self.flow_scale
        speed = np.where(avail > 0, fcd.fcd_speed[segments, times], 0.0) / self.speed_scale
        if FCD_FLOW in drop:
            flow = np.zeros_like(flow)
        if FCD_SPEED in drop:
            speed = np.zeros_like(speed)
        if drop == DROPPABLE:
            avail = np.zeros_like(avail)
        return np.column_stack([self.temporal(times), self.static(world)[segments], flow, speed, avail])

    def point(self, world: SyntheticWorld, segment: int, time: int, drop: Iterable[str] = ()) -> PointFeatures:
        row = self.point_features(world, [segment], [time], drop)[0]
        t_dim, s_dim = self.feature_split
        return PointFeatures.from_vector(row, t_dim, s_dim)

    def scale_flow(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) / self.flow_scale

    def unscale(self, mu: np.ndarray, sigma: np.ndarray):
        return np.asarray(mu) * self.flow_scale, np.asarray(sigma) * self.flow_scale

    # --- persistence ------------------------------------------------------------

    def to_manifest(self) -> Dict[str, str]:
        return {
            "feature.flow_scale": repr(self.flow_scale),
            "feature.lanes_scale": repr(self.lanes_scale),
            "feature.length_scale": repr(self.length_scale),
            "feature.betweenness_scale": repr(self.betweenness_scale),
            "feature.closeness_scale": repr(self.closeness_scale),
            "feature.coord_center": ",".join(repr(v) for v in self.coord_center),
            "feature.coord_scale": repr(self.coord_scale),
            "feature.speed_scale": repr(self.speed_scale),
            "feature.intervals_per_day": str(self.intervals_per_day),
            "feature.epoch": self.epoch,
        }

    @classmethod
    def from_manifest(cls, entries: Dict[str, str]) -> "FeatureBuilder":
        try:
            return cls(
                flow_scale=float(entries["feature.flow_scale"]),
                lanes_scale=float(entries["feature.lanes_scale"]),
                length_scale=float(entries["feature.length_scale"]),
                betweenness_scale=float(entries["feature.betweenness_scale"]),
                closeness_scale=float(entries["feature.closeness_scale"]),
                coord_center=[float(v) for v in entries["feature.coord_center"].split(",")],
                coord_scale=float(entries["feature.coord_scale"]),
                speed_scale=float(entries["feature.speed_scale"]),
                intervals_per_day=int(entries["feature.intervals_per_day"]),
                epoch=entries["feature.epoch"],
            )
        except (KeyError, ValueError) as e:
            raise ConfigError(f"feature scalers missing or malformed in manifest: {e}") from e
