"""
🎯 SCENARIO HARNESSES
Sensor placement, the damage/repair/addition lifecycle, and density / FCD
ablation sweeps over a trained model and a world.

Placement and lifecycle never retrain: every step re-infers with the same
parameters on a new sensing configuration, and the parameter checksum is
recorded per step.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, field_validator

from taanp.analytics.metrics import evaluate_predictions, retention_ratio
from taanp.analytics.uncertainty import UncertaintyConfig, evaluate_episodes
from taanp.diffcore import RngStream
from taanp.errors import ConfigError, ContractError, SkipEpisode
from taanp.features import FeatureBuilder, parse_drop
from taanp.npmodel import ForwardMode, ModelConfig, ModelParams, SubTask
from taanp.synthworld import SensorAssignment, SyntheticWorld, assign_sensors
from taanp.training import EpisodeSampler, Split, TrainingConfig, build_episode, paired_sign_test, train

logger = logging.getLogger(__name__)

STREAM_SCENARIO = 30
UNOBSERVED_TASKS = (SubTask.ESTIMATE_UNOBSERVED.value, SubTask.FORECAST_UNOBSERVED.value)


class StrategyKind(Enum):
    UNCERTAINTY_DESC = "uncertainty_desc"
    UNCERTAINTY_ASC = "uncertainty_asc"
    BETWEENNESS_DESC = "betweenness_desc"
    CLOSENESS_DESC = "closeness_desc"
    RANDOM = "random"


class EventKind(Enum):
    IDLE = "idle"
    DAMAGE = "damage"
    REPAIR = "repair"
    ADD = "add"


@dataclass
class PlacementStrategy:
    kind: StrategyKind
    batch_size: int = 4

    def __post_init__(self):
        self.kind = StrategyKind(self.kind)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


class Stage(BaseModel):
    kind: EventKind
    days: int = 1
    per_day_count: Optional[int] = None

    @field_validator("days")
    @classmethod
    def _days(cls, v: int) -> int:
        if v < 0:
            raise ValueError("days must be >= 0")
        return v


class PlacementConfig(BaseModel):
    strategies: List[StrategyKind] = list(StrategyKind)
    batch_size: int = 4
    rounds: int = 8
    seeds: int = 10
    eval_windows: int = 8
    fine_tune: bool = False


class LifecycleConfig(BaseModel):
    stages: List[Stage] = [
        Stage(kind=EventKind.IDLE, days=2),
        Stage(kind=EventKind.DAMAGE, days=3),
        Stage(kind=EventKind.REPAIR, days=3),
        Stage(kind=EventKind.ADD, days=3),
        Stage(kind=EventKind.IDLE, days=1),
    ]
    daily_fraction: float = 0.05
    windows_per_day: int = 6


class SweepConfig(BaseModel):
    ratios: List[float] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    seeds: int = 5
    eval_windows: int = 16
    drop_fcd: List[str] = []
    n_jobs: int = 1

    @field_validator("ratios")
    @classmethod
    def _ratios(cls, v: List[float]) -> List[float]:
        if any(not 0.0 < r < 1.0 for r in v):
            raise ValueError("every ratio must lie in (0, 1)")
        return v


class FcdAblationConfig(BaseModel):
    drops: List[List[str]] = [[], ["fcd_flow"], ["fcd_speed"], ["fcd_flow", "fcd_speed"]]
    seeds: int = 5
    eval_windows: int = 16
    penetration_edges: List[float] = [0.0, 0.03, 0.05, 0.07, 0.1, 1.0]
    n_jobs: int = 1


class ScenarioConfig(BaseModel):
    placement: PlacementConfig = PlacementConfig()
    lifecycle: LifecycleConfig = LifecycleConfig()
    sweep: SweepConfig = SweepConfig()
    fcd_ablation: FcdAblationConfig = FcdAblationConfig()
    seed: int = 0


@dataclass
class ScenarioReport:
    scenario_id: str
    kind: str
    records: List[Dict[str, Any]] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)

    def add(self, **values) -> None:
        self.records.append({"record": "scenario_step", "scenario_id": self.scenario_id, "kind": self.kind, **values})

    def to_records(self) -> List[Dict[str, Any]]:
        return self.records + [{"record": "scenario_summary", "scenario_id": self.scenario_id,
                                "kind": self.kind, **self.summary}]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records)


# --- shared helpers -------------------------------------------------------------------------------

def sensing_state(world: SyntheticWorld, observed: Sequence[int]) -> SensorAssignment:
    observed = np.unique(np.asarray(observed, dtype=np.int64))
    if observed.size < 1 or observed.size >= world.n_segments:
        raise ContractError("a sensing state needs 1 <= |observed| < |segments|")
    return SensorAssignment(observed, world.n_segments, 1.0 - observed.size / world.n_segments)


def evaluation_windows(sampler: EpisodeSampler, count: int) -> np.ndarray:
    """Evenly spaced test-period windows"""
    windows = sampler.test_windows()
    if windows.size == 0:
        raise ConfigError("test period too short for the history and horizon")
    if count >= windows.size:
        return windows
    return windows[np.unique(np.linspace(0, windows.size - 1, count).round().astype(np.int64))]


def evaluation_episodes(sampler: EpisodeSampler, windows: Sequence[int]):
    episodes = []
    for t0 in windows:
        try:
            episodes.append(build_episode(sampler, int(t0), None, Split.TEST))
        except SkipEpisode as e:
            logger.warning(f"⚠️ Skipping evaluation episode: {e}")
    return episodes


def evaluate_state(params: ModelParams, sampler: EpisodeSampler, windows: Sequence[int],
                   config: UncertaintyConfig, seed: int,
                   mode: ForwardMode = ForwardMode.INFER_MC) -> pd.DataFrame:
    """Per-target evaluation frame (flow units) for the sampler's current sensing state"""
    episodes = evaluation_episodes(sampler, windows)
    return evaluate_episodes(params, episodes, config, seed, sampler.features.flow_scale, mode)


def task_metrics(frame: pd.DataFrame, qice_bins: int = 10) -> Dict[str, Dict[str, Any]]:
    """Pooled ("all") and per-task metric dictionaries"""
    reports = evaluate_predictions(frame, ["task"], qice_bins)
    return {r.keys["task"]: r.to_record() for r in reports}


def order_by_score(candidates: np.ndarray, scores: np.ndarray, descending: bool) -> np.ndarray:
    """Sort candidates by score; equal scores fall back to ascending segment index"""
    candidates = np.asarray(candidates, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    keys = -scores if descending else scores
    return candidates[np.lexsort((candidates, keys))]


# --- placement -------------------------------------------------------------------------------------

def uncertainty_scores(params: ModelParams, sampler: EpisodeSampler, windows: Sequence[int],
                       config: UncertaintyConfig, seed: int) -> pd.Series:
    """Time-averaged total predictive std per unobserved segment"""
    frame = evaluate_state(params, sampler, windows, config, seed)
    frame = frame[frame["task"].isin(UNOBSERVED_TASKS)]
    return frame.groupby("segment")["sigma"].mean()


def rank_candidates(params: ModelParams, sampler: EpisodeSampler, strategy: PlacementStrategy,
                    rng: RngStream, windows: Sequence[int] = (), config: Optional[UncertaintyConfig] = None,
                    seed: int = 0) -> np.ndarray:
    """Unobserved segments ordered by the strategy's priority"""
    candidates = sampler.unobserved
    if candidates.size == 0:
        raise ContractError("no unobserved segment to rank")
    graph = sampler.world.graph
    kind = strategy.kind
    if kind is StrategyKind.RANDOM:
        return candidates[rng.permutation(candidates.size)]
    if kind is StrategyKind.BETWEENNESS_DESC:
        return order_by_score(candidates, graph.betweenness[candidates], True)
    if kind is StrategyKind.CLOSENESS_DESC:
        return order_by_score(candidates, graph.closeness[candidates], True)
    scores = uncertainty_scores(params, sampler, windows, config or UncertaintyConfig(), seed)
    values = scores.reindex(candidates).fillna(0.0).to_numpy()
    return order_by_score(candidates, values, kind is StrategyKind.UNCERTAINTY_DESC)


def run_placement(params: ModelParams, sampler: EpisodeSampler, strategy: PlacementStrategy, rounds: int,
                  seed: int = 0, eval_windows: int = 8, config: Optional[UncertaintyConfig] = None,
                  fine_tune: Optional[TrainingConfig] = None) -> ScenarioReport:
    """Add batch_size sensors per round by strategy priority and re-infer without retraining"""
    config = config or UncertaintyConfig()
    windows = evaluation_windows(sampler, eval_windows)
    rng = RngStream(seed, STREAM_SCENARIO, (1,))
    report = ScenarioReport(f"placement-{strategy.kind.value}-{seed}", "placement")
    logger.info(f"🎯 Placement {strategy.kind.value} (seed {seed}): {sampler.observed.size} sensors deployed")

    current = sampler
    for round_ in range(rounds + 1):
        frame = evaluate_state(params, current, windows, config, seed)
        metrics = task_metrics(frame, config.qice_bins)
        pooled = metrics["all"]
        report.add(round=round_, n_observed=int(current.observed.size),
                   unobserved_ratio=current.unobserved.size / current.world.n_segments,
                   r2=pooled["r2"], rmse=pooled["rmse"], mae=pooled["mae"],
                   tasks={k: {"r2": v["r2"], "rmse": v["rmse"]} for k, v in metrics.items() if k != "all"},
                   param_checksum=params.checksum(), fine_tuned=fine_tune is not None)
        if round_ == rounds or current.unobserved.size == 0:
            break
        ranked = rank_candidates(params, current, strategy, rng.derive(round_), windows, config, seed)
        added = ranked[:strategy.batch_size]
        observed = np.union1d(current.observed, added)
        if observed.size >= current.world.n_segments:
            logger.info("🎯 Candidate pool exhausted")
            break
        current = current.with_sensors(sensing_state(current.world, observed))
        if fine_tune is not None:
            params = train(params.copy(), current, fine_tune.model_copy(update={"max_epochs": 1})).params
        report.records[-1]["added"] = [int(current.world.graph.segment_ids[i]) for i in added]

    last = report.records[-1]
    report.summary = {"strategy": strategy.kind.value, "seed": seed, "final_r2": last["r2"],
                      "final_n_observed": last["n_observed"], "rounds": last["round"],
                      "sensors_for_r2_0.8": sensors_to_reach(report.frame())}
    logger.info(f"✅ Placement {strategy.kind.value} done: final R2={last['r2']}")
    return report


def sensors_to_reach(frame: pd.DataFrame, metric: str = "r2", threshold: float = 0.8) -> Optional[int]:
    """Smallest deployed-sensor count at which the metric reaches the threshold"""
    if metric not in frame:
        raise ConfigError(f"unknown metric column '{metric}'")
    hits = frame[frame[metric].astype(float) >= threshold]
    return None if hits.empty else int(hits["n_observed"].min())


def strategy_sign_test(final_r2: Dict[str, Sequence[float]]) -> Dict[str, Any]:
    """p-values for uncertainty_desc ≥ random ≥ uncertainty_asc over paired seeds"""
    desc = final_r2[StrategyKind.UNCERTAINTY_DESC.value]
    rand = final_r2[StrategyKind.RANDOM.value]
    asc = final_r2[StrategyKind.UNCERTAINTY_ASC.value]
    upper = paired_sign_test(desc, rand)
    lower = paired_sign_test(rand, asc)
    return {"desc_vs_random_p": upper.p_value, "random_vs_asc_p": lower.p_value,
            "mean_final_r2": {k: float(np.mean(v)) for k, v in final_r2.items()}}


# --- lifecycle -------------------------------------------------------------------------------------

@dataclass
class LifecycleState:
    """Observed set plus the FIFO queue of damaged sensors"""
    observed: List[int]
    never_instrumented: List[int]
    damaged: deque = field(default_factory=deque)

    def damage(self, count: int, rng: RngStream) -> List[int]:
        if count >= len(self.observed):
            raise ConfigError("damage would remove every remaining sensor")
        pool = np.array(sorted(self.observed))
        victims = [int(v) for v in pool[rng.choice(pool.size, size=count, replace=False)]]
        for v in victims:
            self.observed.remove(v)
            self.damaged.append(v)
        return victims

    def repair(self, count: int) -> List[int]:
        if count > len(self.damaged):
            raise ConfigError("repairs exceed accumulated damage")
        restored = [self.damaged.popleft() for _ in range(count)]
        self.observed.extend(restored)
        return restored

    def add(self, count: int, rng: RngStream) -> List[int]:
        if count > len(self.never_instrumented):
            raise ConfigError("additions exceed the never-instrumented pool")
        pool = np.array(sorted(self.never_instrumented))
        added = [int(v) for v in pool[rng.choice(pool.size, size=count, replace=False)]]
        for a in added:
            self.never_instrumented.remove(a)
        self.observed.extend(added)
        return added


def daily_count(stage: Stage, n_observed: int, fraction: float) -> int:
    if stage.per_day_count is not None:
        return int(stage.per_day_count)
    return int(math.ceil(fraction * n_observed))


def validate_schedule(stages: Sequence[Stage], n_observed: int, n_unobserved: int, fraction: float) -> None:
    """Dry-run the counts so inconsistencies fail before any compute"""
    observed, damaged, pool = n_observed, 0, n_unobserved
    for i, stage in enumerate(stages):
        count = daily_count(stage, n_observed, fraction)
        if count < 0:
            raise ConfigError(f"stage {i}: negative per-day count")
        for _ in range(stage.days):
            if stage.kind is EventKind.DAMAGE:
                if count >= observed:
                    raise ConfigError(f"stage {i}: damage would remove every remaining sensor")
                observed, damaged = observed - count, damaged + count
            elif stage.kind is EventKind.REPAIR:
                if count > damaged:
                    raise ConfigError(f"stage {i}: repairs exceed accumulated damage")
                observed, damaged = observed + count, damaged - count
            elif stage.kind is EventKind.ADD:
                if count > pool or observed + count >= n_observed + n_unobserved:
                    raise ConfigError(f"stage {i}: additions exceed the never-instrumented pool")
                observed, pool = observed + count, pool - count


def day_windows(sampler: EpisodeSampler, per_day: int) -> List[np.ndarray]:
    """Evaluation windows grouped by test-period day"""
    windows = sampler.test_windows()
    per_day_intervals = sampler.world.field.intervals_per_day
    days = []
    for day in np.unique(windows // per_day_intervals):
        in_day = windows[windows // per_day_intervals == day]
        pick = np.unique(np.linspace(0, in_day.size - 1, min(per_day, in_day.size)).round().astype(np.int64))
        days.append(in_day[pick])
    if not days:
        raise ConfigError("test period too short for the history and horizon")
    return days


def _pooled_rrmse(frame: pd.DataFrame, qice_bins: int) -> Dict[str, Optional[float]]:
    return {k: v["rrmse"] for k, v in task_metrics(frame, qice_bins).items()}


def run_lifecycle(params: ModelParams, sampler: EpisodeSampler, stages: Sequence[Stage], seed: int = 0,
                  config: Optional[UncertaintyConfig] = None, daily_fraction: float = 0.05,
                  windows_per_day: int = 6) -> ScenarioReport:
    """Daily damage/repair/addition events with retention ratio against the undisturbed baseline"""
    config = config or UncertaintyConfig()
    n_observed = int(sampler.observed.size)
    validate_schedule(stages, n_observed, int(sampler.unobserved.size), daily_fraction)
    test_days = day_windows(sampler, windows_per_day)
    state = LifecycleState([int(v) for v in sampler.observed], [int(v) for v in sampler.unobserved])
    rng = RngStream(seed, STREAM_SCENARIO, (2,))
    report = ScenarioReport(f"lifecycle-{seed}", "lifecycle")

    plan = [(stage, i) for i, stage in enumerate(stages) for _ in range(stage.days)]
    if not plan:
        plan = [(Stage(kind=EventKind.IDLE, days=1), -1)]
    baselines: Dict[int, Dict[str, Optional[float]]] = {}
    logger.info(f"🔁 Lifecycle over {len(plan)} days starting from {n_observed} sensors")

    for day, (stage, stage_index) in enumerate(plan):
        count = daily_count(stage, n_observed, daily_fraction)
        event_rng = rng.derive(day)
        if stage.kind is EventKind.DAMAGE:
            affected = state.damage(count, event_rng)
        elif stage.kind is EventKind.REPAIR:
            affected = state.repair(count)
        elif stage.kind is EventKind.ADD:
            affected = state.add(count, event_rng)
        else:
            affected = []

        test_day = day % len(test_days)
        windows = test_days[test_day]
        eval_seed = seed * 1000 + test_day
        if test_day not in baselines:
            baselines[test_day] = _pooled_rrmse(evaluate_state(params, sampler, windows, config, eval_seed),
                                                config.qice_bins)
        current = sampler.with_sensors(sensing_state(sampler.world, state.observed))
        now = _pooled_rrmse(evaluate_state(params, current, windows, config, eval_seed), config.qice_bins)
        retention = {}
        for key, base in baselines[test_day].items():
            value = now.get(key)
            retention[key] = None if not base or not value else retention_ratio(value, base)
        report.add(day=day + 1, stage=stage.kind.value, stage_index=stage_index, event_count=len(affected),
                   affected=[int(sampler.world.graph.segment_ids[i]) for i in affected],
                   n_observed=len(state.observed), test_day=test_day, rrmse=now.get("all"),
                   retention=retention.get("all"), task_retention={k: v for k, v in retention.items() if k != "all"},
                   param_checksum=params.checksum())

    report.summary = {"days": len(plan), "final_n_observed": len(state.observed),
                      "min_retention": min((r["retention"] for r in report.records if r["retention"] is not None),
                                           default=None)}
    logger.info(f"✅ Lifecycle done: min retention {report.summary['min_retention']}")
    return report


# --- sweeps ----------------------------------------------------------------------------------------

def _train_and_evaluate(world: SyntheticWorld, sensors: SensorAssignment, drop: Sequence[str],
                        model_config: ModelConfig, training: TrainingConfig, config: UncertaintyConfig,
                        seed: int, eval_windows: int) -> pd.DataFrame:
    """Fresh model on one sensing configuration; per-target test frame"""
    world = world.with_sensors(sensors)
    training = training.model_copy(update={"seed": seed, "drop_fcd": list(drop)})
    sampler = EpisodeSampler.from_config(world, FeatureBuilder.fit(world), training)
    params = ModelParams.init(model_config.model_copy(update={"x_dim": sampler.features.dim}), seed)
    trained = train(params, sampler, training).params
    return evaluate_state(trained, sampler, evaluation_windows(sampler, eval_windows), config, seed)


def _summarize(frame: pd.DataFrame, keys: Dict[str, Any], qice_bins: int) -> List[Dict[str, Any]]:
    return [{"record": "scenario_step", **keys, **{k: v for k, v in r.to_record().items() if k != "record"}}
            for r in evaluate_predictions(frame, ["task"], qice_bins)]


def run_density_sweep(world: SyntheticWorld, model_config: ModelConfig, training: TrainingConfig,
                      sweep: SweepConfig, config: Optional[UncertaintyConfig] = None,
                      seed: int = 0) -> ScenarioReport:
    """Train and evaluate at every unobserved ratio × seed (independent jobs)"""
    config = config or UncertaintyConfig()
    drop = sorted(parse_drop(sweep.drop_fcd))
    jobs = [(ratio, s) for ratio in sweep.ratios for s in range(seed, seed + sweep.seeds)]
    logger.info(f"📊 Density sweep: {len(jobs)} jobs over ratios {sweep.ratios}")
    frames = Parallel(n_jobs=sweep.n_jobs)(
        delayed(_train_and_evaluate)(world, assign_sensors(world.graph, ratio, s), drop, model_config,
                                     training, config, s, sweep.eval_windows)
        for ratio, s in jobs)
    report = ScenarioReport(f"sweep-{seed}", "density_sweep")
    for (ratio, s), frame in zip(jobs, frames):
        for record in _summarize(frame, {"ratio": ratio, "seed": s, "drop": drop}, config.qice_bins):
            report.records.append({**record, "scenario_id": report.scenario_id, "kind": report.kind})
    table = report.frame()
    pooled = table[table["task"] != "all"].groupby(["ratio", "task"])["mae"].mean()
    report.summary = {"mean_mae": {f"{r}|{t}": v for (r, t), v in pooled.items()}}
    return report


def penetration_binning(frame: pd.DataFrame, penetration: np.ndarray, edges: Sequence[float],
                        tasks: Sequence[str] = UNOBSERVED_TASKS) -> pd.DataFrame:
    """Segment-wise RRMSE distribution per penetration-rate bin"""
    rows = frame[frame["valid"] & frame["task"].isin(list(tasks))].copy()
    rows["penetration"] = np.asarray(penetration)[rows["segment"].to_numpy()]
    rows["sq"] = (rows["y_true"] - rows["mu"]) ** 2
    per_segment = rows.groupby("segment").agg(penetration=("penetration", "first"), sq=("sq", "mean"),
                                              level=("y_true", "mean"), samples=("y_true", "size"))
    per_segment = per_segment[per_segment["level"] > 0]
    per_segment["rrmse"] = 100.0 * np.sqrt(per_segment["sq"]) / per_segment["level"]
    edges = [float(e) for e in edges]
    per_segment["bin"] = pd.cut(per_segment["penetration"], bins=edges, include_lowest=True, labels=False)
    out = []
    for i, (low, high) in enumerate(zip(edges[:-1], edges[1:])):
        part = per_segment[per_segment["bin"] == i]
        out.append({
            "bin_low": low, "bin_high": high,
            "n_segments": int(len(part)), "n_samples": int(part["samples"].sum()),
            "median": float(part["rrmse"].median()) if len(part) else None,
            "q1": float(part["rrmse"].quantile(0.25)) if len(part) else None,
            "q3": float(part["rrmse"].quantile(0.75)) if len(part) else None,
        })
    # object columns keep None for empty bins
    return pd.DataFrame(out, columns=["bin_low", "bin_high", "n_segments", "n_samples", "median", "q1", "q3"],
                        dtype=object)


def run_fcd_ablation(world: SyntheticWorld, model_config: ModelConfig, training: TrainingConfig,
                     ablation: FcdAblationConfig, config: Optional[UncertaintyConfig] = None,
                     seed: int = 0, unobserved_ratio: float = 0.6) -> ScenarioReport:
    """Per-subtask metrics for every FCD drop set, same sensor split per seed"""
    config = config or UncertaintyConfig()
    drops = [sorted(parse_drop(d)) for d in ablation.drops]
    jobs = [(d, s) for d in drops for s in range(seed, seed + ablation.seeds)]
    logger.info(f"📊 FCD ablation: {len(jobs)} jobs")
    frames = Parallel(n_jobs=ablation.n_jobs)(
        delayed(_train_and_evaluate)(world, assign_sensors(world.graph, unobserved_ratio, s), d, model_config,
                                     training, config, s, ablation.eval_windows)
        for d, s in jobs)
    report = ScenarioReport(f"fcd-ablation-{seed}", "fcd_ablation")
    penetration = world.penetration_by_segment()
    for (d, s), frame in zip(jobs, frames):
        keys = {"drop": "+".join(d) or "none", "seed": s}
        for record in _summarize(frame, keys, config.qice_bins):
            report.records.append({**record, "scenario_id": report.scenario_id, "kind": report.kind})
        for row in penetration_binning(frame, penetration, ablation.penetration_edges).to_dict("records"):
            report.records.append({"record": "penetration_bin", "scenario_id": report.scenario_id,
                                   "kind": report.kind, **keys, **row})
    table = report.frame()
    steps = table[(table["record"] == "scenario_step") & (table["task"] == SubTask.ESTIMATE_UNOBSERVED.value)]
    report.summary = {"estimate_unobserved_mae": steps.groupby("drop")["mae"].mean().to_dict()}
    return report
