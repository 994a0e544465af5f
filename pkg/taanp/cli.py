"""
🚦 TAANP COMMAND LINE
Subcommands synth, train, eval, place, resilience, sweep and rerun.

Every run writes resolved_config.json and run_manifest.json next to its
reports; reports are line-delimited JSON records behind a versioned header.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ValidationError

import taanp
from taanp.analytics.metrics import evaluate_predictions, pit_histogram
from taanp.analytics.scenarios import (PlacementStrategy, ScenarioConfig, StrategyKind, evaluation_episodes,
                                       evaluation_windows, run_density_sweep, run_fcd_ablation, run_lifecycle,
                                       run_placement, strategy_sign_test)
from taanp.analytics.uncertainty import UncertaintyConfig, error_rejection_curve, evaluate_episodes, pcv_binning
from taanp.errors import EXIT_OK, ConfigError, IntegrityError, TaanpError, exit_code_for
from taanp.features import FeatureBuilder
from taanp.npmodel import ForwardMode, ModelConfig, ModelParams, Variant
from taanp.synthworld import SyntheticWorld, WorldConfig, assign_sensors, generate_world, load_dataset, save_dataset
from taanp.training import (Ablation, EpisodeSampler, EpochRecord, TrainingConfig, TrainingState,
                            ablation_variant, train)
from taanp.utils.checkpoint import load_checkpoint, save_checkpoint
from taanp.utils.records import RunManifest, config_hash, write_json_atomic, write_records

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "TAANP_OUTPUT_ROOT"
COMMANDS = ["synth", "train", "eval", "place", "resilience", "sweep", "rerun"]


class EvalConfig(BaseModel):
    windows: Optional[int] = 32
    pit_bins: int = 10
    pcv_analysis: bool = True


class RunConfig(BaseModel):
    """Every section a command may need, plus run-wide settings"""
    world: WorldConfig = WorldConfig()
    model: ModelConfig = ModelConfig()
    training: TrainingConfig = TrainingConfig()
    uncertainty: UncertaintyConfig = UncertaintyConfig()
    scenario: ScenarioConfig = ScenarioConfig()
    eval: EvalConfig = EvalConfig()
    ablation: Ablation = Ablation.FULL
    seed: int = 0
    out_dir: Optional[str] = None
    dataset_dir: Optional[str] = None
    checkpoint: Optional[str] = None


# --- configuration ------------------------------------------------------------------------------

def _section(raw: Dict[str, Any], name: str) -> Dict[str, Any]:
    raw.setdefault(name, {})
    if not isinstance(raw[name], dict):
        raise ConfigError(f"config section '{name}' must be an object")
    return raw[name]


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file (JSON) with CLI flags layered on top, validated as a whole"""
    raw: Dict[str, Any] = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
        for name in ("world", "model", "training", "scenario"):
            _section(raw, name)["seed"] = args.seed
    if getattr(args, "variant", None):
        _section(raw, "model")["variant"] = args.variant
    if getattr(args, "k_samples", None) is not None:
        _section(raw, "uncertainty")["k_samples"] = args.k_samples
    if getattr(args, "ablation", None):
        raw["ablation"] = args.ablation
    for flag in ("dataset", "checkpoint"):
        value = getattr(args, flag, None)
        if value:
            raw["dataset_dir" if flag == "dataset" else "checkpoint"] = value
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def output_dir(args: argparse.Namespace, config: RunConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if config.out_dir:
        return Path(config.out_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / args.command


def load_world(config: RunConfig) -> SyntheticWorld:
    """Dataset files when configured, else the synthetic world; sensors from the world config"""
    if config.dataset_dir:
        world = load_dataset(config.dataset_dir)
        return world.with_sensors(assign_sensors(world.graph, config.world.unobserved_ratio, config.world.seed))
    return generate_world(config.world)


def _require_checkpoint(config: RunConfig) -> str:
    if not config.checkpoint:
        raise ConfigError("this command needs --checkpoint")
    return config.checkpoint


def _inference_mode(config: RunConfig) -> ForwardMode:
    setup = ablation_variant(config.model, config.training, config.ablation)
    return setup.inference_mode


# --- commands -----------------------------------------------------------------------------------------

def cmd_synth(config: RunConfig, out: Path, args: argparse.Namespace) -> List[Path]:
    logger.info(f"🌍 Generating world: {config.world.n_segments} segments × {config.world.horizon_days} days")
    world = generate_world(config.world)
    return [Path(p) for p in save_dataset(world, str(out / "world"))]


def _training_state_meta(state: TrainingState) -> Dict[str, str]:
    history = [r.as_record() for r in state.history]
    return {"epoch": str(state.epoch), "optimizer_step": str(state.optimizer_step), "best_val": repr(state.best_val),
            "best_epoch": str(state.best_epoch), "bad_epochs": str(state.bad_epochs),
            "history": json.dumps(history, separators=(",", ":"))}


def _load_training_state(path: str):
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    try:
        history = [EpochRecord(**{k: v for k, v in r.items() if k != "record"}) for r in json.loads(meta["history"])]
        state = TrainingState(epoch=int(meta["epoch"]), optimizer_step=int(meta["optimizer_step"]),
                              best_val=float(meta["best_val"]), best_epoch=int(meta["best_epoch"]),
                              bad_epochs=int(meta["bad_epochs"]), history=history)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"{path} is not a training-state checkpoint: {e}") from e
    state.optimizer = {k: v for k, v in ckpt.extra_tensors.items() if k.startswith("adam.")}
    state.best_state = {k[len("best."):]: v for k, v in ckpt.extra_tensors.items() if k.startswith("best.")}
    return ckpt, state


def cmd_train(config: RunConfig, out: Path, args: argparse.Namespace) -> List[Path]:
    setup = ablation_variant(config.model, config.training, config.ablation)
    world = load_world(config)
    train_end = int(np.floor(setup.training.train_fraction * world.n_intervals))
    resume = None
    if getattr(args, "resume", None):
        ckpt, resume = _load_training_state(args.resume)
        params, features = ckpt.params, ckpt.features
    else:
        features = FeatureBuilder.fit(world, time_limit=train_end)
        model_config = setup.model.model_copy(update={"x_dim": features.dim})
        params = ModelParams.init(ModelConfig.model_validate(model_config.model_dump()))
    sampler = EpisodeSampler.from_config(world, features, setup.training)
    state_path = out / "training_state.ckpt"

    def checkpoint_fn(state: TrainingState, current: ModelParams) -> None:
        extras = dict(state.optimizer)
        extras.update({f"best.{k}": v for k, v in state.best_state.items()})
        save_checkpoint(state_path, current, features, extras, _training_state_meta(state))

    result = train(params, sampler, setup.training, log_path=out / "training_log.jsonl", resume=resume,
                   checkpoint_fn=checkpoint_fn)
    model_path, blob = save_checkpoint(out / "model.ckpt", result.params, features,
                                       meta={"best_epoch": str(result.best_epoch), "ablation": config.ablation.value})
    return [model_path, blob]


def _eval_frame(config: RunConfig):
    ckpt = load_checkpoint(_require_checkpoint(config))
    world = load_world(config)
    sampler = EpisodeSampler.from_config(world, ckpt.features, config.training)
    windows = (sampler.test_windows() if config.eval.windows is None
               else evaluation_windows(sampler, config.eval.windows))
    episodes = evaluation_episodes(sampler, windows)
    frame = evaluate_episodes(ckpt.params, episodes, config.uncertainty, config.seed,
                              ckpt.features.flow_scale, _inference_mode(config))
    return ckpt, frame


def cmd_eval(config: RunConfig, out: Path, args: argparse.Namespace) -> List[Path]:
    logger.info(f"📊 Evaluating with K={config.uncertainty.k_samples}")
    _, frame = _eval_frame(config)
    reports = evaluate_predictions(frame, ["task"], config.uncertainty.qice_bins)
    reports += evaluate_predictions(frame, ["task", "horizon"], config.uncertainty.qice_bins)[1:]
    records = [r.to_record() for r in reports]
    for task, part in frame.groupby("task", sort=True):
        counts = pit_histogram(part["pit"].to_numpy(), config.eval.pit_bins, part["valid"].to_numpy())
        records.append({"record": "pit_histogram", "task": task, "counts": counts.tolist()})
    if config.eval.pcv_analysis:
        valid = frame["valid"].to_numpy()
        bins = pcv_binning(frame["pcv"][valid], frame["y_true"][valid], frame["mu"][valid],
                           config.uncertainty.pcv_edges)
        records += [{"record": "pcv_bin", **row} for row in bins.to_dict("records")]
        curve = error_rejection_curve(frame["pcv"], frame["y_true"], frame["mu"],
                                      config.uncertainty.rejection_fractions, frame["valid"])
        records += [{"record": "error_rejection", **row} for row in curve.to_dict("records")]
    paths = [write_records(out / "metrics.jsonl", records, kind="metrics")]
    if getattr(args, "plots", False):
        from taanp.analytics.plots import render_pit_histogram
        render_pit_histogram(records, out / "pit_histogram.png")
    logger.info(f"✅ Evaluation written: {paths[0]}")
    return paths


def _placement_job(config: RunConfig, kind: StrategyKind, seed: int):
    ckpt = load_checkpoint(_require_checkpoint(config))
    sampler = EpisodeSampler.from_config(load_world(config), ckpt.features, config.training)
    placement = config.scenario.placement
    fine_tune = config.training if placement.fine_tune else None
    return run_placement(ckpt.params, sampler, PlacementStrategy(kind, placement.batch_size), placement.rounds,
                         seed, placement.eval_windows, config.uncertainty, fine_tune)


def cmd_place(config: RunConfig, out: Path, args: argparse.Namespace) -> List[Path]:
    placement = config.scenario.placement
    kinds = [StrategyKind(s) for s in args.strategy] if getattr(args, "strategy", None) else placement.strategies
    seeds = range(config.scenario.seed, config.scenario.seed + placement.seeds)
    jobs = [(k, s) for k in kinds for s in seeds]
    logger.info(f"🎯 Placement: {len(kinds)} strategies × {placement.seeds} seeds")
    reports = Parallel(n_jobs=config.uncertainty.n_jobs)(delayed(_placement_job)(config, k, s) for k, s in jobs)
    records = [r for report in reports for r in report.to_records()]
    final: Dict[str, List[float]] = {}
    for report in reports:
        final.setdefault(report.summary["strategy"], []).append(report.summary["final_r2"])
    wanted = {StrategyKind.UNCERTAINTY_DESC.value, StrategyKind.RANDOM.value, StrategyKind.UNCERTAINTY_ASC.value}
    if wanted <= set(final):
        records.append({"record": "strategy_sign_test", **strategy_sign_test(final)})
    paths = [write_records(out / "placement.jsonl", records, kind="placement")]
    if getattr(args, "plots", False):
        from taanp.analytics.plots import render_scenario_curve
        render_scenario_curve(records, "r2", out / "placement_r2.png")
    return paths


def cmd_resilience(config: RunConfig, out: Path, args: argparse.Namespace) -> List[Path]:
    ckpt = load_checkpoint(_require_checkpoint(config))
    sampler = EpisodeSampler.from_config(load_world(config), ckpt.features, config.training)
    lifecycle = config.scenario.lifecycle
    report = run_lifecycle(ckpt.params, sampler, lifecycle.stages, config.scenario.seed, config.uncertainty,
                           lifecycle.daily_fraction, lifecycle.windows_per_day)
    records = report.to_records()
    paths = [write_records(out / "lifecycle.jsonl", records, kind="lifecycle")]
    if getattr(args, "plots", False):
        from taanp.analytics.plots import render_scenario_curve
        render_scenario_curve(records, "retention", out / "lifecycle_retention.png", x="day")
    return paths


def cmd_sweep(config: RunConfig, out: Path, args: argparse.Namespace) -> List[Path]:
    world = load_world(config)
    setup = ablation_variant(config.model, config.training, config.ablation)
    if getattr(args, "kind", "density") == "fcd":
        report = run_fcd_ablation(world, setup.model, setup.training, config.scenario.fcd_ablation,
                                  config.uncertainty, config.scenario.seed, config.world.unobserved_ratio)
    else:
        report = run_density_sweep(world, setup.model, setup.training, config.scenario.sweep,
                                   config.uncertainty, config.scenario.seed)
    return [write_records(out / "sweep.jsonl", report.to_records(), kind=report.kind)]


HANDLERS: Dict[str, Callable[[RunConfig, Path, argparse.Namespace], List[Path]]] = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "place": cmd_place,
    "resilience": cmd_resilience,
    "sweep": cmd_sweep,
}


def cmd_rerun(args: argparse.Namespace) -> int:
    """Re-execute a manifest's command into a fresh directory and compare output digests"""
    manifest_path = Path(args.manifest)
    manifest = RunManifest.load(manifest_path)
    out = Path(args.out) if args.out else manifest_path.parent / "rerun"
    argv = _strip_out(manifest.argv) + ["--out", str(out)]
    logger.info(f"🔁 Re-running: {' '.join(argv)}")
    code = main(argv)
    if code != EXIT_OK:
        return code
    rerun = RunManifest.load(out / "run_manifest.json")
    mismatched = sorted(name for name, digest in manifest.files.items() if rerun.files.get(name) != digest)
    if mismatched:
        raise IntegrityError(f"re-run outputs differ: {', '.join(mismatched)}")
    logger.info(f"✅ Re-run reproduced {len(manifest.files)} files byte-identically")
    return EXIT_OK


def _strip_out(argv: List[str]) -> List[str]:
    cleaned, skip = [], False
    for item in argv:
        if skip:
            skip = False
            continue
        if item == "--out":
            skip = True
            continue
        if item.startswith("--out="):
            continue
        cleaned.append(item)
    return cleaned


# --- entry point ----------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taanp", description="Task-aware neural processes for traffic flow")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides every seed in the config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        return p

    def model_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--dataset", help="dataset directory (default: generate from the world config)")
        p.add_argument("--variant", choices=[v.value for v in Variant])
        p.add_argument("--ablation", choices=[a.value for a in Ablation])
        p.add_argument("--k-samples", dest="k_samples", type=int)

    common(sub.add_parser("synth", help="generate and write a synthetic world"))
    p = common(sub.add_parser("train", help="train a model and write a checkpoint"))
    model_flags(p)
    p.add_argument("--resume", help="training_state.ckpt to continue from")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint on held-out times and virtual sensors"))
    model_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--plots", action="store_true", help="also render the PIT histogram")
    p = common(sub.add_parser("place", help="uncertainty-guided sensor placement"))
    model_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--strategy", action="append", choices=[s.value for s in StrategyKind])
    p.add_argument("--plots", action="store_true", help="also render R2 against deployed sensors")
    p = common(sub.add_parser("resilience", help="damage / repair / addition lifecycle"))
    model_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--plots", action="store_true", help="also render retention per day")
    p = common(sub.add_parser("sweep", help="density sweep or FCD ablation (trains per job)"))
    model_flags(p)
    p.add_argument("--kind", choices=["density", "fcd"], default="density")
    p = sub.add_parser("rerun", help="re-execute a run manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--out")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO)
    logging.getLogger().setLevel(args.log_level)

    if args.command == "rerun":
        try:
            return cmd_rerun(args)
        except Exception as e:
            logger.error(f"❌ rerun failed: {e}")
            return exit_code_for(e)

    manifest: Optional[RunManifest] = None
    out: Optional[Path] = None
    try:
        config = resolve_config(args)
        out = output_dir(args, config)
        out.mkdir(parents=True, exist_ok=True)
        resolved = config.model_dump(mode="json")
        write_json_atomic(out / "resolved_config.json", resolved)
        manifest = RunManifest(command=args.command, argv=argv, config_hash=config_hash(resolved),
                               version=taanp.__version__,
                               seeds={"seed": config.seed, "world": config.world.seed,
                                      "training": config.training.seed, "scenario": config.scenario.seed})
        outputs = HANDLERS[args.command](config, out, args)
        manifest.finish(EXIT_OK, [out / "resolved_config.json"] + list(outputs))
        manifest.save(out / "run_manifest.json")
        logger.info(f"✅ {args.command} finished in {manifest.wall_seconds:.1f}s → {out}")
        return EXIT_OK
    except Exception as e:
        code = exit_code_for(e)
        if isinstance(e, TaanpError) or isinstance(e, OSError):
            logger.error(f"❌ {args.command} failed: {e}")
        else:
            logger.exception(f"❌ {args.command} failed unexpectedly: {e}")
        if manifest is not None and out is not None:
            manifest.finish(code)
            manifest.save(out / "run_manifest.json")
        return code


if __name__ == "__main__":
    sys.exit(main())
