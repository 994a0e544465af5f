"""
🔧 TRAINING
Episode construction, the negative-ELBO objective, AdamW with early stopping,
resumable training state and ablation switches.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, field_validator, model_validator
from scipy.stats import binomtest

from taanp.diffcore import RngStream, Tensor, as_tensor, backward
from taanp.errors import ConfigError, ContractError, NumericError, SkipEpisode
from taanp.features import FeatureBuilder, parse_drop
from taanp.npmodel import (Episode, EpisodeMeta, ForwardMode, ModelConfig, ModelParams, SubTask, Variant,
                           aggregate_mean, encode_context, forward, latent_posterior, DropoutState)
from taanp.synthworld import SyntheticWorld
from taanp.utils.records import append_record, write_records

logger = logging.getLogger(__name__)

STREAM_TRAIN = 11
STREAM_VAL = 12
STREAM_SPLIT = 13


class Split(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Ablation(Enum):
    FULL = "full"
    NO_TAMQM = "no_tamqm"
    NO_DROPOUT = "no_dropout"
    PLAIN_DROPOUT = "plain_dropout"


class TrainingConfig(BaseModel):
    """Objective, optimizer and episode-sampling settings"""
    beta: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 5.0
    batch_episodes: int = 8
    episodes_per_epoch: Optional[int] = 64
    max_epochs: int = 30
    patience: int = 5
    history: int = 4
    horizon: int = 4
    context_subsample_range: Tuple[float, float] = (0.3, 1.0)
    train_unobserved_range: Tuple[float, float] = (0.4, 0.8)
    train_fraction: float = 0.6
    val_fraction: float = 0.1
    dropout_rate: float = 0.1
    fixed_sigma: Optional[float] = None
    mc_inference: bool = True
    drop_fcd: List[str] = []
    seed: int = 0

    @field_validator("beta", "lr", "weight_decay")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("history", "horizon", "batch_episodes", "max_epochs", "patience")
    @classmethod
    def _at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @model_validator(mode="after")
    def _ranges(self) -> "TrainingConfig":
        lo, hi = self.context_subsample_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("context_subsample_range needs 0 < min_frac <= max_frac <= 1")
        lo, hi = self.train_unobserved_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("train_unobserved_range needs 0 < lo <= hi < 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.fixed_sigma is not None and self.fixed_sigma <= 0:
            raise ValueError("fixed_sigma must be > 0")
        parse_drop(self.drop_fcd)
        return self


@dataclass
class LossBreakdown:
    nll: float
    kl: float
    total: float
    loss: Optional[Tensor] = None
    n_targets: int = 0


# --- episodes ---------------------------------------------------------------------------

@dataclass
class EpisodeSampler:
    """Sliding windows (step 1) over a world split in time into train and test ranges"""
    world: SyntheticWorld
    features: FeatureBuilder
    history: int = 4
    horizon: int = 4
    train_fraction: float = 0.6
    train_unobserved_range: Tuple[float, float] = (0.4, 0.8)
    drop: Sequence[str] = ()

    def __post_init__(self):
        if self.world.sensors is None:
            raise ConfigError("the world needs a sensor assignment before sampling episodes")
        self.drop = parse_drop(self.drop)

    @classmethod
    def from_config(cls, world: SyntheticWorld, features: FeatureBuilder, config: TrainingConfig) -> "EpisodeSampler":
        return cls(world, features, config.history, config.horizon, config.train_fraction,
                   config.train_unobserved_range, config.drop_fcd)

    @property
    def observed(self) -> np.ndarray:
        return self.world.sensors.observed

    @property
    def unobserved(self) -> np.ndarray:
        return self.world.sensors.unobserved

    @property
    def train_end(self) -> int:
        """First interval of the test period"""
        return int(math.floor(self.train_fraction * self.world.n_intervals))

    def train_windows(self) -> np.ndarray:
        return np.arange(self.history - 1, self.train_end - self.horizon)

    def test_windows(self) -> np.ndarray:
        return np.arange(self.train_end + self.history - 1, self.world.n_intervals - self.horizon)

    def split_windows(self, seed: int, val_fraction: float) -> Tuple[np.ndarray, np.ndarray]:
        """Training-period windows split once per run into (train, validation)"""
        windows = self.train_windows()
        if windows.size == 0:
            raise ConfigError("training period too short for the history and horizon")
        n_val = int(round(val_fraction * windows.size))
        if val_fraction > 0 and windows.size > 1:
            n_val = min(max(n_val, 1), windows.size - 1)
        chosen = RngStream(seed, STREAM_SPLIT).permutation(windows.size)
        val = np.sort(windows[chosen[:n_val]])
        train = np.sort(windows[chosen[n_val:]])
        return train, val

    def with_sensors(self, sensors) -> "EpisodeSampler":
        return EpisodeSampler(self.world.with_sensors(sensors), self.features, self.history, self.horizon,
                              self.train_fraction, self.train_unobserved_range, self.drop)


def pseudo_split(observed: np.ndarray, unobserved_range: Tuple[float, float],
                 rng: RngStream) -> Tuple[np.ndarray, np.ndarray]:
    """Re-split the observed set into pseudo-observed and pseudo-unobserved segments"""
    observed = np.asarray(observed)
    if observed.size < 2:
        return observed, observed[:0]
    frac = rng.uniform(*unobserved_range)
    k = int(np.clip(round(frac * observed.size), 1, observed.size - 1))
    perm = rng.permutation(observed.size)
    return np.sort(observed[perm[k:]]), np.sort(observed[perm[:k]])


def build_episode(sampler: EpisodeSampler, t0: int, rng: Optional[RngStream] = None,
                  split: Split = Split.TEST) -> Episode:
    """Context = observed × [t0−T+1, t0]; targets = the three sub-task blocks.

    Test episodes use the world's sensor assignment (targets include virtual
    sensors); train/val episodes re-split the observed set so virtual sensors
    never enter training.
    """
    T, H = sampler.history, sampler.horizon
    n_intervals = sampler.world.n_intervals
    if t0 - T + 1 < 0 or t0 + H > n_intervals - 1:
        raise ContractError(f"t0={t0} leaves no room for history {T} and horizon {H}")
    if split is Split.TEST:
        observed, unobserved = sampler.observed, sampler.unobserved
    else:
        if rng is None:
            raise ContractError("training episodes need an RngStream for the pseudo split")
        observed, unobserved = pseudo_split(sampler.observed, sampler.train_unobserved_range, rng.derive(0))

    history = np.arange(t0 - T + 1, t0 + 1)
    future = np.arange(t0 + 1, t0 + H + 1)
    y_obs = sampler.world.field.y_obs
    valid = sampler.world.mask.valid

    c_seg, c_time = [a.reshape(-1) for a in np.meshgrid(observed, history, indexing="ij")]
    keep = valid[c_seg, c_time]
    c_seg, c_time = c_seg[keep], c_time[keep]
    if c_seg.size == 0:
        raise SkipEpisode(f"every context observation is missing at t0={t0}")

    blocks = [(SubTask.ESTIMATE_UNOBSERVED, unobserved, history),
              (SubTask.FORECAST_OBSERVED, observed, future),
              (SubTask.FORECAST_UNOBSERVED, unobserved, future)]
    t_seg, t_time, t_task = [], [], []
    for task, segments, times in blocks:
        seg, tim = [a.reshape(-1) for a in np.meshgrid(segments, times, indexing="ij")]
        t_seg.append(seg)
        t_time.append(tim)
        t_task.append(np.full(seg.size, task.code, dtype=np.int64))
    t_seg = np.concatenate(t_seg).astype(np.int64)
    t_time = np.concatenate(t_time).astype(np.int64)
    t_task = np.concatenate(t_task)

    fb = sampler.features
    target_y = np.where(valid[t_seg, t_time], y_obs[t_seg, t_time], np.nan)
    meta = EpisodeMeta(c_seg, c_time, t_seg, t_time, int(t0), T, H, fb.feature_split)
    return Episode(
        context_x=fb.point_features(sampler.world, c_seg, c_time, sampler.drop),
        context_y=fb.scale_flow(y_obs[c_seg, c_time]),
        target_x=fb.point_features(sampler.world, t_seg, t_time, sampler.drop),
        target_task=t_task,
        target_y=fb.scale_flow(target_y),
        meta=meta,
    )


def iter_episodes(sampler: EpisodeSampler, windows: Sequence[int], seed: int, stream: int,
                  split: Split) -> List[Episode]:
    """Build an episode per window, dropping unusable ones with a warning"""
    episodes = []
    for i, t0 in enumerate(windows):
        try:
            episodes.append(build_episode(sampler, int(t0), RngStream(seed, stream, (i,)), split))
        except SkipEpisode as e:
            logger.warning(f"⚠️ Skipping episode: {e}")
    return episodes


# --- objective ------------------------------------------------------------------------------

def supervised_targets(episode: Episode) -> Episode:
    return episode.with_targets(np.flatnonzero(episode.target_valid))


def subsample_for_kl(episode: Episode, rng: RngStream,
                     fraction_range: Tuple[float, float] = (0.3, 1.0)) -> Tuple[Episode, Episode]:
    """(C', T') for the KL term.

    T' is every supervised point of the episode (context plus targets with
    ground truth); C' is a uniform subset of the observable part of T' (its
    context rows) holding floor(frac·|T'|) points, at least one.
    """
    if episode.n_context < 1:
        raise ContractError("subsample_for_kl needs a non-empty context")
    lo, hi = fraction_range
    if not 0.0 < lo <= hi <= 1.0:
        raise ConfigError("context_subsample_range needs 0 < min_frac <= max_frac <= 1")
    supervised = supervised_targets(episode)
    t_size = episode.n_context + supervised.n_targets
    frac = lo if lo == hi else rng.uniform(lo, hi)
    size = min(max(1, int(math.floor(frac * t_size))), episode.n_context)
    chosen = np.sort(rng.choice(episode.n_context, size=size, replace=False))
    c_prime = supervised.with_context(chosen)
    t_prime = Episode(
        context_x=np.concatenate([episode.context_x, supervised.target_x]),
        context_y=np.concatenate([episode.context_y, supervised.target_y]),
        target_x=supervised.target_x,
        target_task=supervised.target_task,
        target_y=supervised.target_y,
    )
    return c_prime, t_prime


def gaussian_kl(mu_q, sigma_q, mu_p, sigma_p) -> Tensor:
    """KL(N(μ_q, σ_q²) ‖ N(μ_p, σ_p²)) summed over dimensions"""
    mu_q, sigma_q, mu_p, sigma_p = (as_tensor(v) for v in (mu_q, sigma_q, mu_p, sigma_p))
    ratio = (sigma_q / sigma_p).square()
    return (((mu_q - mu_p) / sigma_p).square() * 0.5 + ratio * 0.5 - ratio.log() * 0.5 - 0.5).sum()


def gaussian_nll(y: np.ndarray, mu: Tensor, sigma) -> Tensor:
    """Mean over targets of (y−μ)²/(2σ²) + ln σ"""
    sigma = as_tensor(sigma)
    residual = (as_tensor(y) - mu) / sigma
    return (residual.square() * 0.5 + sigma.log()).mean()


def elbo_loss(params: ModelParams, episode: Episode, rng: RngStream, config: TrainingConfig) -> LossBreakdown:
    """Negative ELBO: mean NLL with one z ~ q(z|C') plus β·KL(q(z|C') ‖ q(z|T'))"""
    supervised = supervised_targets(episode)
    if supervised.n_targets == 0:
        raise SkipEpisode("episode has no supervised targets")
    variant = params.variant
    if variant.has_latent:
        c_prime, t_prime = subsample_for_kl(episode, rng.derive(3), config.context_subsample_range)
        result = forward(params, supervised, rng, ForwardMode.TRAIN, config.dropout_rate, latent_context=c_prime)
        drop = DropoutState(config.dropout_rate, config.dropout_rate > 0, rng.derive(2))
        target_summary = aggregate_mean(encode_context(params, t_prime.context_x, t_prime.context_y, drop))
        q_target = latent_posterior(params, target_summary)
        kl = gaussian_kl(result.latent.mu_z, result.latent.sigma_z, q_target.mu_z, q_target.sigma_z)
    else:
        result = forward(params, supervised, rng, ForwardMode.TRAIN, config.dropout_rate)
        kl = Tensor(0.0)
    sigma = config.fixed_sigma if config.fixed_sigma is not None else result.prediction.sigma
    nll = gaussian_nll(supervised.target_y, result.prediction.mu, sigma)
    total = nll + kl * config.beta
    return LossBreakdown(nll.item(), kl.item(), total.item(), total, supervised.n_targets)


# --- optimizer -----------------------------------------------------------------------------

class AdamW:
    """Adaptive moments with decoupled weight decay, keyed by parameter name"""

    def __init__(self, params: ModelParams, lr: float = 1e-3, weight_decay: float = 1e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.named()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.named()}

    def step(self) -> None:
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for name, t in self.params.named():
            if t.grad is None:
                continue
            g = t.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            t.data = t.data - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * t.data)

    def state(self) -> Dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: Dict[str, np.ndarray], step_count: int) -> None:
        for name in self.m:
            self.m[name] = np.array(tensors[f"adam.m.{name}"], dtype=np.float64)
            self.v[name] = np.array(tensors[f"adam.v.{name}"], dtype=np.float64)
        self.step_count = int(step_count)


def clip_grad_norm(params: ModelParams, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm; returns the pre-clip norm"""
    grads = [t.grad for t in params.parameters() if t.grad is not None]
    norm = float(math.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if not math.isfinite(norm):
        raise NumericError("gradient norm is not finite")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in params.parameters():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


# --- training loop ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    train_kl: float
    train_total: float
    val_total: float
    wall_seconds: float

    def as_record(self) -> Dict[str, float]:
        return {"record": "epoch", "epoch": self.epoch, "train_nll": self.train_nll, "train_kl": self.train_kl,
                "train_total": self.train_total, "val_total": self.val_total, "wall_seconds": self.wall_seconds}


@dataclass
class TrainingState:
    """Everything needed to continue a run exactly where it stopped"""
    epoch: int
    optimizer_step: int
    best_val: float
    best_epoch: int
    bad_epochs: int
    history: List[EpochRecord] = field(default_factory=list)
    best_state: Optional[Dict[str, np.ndarray]] = None
    optimizer: Optional[Dict[str, np.ndarray]] = None


@dataclass
class TrainResult:
    params: ModelParams
    history: List[EpochRecord]
    best_epoch: int
    best_val: float
    stopped_early: bool
    state: Optional[TrainingState] = None


def mean_loss(params: ModelParams, episodes: Sequence[Episode], seed: int, stream: int,
              config: TrainingConfig) -> LossBreakdown:
    """Average loss without gradients and with dropout off; each episode gets a fixed stream"""
    scoring = config.model_copy(update={"dropout_rate": 0.0})
    nll = kl = total = 0.0
    count = 0
    for i, episode in enumerate(episodes):
        try:
            loss = elbo_loss(params, episode, RngStream(seed, stream, (i,)), scoring)
        except SkipEpisode:
            continue
        nll, kl, total = nll + loss.nll, kl + loss.kl, total + loss.total
        count += 1
    if count == 0:
        return LossBreakdown(float("nan"), float("nan"), float("nan"))
    return LossBreakdown(nll / count, kl / count, total / count)


def _run_epoch(params: ModelParams, optimizer: AdamW, sampler: EpisodeSampler, windows: np.ndarray,
               epoch: int, config: TrainingConfig) -> LossBreakdown:
    rng = RngStream(config.seed, STREAM_TRAIN, (epoch,))
    order = rng.derive(0).permutation(windows)
    if config.episodes_per_epoch is not None:
        order = order[:config.episodes_per_epoch]
    sums = np.zeros(3)
    batches = 0
    for b, start in enumerate(range(0, len(order), config.batch_episodes)):
        batch = order[start:start + config.batch_episodes]
        losses = []
        for j, t0 in enumerate(batch):
            episode_rng = rng.derive(1, b, j)
            try:
                episode = build_episode(sampler, int(t0), episode_rng, Split.TRAIN)
                losses.append(elbo_loss(params, episode, episode_rng.derive(1), config))
            except SkipEpisode as e:
                logger.warning(f"⚠️ Skipping training episode t0={int(t0)}: {e}")
        if not losses:
            continue
        batch_loss = losses[0].loss
        for loss in losses[1:]:
            batch_loss = batch_loss + loss.loss
        batch_loss = batch_loss * (1.0 / len(losses))
        if not math.isfinite(batch_loss.item()):
            raise NumericError(f"loss became {batch_loss.item()} at epoch {epoch}, batch {b}")
        params.zero_grad()
        backward(batch_loss)
        clip_grad_norm(params, config.clip_norm)
        optimizer.step()
        sums += [np.mean([x.nll for x in losses]), np.mean([x.kl for x in losses]), batch_loss.item()]
        batches += 1
    if batches == 0:
        raise NumericError(f"epoch {epoch} produced no usable batches")
    nll, kl, total = sums / batches
    return LossBreakdown(float(nll), float(kl), float(total))


def train(params: ModelParams, sampler: EpisodeSampler, config: TrainingConfig,
          log_path: Optional[Union[str, Path]] = None, resume: Optional[TrainingState] = None,
          checkpoint_fn=None) -> TrainResult:
    """Minimize the mean negative ELBO with early stopping on validation loss.

    Epoch e draws all of its randomness from (seed, e), so a resumed run
    continues bit-identically. checkpoint_fn(state, params) is called after
    every epoch when given.
    """
    logger.info(f"🔧 Training {params.variant.value}: max_epochs={config.max_epochs}, patience={config.patience}")
    train_windows, val_windows = sampler.split_windows(config.seed, config.val_fraction)
    val_episodes = iter_episodes(sampler, val_windows, config.seed, STREAM_VAL, Split.VAL)
    if not val_episodes:
        val_episodes = iter_episodes(sampler, train_windows[:1], config.seed, STREAM_VAL, Split.VAL)
    optimizer = AdamW(params, config.lr, config.weight_decay, config.betas, config.eps)

    if resume is not None:
        optimizer.load_state(resume.optimizer, resume.optimizer_step)
        state = resume
        logger.info(f"🔧 Resuming after epoch {state.epoch}")
    else:
        state = TrainingState(epoch=0, optimizer_step=0, best_val=float("inf"), best_epoch=0, bad_epochs=0)
        state.best_state = params.state()
        if log_path is not None:
            write_records(log_path, [], kind="training_log")

    for epoch in range(state.epoch + 1, config.max_epochs + 1):
        if state.bad_epochs >= config.patience:
            break
        started = time.time()
        train_loss = _run_epoch(params, optimizer, sampler, train_windows, epoch, config)
        val_loss = mean_loss(params, val_episodes, config.seed, STREAM_VAL + 100, config)
        if not math.isfinite(val_loss.total):
            raise NumericError(f"validation loss is {val_loss.total} after epoch {epoch}")
        record = EpochRecord(epoch, train_loss.nll, train_loss.kl, train_loss.total, val_loss.total,
                             time.time() - started)
        state.history.append(record)
        if log_path is not None:
            append_record(log_path, record.as_record())
        if val_loss.total < state.best_val:
            state.best_val = val_loss.total
            state.best_epoch = epoch
            state.best_state = params.state()
            state.bad_epochs = 0
        else:
            state.bad_epochs += 1
        state.epoch = epoch
        state.optimizer_step = optimizer.step_count
        state.optimizer = optimizer.state()
        logger.info(f"📈 Epoch {epoch}: train={train_loss.total:.4f} (nll={train_loss.nll:.4f}, "
                    f"kl={train_loss.kl:.4f}) val={val_loss.total:.4f}")
        if checkpoint_fn is not None:
            checkpoint_fn(state, params)
    stopped_early = state.bad_epochs >= config.patience and state.epoch < config.max_epochs

    best = params.copy()
    best.load_state(state.best_state)
    logger.info(f"✅ Training finished: best epoch {state.best_epoch}, val={state.best_val:.4f}")
    return TrainResult(best, state.history, state.best_epoch, state.best_val, stopped_early, state)


# --- ablations -------------------------------------------------------------------------------

@dataclass
class AblationSetup:
    model: ModelConfig
    training: TrainingConfig
    inference_mode: ForwardMode


def ablation_variant(model: ModelConfig, training: TrainingConfig, switch: Union[str, Ablation]) -> AblationSetup:
    """Model/training/inference settings for one ablation switch"""
    try:
        switch = Ablation(switch)
    except ValueError as e:
        raise ConfigError(f"unknown ablation switch '{switch}'") from e
    if switch is Ablation.FULL:
        return AblationSetup(model.model_copy(update={"variant": Variant.TAANP}),
                             training.model_copy(update={"mc_inference": True}), ForwardMode.INFER_MC)
    if switch is Ablation.NO_TAMQM:
        return AblationSetup(model.model_copy(update={"variant": Variant.ANP}),
                             training.model_copy(update={"mc_inference": True}), ForwardMode.INFER_MC)
    if switch is Ablation.NO_DROPOUT:
        return AblationSetup(model.model_copy(update={"variant": Variant.TAANP, "dropout_rate": 0.0}),
                             training.model_copy(update={"dropout_rate": 0.0, "mc_inference": True}),
                             ForwardMode.INFER_MC)
    return AblationSetup(model.model_copy(update={"variant": Variant.TAANP}),
                         training.model_copy(update={"mc_inference": False}), ForwardMode.INFER_PLAIN)


@dataclass
class SignTest:
    wins: int
    trials: int
    p_value: float


def paired_sign_test(better: Sequence[float], worse: Sequence[float]) -> SignTest:
    """One-sided sign test that `better` exceeds `worse` pairwise; ties are dropped"""
    better = np.asarray(better, dtype=np.float64)
    worse = np.asarray(worse, dtype=np.float64)
    if better.shape != worse.shape:
        raise ContractError("paired samples must align")
    diff = better - worse
    wins = int(np.sum(diff > 0))
    trials = int(np.sum(diff != 0))
    p = 1.0 if trials == 0 else float(binomtest(wins, trials, 0.5, alternative="greater").pvalue)
    return SignTest(wins, trials, p)


def ablation_sign_test(full_nll: Sequence[float], ablated_nll: Sequence[float]) -> SignTest:
    """Sign test that the full model reaches lower paired NLL than the ablated one"""
    return paired_sign_test(ablated_nll, full_nll)
