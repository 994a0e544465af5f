"""
🎲 UNCERTAINTY ENGINE
MC-Dropout inference over K stochastic passes, the law-of-total-variance
decomposition into aleatoric (AU) and epistemic (EU) parts, predictive CDF and
intervals of the equal-weight Gaussian mixture, PIT values and PCV-based
screening.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, field_validator
from scipy.special import ndtr, ndtri

from taanp.analytics.metrics import crps_predictive, picp, qice, rrmse
from taanp.diffcore import RngStream
from taanp.errors import ConfigError, ContractError, UndefinedMetricError
from taanp.npmodel import SUBTASKS, Episode, ForwardMode, ModelParams, forward

logger = logging.getLogger(__name__)

CDF_MODES = ("mixture", "moment")


class UncertaintyConfig(BaseModel):
    k_samples: int = 10
    alpha: float = 0.05
    cdf_mode: str = "mixture"
    samples_per_component: int = 100
    qice_bins: int = 10
    pcv_floor: float = 1.0
    pcv_edges: List[float] = [0.0, 10.0, 20.0, 30.0, 40.0, 60.0, 1000.0]
    rejection_fractions: List[float] = [0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5]
    n_jobs: int = 1

    @field_validator("k_samples")
    @classmethod
    def _k(cls, v: int) -> int:
        if v < 1:
            raise ValueError("k_samples must be >= 1")
        return v

    @field_validator("alpha")
    @classmethod
    def _alpha(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        return v

    @field_validator("cdf_mode")
    @classmethod
    def _mode(cls, v: str) -> str:
        if v not in CDF_MODES:
            raise ValueError(f"cdf_mode must be one of {CDF_MODES}")
        return v


@dataclass
class McSampleSet:
    """K snapshots of (μ, σ) per target, stored as K×m arrays"""
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if self.mu.shape != self.sigma.shape:
            raise ContractError("mu and sigma sample arrays must align")
        if self.mu.shape[0] < 1:
            raise ContractError("a sample set needs K >= 1")
        if np.any(self.sigma <= 0):
            raise ContractError("every sampled sigma must be > 0")

    @property
    def k(self) -> int:
        return self.mu.shape[0]

    @property
    def n_targets(self) -> int:
        return self.mu.shape[1]

    def scaled(self, factor: float) -> "McSampleSet":
        return McSampleSet(self.mu * factor, self.sigma * factor)

    def head(self, k: int) -> "McSampleSet":
        return McSampleSet(self.mu[:k], self.sigma[:k])

    def subset(self, index: np.ndarray) -> "McSampleSet":
        return McSampleSet(self.mu[:, index], self.sigma[:, index])


@dataclass
class UncertaintyDecomposition:
    mean: np.ndarray
    au: np.ndarray
    eu: np.ndarray
    total_var: np.ndarray
    pcv: np.ndarray  # percent; NaN where the mean is at or below the PCV floor

    @property
    def total_std(self) -> np.ndarray:
        return np.sqrt(self.total_var)

    @property
    def pcv_defined(self) -> np.ndarray:
        return np.isfinite(self.pcv)


@dataclass
class PredictionInterval:
    lower: np.ndarray
    upper: np.ndarray


Predictive = Union[McSampleSet, UncertaintyDecomposition]


def _single_pass(params: ModelParams, episode: Episode, rng: RngStream, mode: ForwardMode):
    result = forward(params, episode, rng, mode)
    return result.prediction.mean.copy(), result.prediction.std.copy()


def mc_infer(params: ModelParams, episode: Episode, k: int, rng: RngStream,
             mode: ForwardMode = ForwardMode.INFER_MC, n_jobs: int = 1) -> McSampleSet:
    """K forward passes; pass i draws from stream_id = i so results are order-independent"""
    if k < 1:
        raise ConfigError("mc_infer needs K >= 1")
    streams = [RngStream(rng.seed, i, rng.subkeys) for i in range(k)]
    if n_jobs == 1:
        passes = [_single_pass(params, episode, s, mode) for s in streams]
    else:
        passes = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_single_pass)(params, episode, s, mode) for s in streams)
    return McSampleSet(np.stack([p[0] for p in passes]), np.stack([p[1] for p in passes]))


def decompose(samples: McSampleSet, pcv_floor: float = 1.0) -> UncertaintyDecomposition:
    """μ̄, AU = mean σᵢ², EU = mean (μᵢ − μ̄)², total = AU + EU, PCV = total std / μ̄ in percent"""
    mean = samples.mu.mean(axis=0)
    au = (samples.sigma ** 2).mean(axis=0)
    eu = ((samples.mu - mean) ** 2).mean(axis=0)
    total = au + eu
    with np.errstate(divide="ignore", invalid="ignore"):
        pcv = np.where(mean > pcv_floor, 100.0 * np.sqrt(total) / mean, np.nan)
    return UncertaintyDecomposition(mean, au, eu, total, pcv)


def _components(dist: Predictive, mode: str):
    if mode not in CDF_MODES:
        raise ConfigError(f"unknown cdf mode '{mode}'")
    if isinstance(dist, UncertaintyDecomposition):
        return dist.mean[None, :], dist.total_std[None, :]
    if mode == "moment" and dist.k > 1:
        dec = decompose(dist)
        return dec.mean[None, :], dec.total_std[None, :]
    return dist.mu, dist.sigma


def predictive_cdf(dist: Predictive, y, mode: str = "mixture") -> np.ndarray:
    """(1/K) Σ Φ((y − μᵢ)/σᵢ) per target; y has one value per target or broadcasts"""
    mu, sigma = _components(dist, mode)
    y = np.asarray(y, dtype=np.float64)
    return ndtr((y[None, ...] - mu) / sigma).mean(axis=0)


def interval(dist: Predictive, alpha: float, mode: str = "mixture", tol: float = 1e-9,
             max_iter: int = 200) -> PredictionInterval:
    """Central (1 − α) interval; mixture quantiles by vectorized bisection"""
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    mu, sigma = _components(dist, mode)
    if mu.shape[0] == 1:
        z = ndtri(1.0 - alpha / 2.0)
        return PredictionInterval(mu[0] - z * sigma[0], mu[0] + z * sigma[0])

    def quantile(q: float) -> np.ndarray:
        lo = np.min(mu - 40.0 * sigma, axis=0)
        hi = np.max(mu + 40.0 * sigma, axis=0)
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            cdf = ndtr((mid[None, :] - mu) / sigma).mean(axis=0)
            if np.all(np.abs(cdf - q) <= tol):
                return mid
            below = cdf < q
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= 1e-12 * np.maximum(1.0, np.abs(mid))):
                break
        return 0.5 * (lo + hi)

    return PredictionInterval(quantile(alpha / 2.0), quantile(1.0 - alpha / 2.0))


def pit_values(dist: Predictive, y, mode: str = "mixture") -> np.ndarray:
    """Probability integral transform of the observations"""
    return predictive_cdf(dist, y, mode)


def sample_mixture(samples: McSampleSet, s: int, rng: RngStream) -> np.ndarray:
    """m × (K·s) draws from the equal-weight mixture"""
    if s < 1:
        raise ConfigError("need at least one draw per component")
    eps = rng.normal(size=(samples.k, s, samples.n_targets))
    draws = samples.mu[:, None, :] + samples.sigma[:, None, :] * eps
    return draws.reshape(samples.k * s, samples.n_targets).T


# --- PCV analyses -----------------------------------------------------------------------------

def error_rejection_curve(pcv, y_true, y_pred, fractions: Sequence[float], mask=None) -> pd.DataFrame:
    """RRMSE after discarding the given fraction of most uncertain (highest PCV) points"""
    pcv, y_true, y_pred = (np.asarray(v, dtype=np.float64).reshape(-1) for v in (pcv, y_true, y_pred))
    if not (pcv.shape == y_true.shape == y_pred.shape):
        raise ContractError("pcv, y_true and y_pred must align")
    keep = np.isfinite(pcv) & np.isfinite(y_true)
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool).reshape(-1)
    pcv, y_true, y_pred = pcv[keep], y_true[keep], y_pred[keep]
    order = np.argsort(-pcv, kind="stable")
    rows = []
    for f in fractions:
        if not 0.0 <= f < 1.0:
            raise ConfigError("rejection fractions must lie in [0, 1)")
        retained = order[int(np.floor(f * order.size)):]
        try:
            score = rrmse(y_true[retained], y_pred[retained])
        except UndefinedMetricError:
            score = None
        rows.append({"rejection_pct": 100.0 * f, "rrmse": score, "n_retained": int(retained.size)})
    return pd.DataFrame(rows)


def pcv_binning(pcv, y_true, y_pred, edges: Sequence[float]) -> pd.DataFrame:
    """RRMSE and median PCV per PCV bin"""
    frame = pd.DataFrame({"pcv": np.asarray(pcv, dtype=np.float64), "y": np.asarray(y_true, dtype=np.float64),
                          "p": np.asarray(y_pred, dtype=np.float64)})
    frame = frame[np.isfinite(frame["pcv"]) & np.isfinite(frame["y"])]
    frame["bin"] = pd.cut(frame["pcv"], bins=list(edges), right=False)
    rows = []
    for interval_, part in frame.groupby("bin", observed=False):
        try:
            score = rrmse(part["y"].to_numpy(), part["p"].to_numpy()) if len(part) else None
        except UndefinedMetricError:
            score = None
        rows.append({"pcv_low": float(interval_.left), "pcv_high": float(interval_.right), "count": int(len(part)),
                     "median_pcv": float(part["pcv"].median()) if len(part) else None, "rrmse": score})
    return pd.DataFrame(rows)


# --- per-target evaluation frames -----------------------------------------------------------------

def episode_frame(params: ModelParams, episode: Episode, config: UncertaintyConfig, rng: RngStream,
                  flow_scale: float = 1.0, mode: ForwardMode = ForwardMode.INFER_MC) -> pd.DataFrame:
    """One row per target, in flow units: truth, mixture moments, AU/EU/PCV, interval, PIT and CRPS"""
    samples = mc_infer(params, episode, config.k_samples, rng, mode, config.n_jobs).scaled(flow_scale)
    dec = decompose(samples, config.pcv_floor)
    bounds = interval(samples, config.alpha, config.cdf_mode)
    y = episode.target_y * flow_scale
    valid = np.isfinite(y)
    y_safe = np.where(valid, y, 0.0)
    pit = np.where(valid, pit_values(samples, y_safe, config.cdf_mode), np.nan)
    crps_mode = "moment" if config.cdf_mode == "moment" else "mixture"
    crps = crps_predictive(samples.mu, samples.sigma, y_safe, rng.derive(9_999), crps_mode,
                           config.samples_per_component)
    meta = episode.meta
    frame = pd.DataFrame({
        "task": [SUBTASKS[c].value for c in episode.target_task],
        "y_true": y,
        "valid": valid,
        "mu": dec.mean,
        "sigma": dec.total_std,
        "au": dec.au,
        "eu": dec.eu,
        "pcv": dec.pcv,
        "lower": bounds.lower,
        "upper": bounds.upper,
        "pit": pit,
        "crps": np.where(valid, crps, np.nan),
    })
    if meta is not None:
        frame.insert(0, "segment", meta.target_segments)
        frame.insert(1, "t_index", meta.target_times)
        frame.insert(2, "t0", meta.t0)
        frame["horizon"] = np.maximum(meta.target_times - meta.t0, 0)
    return frame


def evaluate_episodes(params: ModelParams, episodes: Sequence[Episode], config: UncertaintyConfig, seed: int,
                      flow_scale: float = 1.0, mode: ForwardMode = ForwardMode.INFER_MC) -> pd.DataFrame:
    frames = [episode_frame(params, ep, config, RngStream(seed, 0, (20, i)), flow_scale, mode)
              for i, ep in enumerate(episodes)]
    if not frames:
        raise ContractError("no episodes to evaluate")
    return pd.concat(frames, ignore_index=True)


def k_sweep(params: ModelParams, episodes: Sequence[Episode], ks: Sequence[int], seed: int,
            config: Optional[UncertaintyConfig] = None, flow_scale: float = 1.0) -> pd.DataFrame:
    """QICE, PICP and CRPS as a function of the number of MC passes (prefixes of one K_max run)"""
    config = config or UncertaintyConfig()
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ConfigError("k values must be >= 1")
    runs = []
    for i, ep in enumerate(episodes):
        rng = RngStream(seed, 0, (21, i))
        runs.append((mc_infer(params, ep, ks[-1], rng, ForwardMode.INFER_MC, config.n_jobs).scaled(flow_scale),
                     ep.target_y * flow_scale, rng))
    rows = []
    for k in ks:
        pits, lows, highs, ys, crps = [], [], [], [], []
        for samples, y, rng in runs:
            head = samples.head(k)
            valid = np.isfinite(y)
            if not valid.any():
                continue
            head = head.subset(np.flatnonzero(valid))
            yv = y[valid]
            bounds = interval(head, config.alpha, config.cdf_mode)
            pits.append(pit_values(head, yv, config.cdf_mode))
            lows.append(bounds.lower)
            highs.append(bounds.upper)
            ys.append(yv)
            crps.append(crps_predictive(head.mu, head.sigma, yv, rng.derive(k), "mixture",
                                        config.samples_per_component))
        if not ys:
            raise ContractError("no valid targets for the K sweep")
        rows.append({
            "k": k,
            "qice": qice(np.concatenate(pits), config.qice_bins),
            "picp": picp(np.concatenate(lows), np.concatenate(highs), np.concatenate(ys)),
            "crps": float(np.mean(np.concatenate(crps))),
        })
    return pd.DataFrame(rows)
