"""
📊 EVALUATION METRICS
Deterministic and probabilistic scores over masked series, plus grouped
MetricReport construction.

Every metric sees only mask-valid entries; missing observations never
enter a score.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import ndtr

from taanp.diffcore import RngStream
from taanp.errors import ConfigError, ContractError, DomainError, UndefinedMetricError

logger = logging.getLogger(__name__)

INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
METRIC_NAMES = ["mae", "rmse", "smape", "rrmse", "r2", "crps", "picp", "qice"]


@dataclass
class MaskedSeries:
    """Aligned truth/prediction arrays with validity flags"""
    y_true: np.ndarray
    y_pred: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true, dtype=np.float64).reshape(-1)
        self.y_pred = np.asarray(self.y_pred, dtype=np.float64).reshape(-1)
        if self.y_true.shape != self.y_pred.shape:
            raise ContractError("y_true and y_pred must align")
        if self.mask is None:
            self.mask = np.isfinite(self.y_true)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1) & np.isfinite(self.y_true)

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def valid(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.n_valid == 0:
            raise UndefinedMetricError("no valid entries")
        return self.y_true[self.mask], self.y_pred[self.mask]


def _series(y_true, y_pred, mask) -> Tuple[np.ndarray, np.ndarray]:
    return MaskedSeries(y_true, y_pred, mask).valid()


# --- deterministic -----------------------------------------------------------------------

def mae(y_true, y_pred, mask=None) -> float:
    y, p = _series(y_true, y_pred, mask)
    return float(np.mean(np.abs(y - p)))


def rmse(y_true, y_pred, mask=None) -> float:
    y, p = _series(y_true, y_pred, mask)
    return float(np.sqrt(np.mean((y - p) ** 2)))


def r2(y_true, y_pred, mask=None) -> float:
    """1 − SSE/SST; negative when worse than the mean predictor"""
    y, p = _series(y_true, y_pred, mask)
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        raise UndefinedMetricError("r2 is undefined for a constant series")
    return 1.0 - float(np.sum((y - p) ** 2)) / sst


def smape(y_true, y_pred, mask=None) -> float:
    """Percent; 0/0 terms count as 0"""
    y, p = _series(y_true, y_pred, mask)
    denom = (np.abs(y) + np.abs(p)) / 2.0
    terms = np.where(denom > 0, np.abs(y - p) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(100.0 * np.mean(terms))


def rrmse(y_true, y_pred, mask=None) -> float:
    """RMSE over the mean of the truth, in percent"""
    y, p = _series(y_true, y_pred, mask)
    level = float(np.mean(y))
    if level <= 0:
        raise UndefinedMetricError("rrmse needs a positive mean of y_true")
    return 100.0 * float(np.sqrt(np.mean((y - p) ** 2))) / level


def retention_ratio(rrmse_now: float, rrmse_base: float) -> float:
    """(1/RRMSE) relative to the undisturbed baseline"""
    if rrmse_now <= 0 or rrmse_base <= 0:
        raise DomainError("retention_ratio needs positive RRMSE values")
    return float(rrmse_base) / float(rrmse_now)


# --- probabilistic -----------------------------------------------------------------------

def crps_gaussian(mu, sigma, y):
    """Closed-form CRPS of N(μ, σ²) at y, elementwise"""
    mu, sigma, y = (np.asarray(v, dtype=np.float64) for v in (mu, sigma, y))
    if np.any(sigma <= 0):
        raise DomainError("crps_gaussian needs sigma > 0")
    z = (y - mu) / sigma
    pdf = np.exp(-0.5 * z ** 2) / math.sqrt(2.0 * math.pi)
    out = sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * pdf - INV_SQRT_PI)
    return float(out) if out.ndim == 0 else out


def crps_samples(samples, y):
    """Energy form E|X−y| − ½E|X−X'| with the O(S log S) sorted-sample identity.

    samples is (S,) for one target or (m, S) for m targets.
    """
    samples = np.asarray(samples, dtype=np.float64)
    single = samples.ndim == 1
    samples = np.atleast_2d(samples)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if samples.shape[1] < 1:
        raise ContractError("crps_samples needs at least one sample")
    if y.shape[0] != samples.shape[0]:
        raise ContractError("one observation per sample row is required")
    s = samples.shape[1]
    term1 = np.mean(np.abs(samples - y), axis=1)
    ordered = np.sort(samples, axis=1)
    weights = 2.0 * np.arange(1, s + 1) - s - 1.0
    spread = 2.0 * (ordered @ weights) / (s * s)
    out = term1 - 0.5 * spread
    return float(out[0]) if single else out


def crps_predictive(mus: np.ndarray, sigmas: np.ndarray, y: np.ndarray, rng: Optional[RngStream] = None,
                    mode: str = "mixture", samples_per_component: int = 100) -> np.ndarray:
    """CRPS per target for K Gaussian components (K×m arrays).

    K=1 or mode="moment" use the closed form (moment-matched for K>1); the
    mixture mode draws samples_per_component values from each component.
    """
    mus = np.atleast_2d(np.asarray(mus, dtype=np.float64))
    sigmas = np.atleast_2d(np.asarray(sigmas, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if mus.shape != sigmas.shape or mus.shape[1] != y.size:
        raise ContractError("component arrays must be K×m and align with y")
    if mode not in ("mixture", "moment"):
        raise ConfigError(f"unknown CRPS mode '{mode}'")
    k = mus.shape[0]
    if k == 1:
        return np.atleast_1d(crps_gaussian(mus[0], sigmas[0], y))
    if mode == "moment":
        mean = mus.mean(axis=0)
        var = (sigmas ** 2).mean(axis=0) + ((mus - mean) ** 2).mean(axis=0)
        return np.atleast_1d(crps_gaussian(mean, np.sqrt(var), y))
    if rng is None:
        raise ContractError("mixture CRPS needs an RngStream")
    eps = rng.normal(size=(k, samples_per_component, y.size))
    draws = mus[:, None, :] + sigmas[:, None, :] * eps
    draws = draws.reshape(k * samples_per_component, y.size).T
    return np.atleast_1d(crps_samples(draws, y))


def picp(lower, upper, y, mask=None) -> float:
    """Fraction of valid observations inside [lower, upper], bounds inclusive"""
    lower, upper, y = (np.asarray(v, dtype=np.float64).reshape(-1) for v in (lower, upper, y))
    if not (lower.shape == upper.shape == y.shape):
        raise ContractError("interval bounds and observations must align")
    valid = np.isfinite(y) if mask is None else (np.asarray(mask, dtype=bool).reshape(-1) & np.isfinite(y))
    if not valid.any():
        raise UndefinedMetricError("no valid entries")
    inside = (y[valid] >= lower[valid]) & (y[valid] <= upper[valid])
    return float(np.mean(inside))


def pit_bin_index(pit, n_bins: int) -> np.ndarray:
    """Bin n holds PIT in [(n−1)/N, n/N); the last bin is closed at 1"""
    pit = np.asarray(pit, dtype=np.float64)
    return np.minimum(np.floor(pit * n_bins).astype(np.int64), n_bins - 1)


def pit_histogram(pit, bins: int = 10, mask=None) -> np.ndarray:
    if bins < 2:
        raise ConfigError("pit_histogram needs at least 2 bins")
    pit = np.asarray(pit, dtype=np.float64).reshape(-1)
    valid = np.isfinite(pit) if mask is None else (np.asarray(mask, dtype=bool).reshape(-1) & np.isfinite(pit))
    return np.bincount(pit_bin_index(pit[valid], bins), minlength=bins)


def qice(pit, n_bins: int = 10, mask=None) -> float:
    """Mean absolute gap between per-quantile-interval coverage and 1/N"""
    if n_bins < 2:
        raise ConfigError("qice needs N >= 2")
    counts = pit_histogram(pit, n_bins, mask)
    total = counts.sum()
    if total == 0:
        raise UndefinedMetricError("no valid entries")
    return float(np.mean(np.abs(counts / total - 1.0 / n_bins)))


# --- reports ---------------------------------------------------------------------------------

@dataclass
class MetricReport:
    mae: Optional[float] = None
    rmse: Optional[float] = None
    smape: Optional[float] = None
    rrmse: Optional[float] = None
    r2: Optional[float] = None
    crps: Optional[float] = None
    picp: Optional[float] = None
    qice: Optional[float] = None
    n_valid: int = 0
    keys: Dict[str, Any] = field(default_factory=dict)

    def to_record(self) -> Dict[str, Any]:
        record = {"record": "metrics", **self.keys}
        record.update({k: v for k, v in asdict(self).items() if k != "keys"})
        return record


def _safe(fn, *args, name: str = "") -> Optional[float]:
    try:
        return fn(*args)
    except UndefinedMetricError as e:
        logger.warning(f"⚠️ Metric {name} undefined: {e}")
        return None


def compute_report(frame: pd.DataFrame, keys: Optional[Dict[str, Any]] = None, qice_bins: int = 10) -> MetricReport:
    """Score one frame with columns y_true, mu and optionally valid, crps, lower, upper, pit"""
    valid = frame["valid"].to_numpy(dtype=bool) if "valid" in frame else np.ones(len(frame), dtype=bool)
    y = frame["y_true"].to_numpy(dtype=np.float64)
    valid = valid & np.isfinite(y)
    mu = frame["mu"].to_numpy(dtype=np.float64)
    report = MetricReport(n_valid=int(valid.sum()), keys=dict(keys or {}))
    for name, fn in (("mae", mae), ("rmse", rmse), ("smape", smape), ("rrmse", rrmse), ("r2", r2)):
        setattr(report, name, _safe(fn, y, mu, valid, name=name))
    if "crps" in frame and valid.any():
        report.crps = float(np.mean(frame["crps"].to_numpy(dtype=np.float64)[valid]))
    if "lower" in frame and "upper" in frame:
        report.picp = _safe(picp, frame["lower"].to_numpy(), frame["upper"].to_numpy(), y, valid, name="picp")
    if "pit" in frame:
        report.qice = _safe(qice, frame["pit"].to_numpy(), qice_bins, valid, name="qice")
    return report


def evaluate_predictions(frame: pd.DataFrame, group_by: Sequence[str] = (), qice_bins: int = 10) -> List[MetricReport]:
    """Pooled report followed by one report per group_by key combination"""
    group_by = list(group_by)
    missing = [c for c in group_by if c not in frame]
    if missing:
        raise ConfigError(f"cannot group by unknown columns {missing}")
    reports = [compute_report(frame, {c: "all" for c in group_by}, qice_bins)]
    if group_by:
        for key, part in frame.groupby(group_by, sort=True):
            key = key if isinstance(key, tuple) else (key,)
            reports.append(compute_report(part, dict(zip(group_by, key)), qice_bins))
    return reports


def reports_frame(reports: Sequence[MetricReport]) -> pd.DataFrame:
    return pd.DataFrame([r.to_record() for r in reports])
