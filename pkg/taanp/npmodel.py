"""
🧠 NEURAL PROCESS MODEL FAMILY
CNP → LNP → ANP → TA-ANP over episodes of (context, target) points.

Shared pieces:
- encoder h_θ(x, y) → r_i, mean aggregator → R
- latent path R → q(z | C) = N(μ_z, σ_z²)
- attentive deterministic path: multi-head cross-attention with one query
  projection per sub-task (TA-ANP) or one shared projection (ANP)
- Gaussian decoder g_φ → (μ, σ) with σ = σ_floor + softplus(raw)
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, field_validator, model_validator

from taanp.diffcore import (RngStream, Tensor, as_tensor, concat, dropout, matmul, parameter,
                            softmax_lastdim, stable_mean_rows, take_rows)
from taanp.errors import ConfigError, ContractError

logger = logging.getLogger(__name__)


class SubTask(Enum):
    ESTIMATE_UNOBSERVED = "estimate_unobserved"      # unobserved segment, t <= T
    FORECAST_OBSERVED = "forecast_observed"          # observed segment, t > T
    FORECAST_UNOBSERVED = "forecast_unobserved"      # unobserved segment, t > T

    @property
    def code(self) -> int:
        return SUBTASKS.index(self)

    @classmethod
    def from_code(cls, code: int) -> "SubTask":
        return SUBTASKS[int(code)]


SUBTASKS: List[SubTask] = [SubTask.ESTIMATE_UNOBSERVED, SubTask.FORECAST_OBSERVED, SubTask.FORECAST_UNOBSERVED]


def derive_task(segment_observed: bool, in_history: bool) -> Optional[SubTask]:
    """Task tag of a point; None means the point belongs to the context"""
    if segment_observed and in_history:
        return None
    if in_history:
        return SubTask.ESTIMATE_UNOBSERVED
    return SubTask.FORECAST_OBSERVED if segment_observed else SubTask.FORECAST_UNOBSERVED


class Variant(Enum):
    CNP = "cnp"
    LNP = "lnp"
    ANP = "anp"
    TAANP = "taanp"

    @property
    def has_latent(self) -> bool:
        return self is not Variant.CNP

    @property
    def has_attention(self) -> bool:
        return self in (Variant.ANP, Variant.TAANP)


class ForwardMode(Enum):
    TRAIN = "train"
    INFER_MC = "infer_mc"
    INFER_PLAIN = "infer_plain"


# --- points and episodes ---------------------------------------------------------------

@dataclass
class PointFeatures:
    """Identity vector x(ν, t) = [temporal | static attributes | FCD features]"""
    temporal: np.ndarray
    static_attrs: np.ndarray
    fcd: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.temporal, self.static_attrs, self.fcd]).astype(np.float64)

    @classmethod
    def from_vector(cls, x: np.ndarray, temporal_dim: int, static_dim: int) -> "PointFeatures":
        x = np.asarray(x, dtype=np.float64)
        return cls(x[:temporal_dim], x[temporal_dim:temporal_dim + static_dim], x[temporal_dim + static_dim:])


@dataclass
class ContextPoint:
    x: PointFeatures
    y: float


@dataclass
class TargetPoint:
    x: PointFeatures
    task: SubTask
    y_true: Optional[float] = None


@dataclass
class EpisodeMeta:
    context_segments: np.ndarray
    context_times: np.ndarray
    target_segments: np.ndarray
    target_times: np.ndarray
    t0: int = 0
    history: int = 4
    horizon: int = 4
    feature_split: Tuple[int, int] = (0, 0)


@dataclass
class Episode:
    """One inference task instance, stored as aligned arrays.

    target_y holds NaN where no ground truth is available.
    """
    context_x: np.ndarray
    context_y: np.ndarray
    target_x: np.ndarray
    target_task: np.ndarray
    target_y: np.ndarray
    meta: Optional[EpisodeMeta] = None

    def __post_init__(self):
        self.context_x = np.atleast_2d(np.asarray(self.context_x, dtype=np.float64))
        self.context_y = np.asarray(self.context_y, dtype=np.float64).reshape(-1)
        self.target_x = np.atleast_2d(np.asarray(self.target_x, dtype=np.float64))
        self.target_task = np.asarray(self.target_task, dtype=np.int64).reshape(-1)
        self.target_y = np.asarray(self.target_y, dtype=np.float64).reshape(-1)
        if self.context_x.shape[0] != self.context_y.shape[0]:
            raise ContractError("context_x and context_y disagree in length")
        if not (self.target_x.shape[0] == self.target_task.shape[0] == self.target_y.shape[0]):
            raise ContractError("target arrays disagree in length")
        if self.context_y.size and (not np.all(np.isfinite(self.context_y)) or np.any(self.context_y < 0)):
            raise ContractError("context flows must be finite and non-negative")

    @property
    def n_context(self) -> int:
        return self.context_x.shape[0]

    @property
    def n_targets(self) -> int:
        return self.target_x.shape[0]

    @property
    def x_dim(self) -> int:
        return self.context_x.shape[1]

    @property
    def target_valid(self) -> np.ndarray:
        return np.isfinite(self.target_y)

    def task_index(self, task: SubTask) -> np.ndarray:
        return np.flatnonzero(self.target_task == task.code)

    def context_points(self) -> List[ContextPoint]:
        t_dim, s_dim = self.meta.feature_split if self.meta else (0, 0)
        return [ContextPoint(PointFeatures.from_vector(x, t_dim, s_dim), float(y))
                for x, y in zip(self.context_x, self.context_y)]

    def target_points(self) -> List[TargetPoint]:
        t_dim, s_dim = self.meta.feature_split if self.meta else (0, 0)
        return [TargetPoint(PointFeatures.from_vector(x, t_dim, s_dim), SubTask.from_code(c),
                            None if not np.isfinite(y) else float(y))
                for x, c, y in zip(self.target_x, self.target_task, self.target_y)]

    @classmethod
    def from_points(cls, context: Sequence[ContextPoint], targets: Sequence[TargetPoint],
                    meta: Optional[EpisodeMeta] = None) -> "Episode":
        if not context:
            raise ContractError("an episode needs at least one context point")
        cx = np.stack([p.x.vector() for p in context])
        cy = np.array([p.y for p in context], dtype=np.float64)
        tx = np.stack([p.x.vector() for p in targets]) if targets else np.zeros((0, cx.shape[1]))
        tt = np.array([p.task.code for p in targets], dtype=np.int64)
        ty = np.array([np.nan if p.y_true is None else p.y_true for p in targets], dtype=np.float64)
        return cls(cx, cy, tx, tt, ty, meta)

    def with_context(self, index: np.ndarray) -> "Episode":
        """Same targets, context restricted to the given rows"""
        index = np.asarray(index, dtype=np.int64)
        meta = None
        if self.meta is not None:
            meta = EpisodeMeta(self.meta.context_segments[index], self.meta.context_times[index],
                               self.meta.target_segments, self.meta.target_times, self.meta.t0,
                               self.meta.history, self.meta.horizon, self.meta.feature_split)
        return Episode(self.context_x[index], self.context_y[index], self.target_x,
                       self.target_task, self.target_y, meta)

    def with_targets(self, index: np.ndarray) -> "Episode":
        index = np.asarray(index, dtype=np.int64)
        meta = None
        if self.meta is not None:
            meta = EpisodeMeta(self.meta.context_segments, self.meta.context_times,
                               self.meta.target_segments[index], self.meta.target_times[index],
                               self.meta.t0, self.meta.history, self.meta.horizon, self.meta.feature_split)
        return Episode(self.context_x, self.context_y, self.target_x[index], self.target_task[index],
                       self.target_y[index], meta)


# --- configuration and parameters ---------------------------------------------------------

class ModelConfig(BaseModel):
    """Network sizes; defaults are CPU desk-scale"""
    variant: Variant = Variant.TAANP
    x_dim: int = 21
    rep_dim: int = 128
    latent_dim: int = 64
    hidden_dim: int = 128
    encoder_layers: int = 3
    decoder_layers: int = 3
    heads: int = 4
    dropout_rate: float = 0.1
    sigma_floor: float = 1e-3
    seed: int = 0

    @field_validator("dropout_rate")
    @classmethod
    def _rate(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        return v

    @model_validator(mode="after")
    def _heads_divide(self) -> "ModelConfig":
        if self.rep_dim % self.heads:
            raise ValueError("rep_dim must be divisible by heads")
        if self.encoder_layers < 1 or self.decoder_layers < 1:
            raise ValueError("layer counts must be >= 1")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be > 0")
        return self


def _mlp_sizes(d_in: int, hidden: int, d_out: int, layers: int) -> List[Tuple[int, int]]:
    dims = [d_in] + [hidden] * (layers - 1) + [d_out]
    return list(zip(dims[:-1], dims[1:]))


class ModelParams:
    """All learnable tensors of one NP variant, addressed by stable names.

    For every variant other than TA-ANP the three task query projections alias
    one shared matrix, so there is nothing task-specific to learn.
    """

    def __init__(self, config: ModelConfig, tensors: Dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        if config.variant is Variant.TAANP:
            self.query_projections = {
                SubTask.ESTIMATE_UNOBSERVED: tensors["attn.wq_s"],
                SubTask.FORECAST_OBSERVED: tensors["attn.wq_t"],
                SubTask.FORECAST_UNOBSERVED: tensors["attn.wq_st"],
            }
        else:
            shared = tensors["attn.wq"]
            self.query_projections = {task: shared for task in SUBTASKS}

    @property
    def variant(self) -> Variant:
        return self.config.variant

    @classmethod
    def init(cls, config: ModelConfig, seed: Optional[int] = None) -> "ModelParams":
        rng = RngStream(config.seed if seed is None else seed, 0, (7,))
        tensors: Dict[str, Tensor] = {}

        def linear(prefix: str, d_in: int, d_out: int, bias: bool = True) -> None:
            scale = math.sqrt(2.0 / (d_in + d_out))
            tensors[f"{prefix}.w"] = parameter(rng.normal(0.0, scale, size=(d_in, d_out)))
            if bias:
                tensors[f"{prefix}.b"] = parameter(np.zeros(d_out))

        c = config
        for i, (a, b) in enumerate(_mlp_sizes(c.x_dim + 1, c.hidden_dim, c.rep_dim, c.encoder_layers)):
            linear(f"encoder.{i}", a, b)
        if c.variant.has_latent:
            linear("latent.0", c.rep_dim, c.hidden_dim)
            linear("latent.1", c.hidden_dim, 2 * c.latent_dim)
        # attention projections exist for every variant so ablations share a layout
        linear("embed.0", c.x_dim, c.hidden_dim)
        linear("embed.1", c.hidden_dim, c.rep_dim)
        if c.variant is Variant.TAANP:
            for name in ("wq_s", "wq_t", "wq_st"):
                linear(f"attn.{name}", c.rep_dim, c.rep_dim, bias=False)
                tensors[f"attn.{name}"] = tensors.pop(f"attn.{name}.w")
        else:
            linear("attn.wq", c.rep_dim, c.rep_dim, bias=False)
            tensors["attn.wq"] = tensors.pop("attn.wq.w")
        for name in ("wk", "wv", "wo"):
            linear(f"attn.{name}", c.rep_dim, c.rep_dim, bias=False)
            tensors[f"attn.{name}"] = tensors.pop(f"attn.{name}.w")
        for i, (a, b) in enumerate(_mlp_sizes(decoder_input_dim(c), c.hidden_dim, 2, c.decoder_layers)):
            linear(f"decoder.{i}", a, b)
        logger.info(f"🧠 Initialized {c.variant.value} parameters: {sum(t.size for t in tensors.values())} weights")
        return cls(config, tensors)

    def named(self) -> List[Tuple[str, Tensor]]:
        return list(self.tensors.items())

    def parameters(self) -> List[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name, t in self.tensors.items():
            if state[name].shape != t.shape:
                raise ConfigError(f"tensor '{name}' has shape {state[name].shape}, expected {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)

    def copy(self) -> "ModelParams":
        clone = ModelParams(self.config, {name: parameter(t.data.copy()) for name, t in self.tensors.items()})
        return clone

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def with_variant(self, variant: Variant) -> "ModelParams":
        """Re-wrap compatible tensors under another variant (TA-ANP ↔ ANP with tied queries)"""
        tensors = dict(self.tensors)
        if variant is Variant.TAANP and "attn.wq" in tensors:
            shared = tensors.pop("attn.wq")
            for name in ("wq_s", "wq_t", "wq_st"):
                tensors[f"attn.{name}"] = parameter(shared.data.copy())
        elif variant is not Variant.TAANP and "attn.wq_s" in tensors:
            tensors["attn.wq"] = tensors.pop("attn.wq_s")
            tensors.pop("attn.wq_t")
            tensors.pop("attn.wq_st")
        return ModelParams(self.config.model_copy(update={"variant": variant}), tensors)


def decoder_input_dim(config: ModelConfig) -> int:
    v = config.variant
    if v is Variant.CNP:
        return config.x_dim + config.rep_dim
    if v is Variant.LNP:
        return config.x_dim + config.latent_dim
    return config.x_dim + config.rep_dim + config.latent_dim


@dataclass
class DropoutState:
    """Whether dropout is live and which stream feeds its masks"""
    rate: float = 0.0
    active: bool = False
    rng: Optional[RngStream] = None

    def apply(self, x: Tensor) -> Tensor:
        if not self.active or self.rate == 0.0:
            return x
        return dropout(x, self.rate, self.rng, True)


NO_DROPOUT = DropoutState()


def _mlp(params: ModelParams, prefix: str, x: Tensor, layers: int, drop: DropoutState) -> Tensor:
    h = x
    for i in range(layers):
        h = matmul(h, params.tensors[f"{prefix}.{i}.w"]) + params.tensors[f"{prefix}.{i}.b"]
        if i < layers - 1:
            h = drop.apply(h.relu())
    return h


# --- components -------------------------------------------------------------------------------

@dataclass
class LatentState:
    mu_z: Tensor
    sigma_z: Tensor
    z_sample: Optional[Tensor] = None


@dataclass
class GaussianPrediction:
    mu: Tensor
    sigma: Tensor

    @property
    def mean(self) -> np.ndarray:
        return self.mu.data

    @property
    def std(self) -> np.ndarray:
        return self.sigma.data

    def __len__(self) -> int:
        return self.mu.shape[0]


def encode_context(params: ModelParams, context_x: np.ndarray, context_y: np.ndarray,
                   drop: DropoutState = NO_DROPOUT) -> Tensor:
    """r_i = h_θ(x_i, y_i), one row per context point"""
    context_x = np.atleast_2d(np.asarray(context_x, dtype=np.float64))
    if context_x.shape[0] < 1:
        raise ContractError("encode_context needs a non-empty context")
    if context_x.shape[1] != params.config.x_dim:
        raise ConfigError(f"feature dim {context_x.shape[1]} does not match model x_dim {params.config.x_dim}")
    inputs = np.concatenate([context_x, np.asarray(context_y, dtype=np.float64).reshape(-1, 1)], axis=1)
    return _mlp(params, "encoder", Tensor(inputs), params.config.encoder_layers, drop)


def aggregate_mean(reps: Tensor) -> Tensor:
    """Permutation-invariant summary R (bit-identical under reordering)"""
    reps = as_tensor(reps)
    if reps.ndim != 2 or reps.shape[0] < 1:
        raise ContractError("aggregate_mean needs at least one representation")
    return stable_mean_rows(reps)


def latent_posterior(params: ModelParams, summary: Tensor, rng: Optional[RngStream] = None,
                     sample: bool = False) -> LatentState:
    """q(z | ·) = N(μ_z, softplus(raw)²); reparameterized draw when requested"""
    if not params.variant.has_latent:
        raise ContractError(f"variant {params.variant.value} has no latent path")
    h = matmul(as_tensor(summary).reshape(1, -1), params.tensors["latent.0.w"]) + params.tensors["latent.0.b"]
    out = matmul(h.relu(), params.tensors["latent.1.w"]) + params.tensors["latent.1.b"]
    d = params.config.latent_dim
    mu_z = out[:, :d].reshape(d)
    sigma_z = out[:, d:].reshape(d).softplus()
    state = LatentState(mu_z, sigma_z)
    if sample:
        if rng is None:
            raise ContractError("sampling z needs an RngStream")
        eps = rng.normal(size=d)
        state.z_sample = mu_z + sigma_z * eps
    return state


def select_query_projection(params: ModelParams, task: SubTask) -> Tensor:
    """W^Q for the task tag (aliased for every variant except TA-ANP)"""
    if not isinstance(task, SubTask) or task not in params.query_projections:
        raise ContractError(f"unknown task tag {task!r}")
    return params.query_projections[task]


def embed_points(params: ModelParams, x: np.ndarray) -> Tensor:
    """Shared x-side embedding used for both queries and keys"""
    h = matmul(Tensor(np.atleast_2d(x)), params.tensors["embed.0.w"]) + params.tensors["embed.0.b"]
    return matmul(h.relu(), params.tensors["embed.1.w"]) + params.tensors["embed.1.b"]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    rows, width = x.shape
    return x.reshape(rows, heads, width // heads).swapaxes(0, 1)


def _attend(params: ModelParams, keys: Tensor, values: Tensor, queries: Tensor, task: SubTask) -> Tensor:
    heads = params.config.heads
    d_head = params.config.rep_dim // heads
    q = _split_heads(matmul(queries, select_query_projection(params, task)), heads)
    k = _split_heads(keys, heads)
    v = _split_heads(values, heads)
    weights = softmax_lastdim(matmul(q, k.T) * (1.0 / math.sqrt(d_head)))
    out = matmul(weights, v).swapaxes(0, 1)
    m = out.shape[0]
    return matmul(out.reshape(m, params.config.rep_dim), params.tensors["attn.wo"])


def attention_weights(params: ModelParams, context_x: np.ndarray, target_x: np.ndarray, task: SubTask) -> np.ndarray:
    """Per-head attention weights (heads × m × n), for inspection"""
    heads = params.config.heads
    d_head = params.config.rep_dim // heads
    keys = matmul(embed_points(params, context_x), params.tensors["attn.wk"])
    q = _split_heads(matmul(embed_points(params, target_x), select_query_projection(params, task)), heads)
    k = _split_heads(keys, heads)
    return softmax_lastdim(matmul(q, k.T) * (1.0 / math.sqrt(d_head))).data


def cross_attention(params: ModelParams, context_x: np.ndarray, reps: Tensor, target_x: np.ndarray,
                    task: SubTask) -> Tensor:
    """r_T for targets of one task: softmax(Q'K'ᵀ/√d_h)·V' per head, concatenated and projected"""
    if np.atleast_2d(context_x).shape[0] < 1:
        raise ContractError("cross_attention needs at least one context point")
    keys = matmul(embed_points(params, context_x), params.tensors["attn.wk"])
    values = matmul(as_tensor(reps), params.tensors["attn.wv"])
    return _attend(params, keys, values, embed_points(params, target_x), task)


def _repeat(row: Tensor, m: int) -> Tensor:
    return matmul(Tensor(np.ones((m, 1))), as_tensor(row).reshape(1, -1))


def decode(params: ModelParams, target_x: np.ndarray, z: Optional[Tensor] = None,
           rep: Optional[Tensor] = None, drop: DropoutState = NO_DROPOUT) -> GaussianPrediction:
    """(μ, σ) per target; rep is R (CNP) or r_T rows (ANP/TA-ANP)"""
    target_x = np.atleast_2d(np.asarray(target_x, dtype=np.float64))
    m = target_x.shape[0]
    variant = params.variant
    parts: List[Tensor] = [Tensor(target_x)]
    if variant is Variant.CNP:
        if rep is None:
            raise ContractError("CNP decode needs the summary R")
        parts.append(_repeat(rep, m))
    elif variant is Variant.LNP:
        if z is None:
            raise ContractError("LNP decode needs z")
        parts.append(_repeat(z, m))
    else:
        if z is None or rep is None:
            raise ContractError(f"{variant.value} decode needs both z and r_T")
        rep = as_tensor(rep)
        if rep.ndim != 2 or rep.shape[0] != m:
            raise ContractError("r_T must hold one row per target")
        parts.extend([rep, _repeat(z, m)])
    out = _mlp(params, "decoder", concat(parts, axis=1), params.config.decoder_layers, drop)
    mu = out[:, 0]
    sigma = out[:, 1].softplus() + params.config.sigma_floor
    return GaussianPrediction(mu, sigma)


@dataclass
class ForwardResult:
    prediction: GaussianPrediction
    latent: Optional[LatentState] = None
    summary: Optional[Tensor] = None


def _dropout_for(params: ModelParams, mode: ForwardMode, rng: Optional[RngStream],
                 rate: Optional[float]) -> DropoutState:
    rate = params.config.dropout_rate if rate is None else rate
    active = mode is not ForwardMode.INFER_PLAIN and rate > 0.0
    if active and rng is None:
        raise ContractError("dropout needs an RngStream")
    return DropoutState(rate, active, rng.derive(0) if active else None)


def forward(params: ModelParams, episode: Episode, rng: Optional[RngStream] = None,
            mode: ForwardMode = ForwardMode.INFER_PLAIN, dropout_rate: Optional[float] = None,
            latent_context: Optional[Episode] = None, z_override: Optional[Tensor] = None) -> ForwardResult:
    """encode → aggregate → latent → per-task attention → decode.

    latent_context lets training draw z from a subsampled context C' while the
    deterministic path still sees the full context.
    """
    if episode.n_context < 1:
        raise ContractError("forward needs at least one context point")
    drop = _dropout_for(params, mode, rng, dropout_rate)
    variant = params.variant
    reps = encode_context(params, episode.context_x, episode.context_y, drop)
    summary = aggregate_mean(reps)

    latent = None
    z = None
    if variant.has_latent:
        if latent_context is not None:
            latent_reps = encode_context(params, latent_context.context_x, latent_context.context_y, drop)
            latent_summary = aggregate_mean(latent_reps)
        else:
            latent_summary = summary
        # at inference z is redrawn only together with a live dropout mask
        sample = mode is ForwardMode.TRAIN or (mode is ForwardMode.INFER_MC and drop.active)
        if sample and rng is None:
            raise ContractError("sampling z needs an RngStream")
        latent = latent_posterior(params, latent_summary, rng.derive(1) if sample else None, sample)
        z = latent.z_sample if sample else latent.mu_z
        if z_override is not None:
            z = z_override

    if episode.n_targets == 0:
        empty = Tensor(np.zeros(0))
        return ForwardResult(GaussianPrediction(empty, empty), latent, summary)

    if not variant.has_attention:
        prediction = decode(params, episode.target_x, z=z, rep=summary, drop=drop)
        return ForwardResult(prediction, latent, summary)

    keys = matmul(embed_points(params, episode.context_x), params.tensors["attn.wk"])
    values = matmul(reps, params.tensors["attn.wv"])
    groups = []
    order = []
    for task in SUBTASKS:
        index = episode.task_index(task)
        if index.size == 0:
            continue
        queries = embed_points(params, episode.target_x[index])
        r_t = _attend(params, keys, values, queries, task)
        groups.append(decode(params, episode.target_x[index], z=z, rep=r_t, drop=drop))
        order.append(index)
    order_all = np.concatenate(order)
    inverse = np.empty_like(order_all)
    inverse[order_all] = np.arange(order_all.size)
    mu = take_rows(concat([g.mu for g in groups], axis=0), inverse)
    sigma = take_rows(concat([g.sigma for g in groups], axis=0), inverse)
    return ForwardResult(GaussianPrediction(mu, sigma), latent, summary)
