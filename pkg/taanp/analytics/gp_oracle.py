"""
Exact Gaussian-process oracle on small 1-D regression episodes.

The GP posterior is the best achievable predictive distribution for data
drawn from its own prior, so the mean CRPS of a trained neural process on
these episodes can be judged against it.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from taanp.analytics.metrics import crps_gaussian
from taanp.diffcore import RngStream, backward
from taanp.errors import ConfigError, SkipEpisode
from taanp.npmodel import Episode, ForwardMode, ModelParams, SubTask, forward
from taanp.training import AdamW, TrainingConfig, clip_grad_norm, elbo_loss

logger = logging.getLogger(__name__)

JITTER = 1e-9


@dataclass
class RbfKernel:
    lengthscale: float = 0.4
    signal_std: float = 1.0
    noise_std: float = 0.1
    offset: float = 5.0  # constant prior mean; keeps values in the non-negative flow domain

    def __post_init__(self):
        if self.lengthscale <= 0 or self.signal_std <= 0 or self.noise_std < 0:
            raise ConfigError("kernel needs lengthscale > 0, signal_std > 0, noise_std >= 0")

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64).reshape(-1, 1)
        b = np.asarray(b, dtype=np.float64).reshape(1, -1)
        return self.signal_std ** 2 * np.exp(-0.5 * ((a - b) / self.lengthscale) ** 2)


def rbf_episode(n_context: int, n_target: int, kernel: RbfKernel, rng: RngStream,
                x_range: Tuple[float, float] = (-2.0, 2.0)) -> Episode:
    """One function draw from the GP prior, split into context and target points"""
    if n_context < 1 or n_target < 1:
        raise ConfigError("need at least one context and one target point")
    n = n_context + n_target
    x = rng.uniform(x_range[0], x_range[1], size=n)
    cov = kernel(x, x) + JITTER * np.eye(n)
    f = np.linalg.cholesky(cov) @ rng.normal(size=n)
    y = np.maximum(kernel.offset + f + kernel.noise_std * rng.normal(size=n), 0.0)
    return Episode(
        context_x=x[:n_context, None],
        context_y=y[:n_context],
        target_x=x[n_context:, None],
        target_task=np.full(n_target, SubTask.ESTIMATE_UNOBSERVED.code),
        target_y=y[n_context:],
    )


def gp_posterior(episode: Episode, kernel: RbfKernel) -> Tuple[np.ndarray, np.ndarray]:
    """Predictive mean and std of noisy targets given the context, by Cholesky solve"""
    xc = episode.context_x[:, 0]
    xt = episode.target_x[:, 0]
    k_cc = kernel(xc, xc) + (kernel.noise_std ** 2 + JITTER) * np.eye(xc.size)
    k_ct = kernel(xc, xt)
    factor = cho_factor(k_cc, lower=True)
    mu = kernel.offset + k_ct.T @ cho_solve(factor, episode.context_y - kernel.offset)
    var = kernel.signal_std ** 2 - np.sum(k_ct * cho_solve(factor, k_ct), axis=0) + kernel.noise_std ** 2
    return mu, np.sqrt(np.maximum(var, JITTER))


def gp_crps(episode: Episode, kernel: RbfKernel) -> float:
    mu, sigma = gp_posterior(episode, kernel)
    return float(np.mean(crps_gaussian(mu, sigma, episode.target_y)))


def model_crps(params: ModelParams, episode: Episode) -> float:
    """Mean CRPS of the deterministic (infer_plain) predictive Gaussian"""
    prediction = forward(params, episode, None, ForwardMode.INFER_PLAIN).prediction
    return float(np.mean(crps_gaussian(prediction.mean, prediction.std, episode.target_y)))


def fit_on_gp_tasks(params: ModelParams, kernel: RbfKernel, config: TrainingConfig, steps: int,
                    max_context: int = 20, n_target: int = 20) -> ModelParams:
    """Meta-train on a stream of fresh GP draws (one AdamW step per batch)"""
    optimizer = AdamW(params, config.lr, config.weight_decay, config.betas, config.eps)
    for step in range(steps):
        rng = RngStream(config.seed, 40, (step,))
        losses = []
        for j in range(config.batch_episodes):
            episode_rng = rng.derive(j)
            n_context = int(episode_rng.integers(3, max_context + 1))
            episode = rbf_episode(n_context, n_target, kernel, episode_rng.derive(0))
            try:
                losses.append(elbo_loss(params, episode, episode_rng.derive(1), config).loss)
            except SkipEpisode:
                continue
        total = losses[0]
        for loss in losses[1:]:
            total = total + loss
        total = total * (1.0 / len(losses))
        params.zero_grad()
        backward(total)
        clip_grad_norm(params, config.clip_norm)
        optimizer.step()
        if step % 200 == 0:
            logger.info(f"🔧 GP meta-training step {step}: loss={total.item():.4f}")
    return params
