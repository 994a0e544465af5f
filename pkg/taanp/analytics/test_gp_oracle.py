import numpy as np
import pytest

from taanp.analytics.gp_oracle import RbfKernel, fit_on_gp_tasks, gp_crps, gp_posterior, model_crps, rbf_episode
from taanp.conftest import small_config
from taanp.diffcore import RngStream
from taanp.errors import ConfigError
from taanp.npmodel import ModelParams
from taanp.training import TrainingConfig


def test_rbf_episodes_are_non_negative_and_reproducible():
    kernel = RbfKernel()
    a = rbf_episode(5, 7, kernel, RngStream(0))
    b = rbf_episode(5, 7, kernel, RngStream(0))
    assert a.n_context == 5 and a.n_targets == 7
    np.testing.assert_array_equal(a.target_y, b.target_y)
    assert np.all(a.context_y >= 0)
    with pytest.raises(ConfigError):
        rbf_episode(0, 3, kernel, RngStream(0))
    with pytest.raises(ConfigError):
        RbfKernel(lengthscale=0.0)


def test_gp_posterior_interpolates_noise_free_context():
    kernel = RbfKernel(noise_std=0.0)
    episode = rbf_episode(6, 1, kernel, RngStream(1))
    at_context = episode.with_targets(np.array([0]))
    at_context.target_x[:] = episode.context_x[:1]
    mu, sigma = gp_posterior(at_context, kernel)
    assert mu[0] == pytest.approx(episode.context_y[0], abs=1e-3)
    assert sigma[0] < 1e-2


def test_gp_oracle_beats_an_untrained_model():
    kernel = RbfKernel()
    episodes = [rbf_episode(10, 20, kernel, RngStream(2, 0, (i,))) for i in range(5)]
    oracle = np.mean([gp_crps(ep, kernel) for ep in episodes])
    params = ModelParams.init(small_config(x_dim=1))
    assert oracle < np.mean([model_crps(params, ep) for ep in episodes])


@pytest.mark.slow
def test_gp_meta_training_reduces_crps():
    kernel = RbfKernel()
    episodes = [rbf_episode(10, 20, kernel, RngStream(3, 0, (i,))) for i in range(10)]
    params = ModelParams.init(small_config(x_dim=1, dropout_rate=0.0))
    before = np.mean([model_crps(params, ep) for ep in episodes])
    fit_on_gp_tasks(params, kernel, TrainingConfig(batch_episodes=4, lr=5e-3), steps=150)
    after = np.mean([model_crps(params, ep) for ep in episodes])
    assert after < before
