import math

import numpy as np
import pytest

from taanp.analytics.metrics import rmse
from taanp.conftest import random_episode, small_config
from taanp.diffcore import RngStream, backward, finite_difference_grad, parameter, relative_error
from taanp.errors import ConfigError, ContractError, NumericError, SkipEpisode
from taanp.npmodel import (ForwardMode, ModelParams, SubTask, Variant, aggregate_mean, encode_context, forward,
                           latent_posterior)
from taanp.training import (STREAM_VAL, AdamW, Ablation, EpisodeSampler, LossBreakdown, Split, TrainingConfig,
                            ablation_sign_test, ablation_variant, build_episode, clip_grad_norm, elbo_loss,
                            gaussian_kl, gaussian_nll, iter_episodes, mean_loss, paired_sign_test, pseudo_split,
                            subsample_for_kl, train)


def test_windows_respect_the_time_split(tiny_sampler):
    assert tiny_sampler.train_end == 24
    train = tiny_sampler.train_windows()
    test = tiny_sampler.test_windows()
    assert train[0] == 2 and train[-1] + 2 < 24
    assert test[0] - 2 >= 24 and test[-1] + 2 <= 47
    fit, val = tiny_sampler.split_windows(1, 0.2)
    assert set(fit).isdisjoint(val)
    assert sorted(np.concatenate([fit, val])) == sorted(train)


def test_test_episode_blocks(tiny_sampler):
    episode = build_episode(tiny_sampler, 30)
    observed, unobserved = tiny_sampler.observed, tiny_sampler.unobserved
    counts = np.bincount(episode.target_task, minlength=3)
    assert counts.tolist() == [unobserved.size * 3, observed.size * 2, unobserved.size * 2]
    assert set(episode.meta.context_segments) <= set(observed)
    assert np.all((episode.meta.context_times >= 28) & (episode.meta.context_times <= 30))
    forecast = episode.target_task != SubTask.ESTIMATE_UNOBSERVED.code
    assert np.all(episode.meta.target_times[forecast] > 30)
    invalid = ~tiny_sampler.world.mask.valid[episode.meta.target_segments, episode.meta.target_times]
    assert np.all(np.isnan(episode.target_y[invalid]))


def test_training_episodes_never_see_virtual_sensors(tiny_sampler):
    virtual = set(tiny_sampler.unobserved)
    for i in range(5):
        episode = build_episode(tiny_sampler, 10, RngStream(0, 1, (i,)), Split.TRAIN)
        assert virtual.isdisjoint(episode.meta.context_segments)
        assert virtual.isdisjoint(episode.meta.target_segments)


def test_window_bounds(tiny_sampler):
    with pytest.raises(ContractError):
        build_episode(tiny_sampler, 1)
    with pytest.raises(ContractError):
        build_episode(tiny_sampler, 46)
    with pytest.raises(ContractError):
        build_episode(tiny_sampler, 10, None, Split.TRAIN)


def test_sampler_needs_sensors(tiny_world, tiny_features):
    bare = tiny_world.with_sensors(None)
    with pytest.raises(ConfigError):
        EpisodeSampler(bare, tiny_features)


def test_pseudo_split_sizes():
    observed = np.arange(10)
    kept, hidden = pseudo_split(observed, (0.4, 0.4), RngStream(0))
    assert hidden.size == 4 and kept.size == 6
    kept, hidden = pseudo_split(np.array([3]), (0.4, 0.8), RngStream(0))
    assert kept.tolist() == [3] and hidden.size == 0


def test_subsample_for_kl_size():
    episode = random_episode()
    c_prime, t_prime = subsample_for_kl(episode, RngStream(0), (0.5, 0.5))
    # |T'| = 6 context + 6 supervised targets
    assert c_prime.n_context == 6
    assert t_prime.n_context == 12
    c_small, _ = subsample_for_kl(episode, RngStream(0), (0.1, 0.1))
    assert c_small.n_context == 1


def test_gaussian_kl_and_nll_values():
    assert gaussian_kl(np.zeros(3), np.ones(3), np.zeros(3), np.ones(3)).item() == pytest.approx(0.0)
    kl = gaussian_kl(np.array([1.0]), np.array([1.0]), np.array([0.0]), np.array([2.0])).item()
    assert kl == pytest.approx(math.log(2.0) + (1.0 + 1.0) / 8.0 - 0.5)
    nll = gaussian_nll(np.array([1.0, 3.0]), parameter(np.array([1.0, 1.0])), np.array([1.0, 2.0])).item()
    assert nll == pytest.approx(0.5 * (0.0 + 0.5 + math.log(2.0)))


def test_elbo_loss_components():
    episode = random_episode()
    config = TrainingConfig(beta=0.5)
    params = ModelParams.init(small_config(x_dim=5))
    loss = elbo_loss(params, episode, RngStream(0), config)
    assert loss.kl >= 0.0
    assert loss.total == pytest.approx(loss.nll + 0.5 * loss.kl)
    assert loss.n_targets == 6
    cnp = ModelParams.init(small_config(Variant.CNP, x_dim=5))
    assert elbo_loss(cnp, episode, RngStream(0), config).kl == 0.0
    empty = episode.with_targets(np.array([0]))
    empty.target_y[:] = np.nan
    with pytest.raises(SkipEpisode):
        elbo_loss(params, empty, RngStream(0), config)


def test_adamw_skips_parameters_without_gradients():
    params = ModelParams.init(small_config(x_dim=5))
    optimizer = AdamW(params, lr=1e-2, weight_decay=0.1)
    untouched = params.tensors["attn.wq_st"].data.copy()
    episode = random_episode().with_targets(np.array([0, 3]))
    loss = elbo_loss(params, episode, RngStream(0), TrainingConfig())
    params.zero_grad()
    backward(loss.loss)
    optimizer.step()
    np.testing.assert_array_equal(params.tensors["attn.wq_st"].data, untouched)
    assert optimizer.step_count == 1


def test_clip_grad_norm():
    params = ModelParams.init(small_config(x_dim=5))
    for t in params.parameters():
        t.grad = np.ones_like(t.data)
    total = sum(t.size for t in params.parameters())
    assert clip_grad_norm(params, 5.0) == pytest.approx(math.sqrt(total))
    clipped = math.sqrt(sum(float(np.sum(t.grad ** 2)) for t in params.parameters()))
    assert clipped == pytest.approx(5.0, rel=1e-9)
    params.parameters()[0].grad[0] = np.inf
    with pytest.raises(NumericError):
        clip_grad_norm(params, 5.0)


def test_ablation_switches():
    model, training = small_config(), TrainingConfig()
    assert ablation_variant(model, training, "full").model.variant is Variant.TAANP
    assert ablation_variant(model, training, Ablation.NO_TAMQM).model.variant is Variant.ANP
    no_drop = ablation_variant(model, training, "no_dropout")
    assert no_drop.model.dropout_rate == 0.0 and no_drop.training.dropout_rate == 0.0
    assert ablation_variant(model, training, "plain_dropout").inference_mode is ForwardMode.INFER_PLAIN
    with pytest.raises(ConfigError):
        ablation_variant(model, training, "no_attention")


def test_sign_tests():
    result = paired_sign_test([2.0] * 8, [1.0] * 8)
    assert result.wins == 8 and result.trials == 8
    assert result.p_value == pytest.approx(0.5 ** 8)
    assert paired_sign_test([1.0, 1.0], [1.0, 1.0]).p_value == 1.0
    assert ablation_sign_test([1.0] * 6, [2.0] * 6).wins == 6


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(context_subsample_range=(0.8, 0.3))
    with pytest.raises(ValueError):
        TrainingConfig(drop_fcd=["speed"])
    with pytest.raises(ValueError):
        TrainingConfig(fixed_sigma=0.0)


@pytest.mark.slow
def test_training_reduces_validation_loss_and_resumes_bit_identically(tiny_sampler, tiny_training_config):
    config = tiny_training_config.model_copy(update={"max_epochs": 3, "patience": 5})
    params = ModelParams.init(small_config())
    _, val_windows = tiny_sampler.split_windows(config.seed, config.val_fraction)
    val_episodes = iter_episodes(tiny_sampler, val_windows, config.seed, STREAM_VAL, Split.VAL)
    assert val_episodes
    initial = mean_loss(params, val_episodes, config.seed, STREAM_VAL + 100, config).total
    full = train(params.copy(), tiny_sampler, config)
    assert len(full.history) == 3
    assert all(np.isfinite(r.val_total) for r in full.history)
    assert full.best_val < initial
    assert full.history[-1].val_total < initial

    saved = {}

    def keep_first(state, current):
        if state.epoch == 1:
            saved["state"] = current.state()
            saved["train"] = state

    first = params.copy()
    train(first, tiny_sampler, config.model_copy(update={"max_epochs": 1}), checkpoint_fn=keep_first)
    resumed_params = params.copy()
    resumed_params.load_state(saved["state"])
    resumed = train(resumed_params, tiny_sampler, config, resume=saved["train"])
    assert resumed.history[-1].val_total == full.history[-1].val_total
    assert resumed.params.checksum() == full.params.checksum()


def _directional_derivative(fn, param, direction, step=1e-5):
    original = param.data.copy()
    param.data = original + step * direction
    plus = fn().item()
    param.data = original - step * direction
    minus = fn().item()
    param.data = original
    return (plus - minus) / (2.0 * step)


def test_elbo_gradient_matches_finite_differences_on_random_episodes():
    params = ModelParams.init(small_config(x_dim=5, dropout_rate=0.0))
    config = TrainingConfig(dropout_rate=0.0)
    for seed in range(20):
        episode = random_episode(seed=seed)

        def loss(episode=episode, seed=seed):
            return elbo_loss(params, episode, RngStream(seed, 7), config).loss

        params.zero_grad()
        backward(loss())
        analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for name, t in params.named()}
        direction_rng = RngStream(seed, 8)
        for name, tensor in params.named():
            if tensor.size <= 40:
                error = relative_error(analytic[name], finite_difference_grad(loss, tensor))
            else:
                direction = direction_rng.normal(size=tensor.shape)
                numeric = _directional_derivative(loss, tensor, direction)
                error = relative_error(np.array([np.sum(analytic[name] * direction)]), np.array([numeric]))
            assert error < 1e-3, f"{name} on episode {seed}: {error:.2e}"


def test_without_kl_and_with_fixed_sigma_the_loss_is_half_the_mse():
    episode = random_episode()
    config = TrainingConfig(beta=0.0, fixed_sigma=1.0, dropout_rate=0.0)
    cnp = ModelParams.init(small_config(Variant.CNP, x_dim=5, dropout_rate=0.0))
    mu = forward(cnp, episode).prediction.mean
    loss = elbo_loss(cnp, episode, RngStream(0), config)
    assert loss.total == pytest.approx(0.5 * rmse(episode.target_y, mu) ** 2, rel=1e-12)
    assert loss.nll == pytest.approx(0.5 * float(np.mean((episode.target_y - mu) ** 2)), rel=1e-12)

    taanp = ModelParams.init(small_config(x_dim=5))
    latent = elbo_loss(taanp, episode, RngStream(0), config)
    assert latent.kl > 0.0
    assert latent.total == latent.nll


def test_zero_learning_rate_leaves_parameters_untouched():
    params = ModelParams.init(small_config(x_dim=5))
    before = {name: t.data.tobytes() for name, t in params.named()}
    optimizer = AdamW(params, lr=0.0, weight_decay=0.5)
    for seed in range(3):
        params.zero_grad()
        backward(elbo_loss(params, random_episode(seed=seed), RngStream(seed), TrainingConfig()).loss)
        optimizer.step()
    assert optimizer.step_count == 3
    assert {name: t.data.tobytes() for name, t in params.named()} == before


def test_kl_between_context_posteriors_is_never_negative():
    params = ModelParams.init(small_config(x_dim=5))
    for i in range(50):
        episode = random_episode(seed=i % 5)
        c_prime, t_prime = subsample_for_kl(episode, RngStream(i), (0.3, 1.0))
        q_c = latent_posterior(params, aggregate_mean(encode_context(params, c_prime.context_x, c_prime.context_y)))
        q_t = latent_posterior(params, aggregate_mean(encode_context(params, t_prime.context_x, t_prime.context_y)))
        assert gaussian_kl(q_c.mu_z, q_c.sigma_z, q_t.mu_z, q_t.sigma_z).item() >= 0.0
        assert gaussian_kl(q_c.mu_z, q_c.sigma_z, q_c.mu_z, q_c.sigma_z).item() == 0.0


def test_validation_loss_runs_without_dropout():
    params = ModelParams.init(small_config(x_dim=5))
    episodes = [random_episode(seed=s) for s in range(4)]
    heavy = mean_loss(params, episodes, 0, STREAM_VAL, TrainingConfig(dropout_rate=0.5))
    none = mean_loss(params, episodes, 0, STREAM_VAL, TrainingConfig(dropout_rate=0.0))
    assert heavy.total == none.total and heavy.nll == none.nll
    expected = np.mean([elbo_loss(params, e, RngStream(0, STREAM_VAL, (i,)), TrainingConfig(dropout_rate=0.0)).total
                        for i, e in enumerate(episodes)])
    assert none.total == pytest.approx(expected, rel=1e-12)


@pytest.mark.slow
def test_early_stopping_returns_the_best_snapshot(tiny_sampler, tiny_training_config, monkeypatch):
    scripted = iter([3.0, 1.0, 2.0, 5.0, 4.0])

    def scripted_val(*args, **kwargs):
        value = next(scripted)
        return LossBreakdown(value, 0.0, value)

    monkeypatch.setattr("taanp.training.mean_loss", scripted_val)
    snapshots = {}

    def keep(state, current):
        snapshots[state.epoch] = current.checksum()

    config = tiny_training_config.model_copy(update={"max_epochs": 5, "patience": 2})
    result = train(ModelParams.init(small_config()), tiny_sampler, config, checkpoint_fn=keep)
    assert [r.epoch for r in result.history] == [1, 2, 3, 4]
    assert result.stopped_early and result.best_epoch == 2 and result.best_val == 1.0
    assert result.params.checksum() == snapshots[2]
    assert result.params.checksum() != snapshots[4]
