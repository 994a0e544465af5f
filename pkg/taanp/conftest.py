import numpy as np
import pytest

from taanp.diffcore import RngStream
from taanp.features import FEATURE_DIM, FeatureBuilder
from taanp.npmodel import Episode, ModelConfig, ModelParams, Variant
from taanp.synthworld import WorldConfig, generate_world
from taanp.training import EpisodeSampler, TrainingConfig


@pytest.fixture(scope="session")
def tiny_world_config():
    return WorldConfig(n_segments=10, horizon_days=2, intervals_per_day=24, missing_rate=0.05, seed=3)


@pytest.fixture(scope="session")
def tiny_world(tiny_world_config):
    return generate_world(tiny_world_config)


@pytest.fixture
def tiny_training_config():
    return TrainingConfig(history=3, horizon=2, batch_episodes=2, episodes_per_epoch=4, max_epochs=2, patience=2,
                          train_fraction=0.5, val_fraction=0.2, seed=1)


@pytest.fixture
def tiny_features(tiny_world, tiny_training_config):
    return FeatureBuilder.fit(tiny_world, time_limit=int(tiny_training_config.train_fraction * tiny_world.n_intervals))


@pytest.fixture
def tiny_sampler(tiny_world, tiny_features, tiny_training_config):
    return EpisodeSampler.from_config(tiny_world, tiny_features, tiny_training_config)


def small_config(variant=Variant.TAANP, x_dim=FEATURE_DIM, **overrides):
    values = dict(variant=variant, x_dim=x_dim, rep_dim=8, latent_dim=4, hidden_dim=8, encoder_layers=2,
                  decoder_layers=2, heads=2, dropout_rate=0.1, seed=5)
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def tiny_params():
    return ModelParams.init(small_config())


def random_episode(x_dim=5, n_context=6, tasks=(0, 1, 2, 0, 1, 2), seed=0):
    rng = RngStream(seed, 99)
    return Episode(
        context_x=rng.normal(size=(n_context, x_dim)),
        context_y=rng.uniform(0.5, 2.0, size=n_context),
        target_x=rng.normal(size=(len(tasks), x_dim)),
        target_task=np.asarray(tasks),
        target_y=rng.uniform(0.5, 2.0, size=len(tasks)),
    )
