"""
Shared fixtures: a logger, a small run configuration, and a small synthetic
dataset that matches it.
"""

import pytest
import structlog

from finematch.config.settings import RunConfig
from finematch.service.synth import synth_pairs


@pytest.fixture(scope="session")
def logger():
    yield structlog.get_logger()


@pytest.fixture(scope="session")
def small_config():
    yield RunConfig(
        dim=8,
        n_entities=3,
        m_relations=2,
        heads=2,
        ffn_ratio=2,
        num_layers=1,
        batch_size=4,
        epochs=2,
        lr0=1e-3,
        step_size=1,
        gamma=0.5,
        weight_decay=0.0,
        seed=3,
    )


@pytest.fixture(scope="session")
def small_dataset():
    yield synth_pairs(
        8, dim=8, n_entities=3, m_relations=2, noise_sigma=0.2, seed=5
    )
