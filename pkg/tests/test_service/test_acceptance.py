"""
End-to-end runs on the reference synthetic recipe: train on 512 pairs, then
score 128 held-out pairs and 200 attribute-swap triples.
"""

import pytest

from finematch.config.settings import RunConfig
from finematch.core.models import InferenceWeights
from finematch.service.inference import eval_binary, eval_dataset
from finematch.service.synth import synth_binary_triples, synth_pairs
from finematch.service.training import train

pytestmark = pytest.mark.slow

SHAPE = dict(dim=32, n_entities=10, m_relations=10, noise_sigma=0.25, global_noise_sigma=0.6)
BASE_ONLY = InferenceWeights(alpha1=0.0, alpha2=0.0, beta1=0.0)


def recipe(**changes):
    return RunConfig(
        dim=32,
        n_entities=10,
        m_relations=10,
        epochs=30,
        batch_size=64,
        lr0=1e-4,
        temperature=0.07,
        clip_grad_norm=1.0,
        seed=0,
        **changes,
    )


@pytest.fixture(scope="module")
def split():
    dataset = synth_pairs(640, seed=0, **SHAPE)
    yield (
        dataset.model_copy(update={"pairs": dataset.pairs[:512]}),
        dataset.model_copy(update={"pairs": dataset.pairs[512:]}),
    )


@pytest.fixture(scope="module")
def trained(split, logger):
    train_set, _ = split
    yield train(train_set, recipe(), logger)


@pytest.fixture(scope="module")
def global_only(split, logger):
    train_set, _ = split
    yield train(train_set, recipe(use_entity=False, use_relation=False), logger)


def test_fused_retrieval(split, trained, logger):
    _, test_set = split

    report = eval_dataset(test_set, trained, InferenceWeights(), log=logger)

    assert report.i2t[1] >= 0.90
    assert report.t2i[1] >= 0.90


def test_raw_globals_alone_are_weak(split, trained):
    _, test_set = split

    report = eval_dataset(test_set, trained, BASE_ONLY)

    assert report.i2t[1] <= 0.55
    assert report.t2i[1] <= 0.55


def test_fine_channels_are_not_worse_than_global_only(split, trained, global_only):
    _, test_set = split

    full = eval_dataset(test_set, trained, InferenceWeights())
    coarse = eval_dataset(test_set, global_only, InferenceWeights())

    assert coarse.i2t[1] <= full.i2t[1] + 0.02
    assert coarse.t2i[1] <= full.t2i[1] + 0.02


def test_binary_choice(trained, logger):
    items = synth_binary_triples(200, seed=1, **SHAPE)

    assert eval_binary(items, trained, InferenceWeights(), log=logger) >= 0.85
    assert eval_binary(items, trained, BASE_ONLY) <= 0.60
