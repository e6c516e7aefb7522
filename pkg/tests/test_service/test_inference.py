"""
Tests fused scoring, retrieval recall, binary choice, and similarity dumps.
"""

from dataclasses import replace

import numpy as np
import pytest

from finematch.config.settings import RunConfig
from finematch.core.models import (
    Checkpoint,
    ComponentRecord,
    InferenceWeights,
    LossFlags,
)
from finematch.service.inference import (
    RetrievalError,
    SimilarityTables,
    best_ranks,
    dump_similarity,
    eval_binary,
    eval_dataset,
    eval_retrieval,
    fuse,
    recall_at_k,
    report_from_scores,
    score_matrix,
    score_pair,
    score_tables,
    sweep,
)
from finematch.service.synth import synth_binary_triples, synth_pairs


def bypass_checkpoint(dim, n, m, **changes):
    config = RunConfig(
        dim=dim,
        n_entities=n,
        m_relations=m,
        heads=2,
        image_bypass=True,
        text_bypass=True,
        **changes,
    )
    return Checkpoint(config=config, image=None, text=None)


def tables_of(rng, count_images, count_texts):
    shape = (count_images, count_texts)
    return SimilarityTables(
        base=rng.uniform(-1, 1, shape),
        i2t_entity=rng.uniform(-1, 1, shape),
        t2i_entity=rng.uniform(-1, 1, shape[::-1]),
        i2t_relation=rng.uniform(-1, 1, shape),
        t2i_relation=rng.uniform(-1, 1, shape[::-1]),
        i2t_global=rng.uniform(-1, 1, shape),
        t2i_global=rng.uniform(-1, 1, shape[::-1]),
    )


def test_fuse_example():
    ones = np.ones((1, 1))
    tables = SimilarityTables(
        base=np.full((1, 1), 0.5),
        i2t_entity=ones,
        t2i_entity=ones,
        i2t_relation=ones,
        t2i_relation=ones,
        i2t_global=ones,
        t2i_global=ones,
    )

    s_i2t, s_t2i = fuse(tables, InferenceWeights(), LossFlags())

    assert s_i2t[0, 0] == pytest.approx(0.866, abs=1e-12)
    assert s_t2i[0, 0] == pytest.approx(1.49, abs=1e-12)


def test_fuse_zero_weights_gives_base():
    tables = tables_of(np.random.default_rng(0), 3, 4)
    zero = InferenceWeights(alpha1=0.0, alpha2=0.0, beta1=0.0)

    s_i2t, s_t2i = fuse(tables, zero, LossFlags())

    assert np.array_equal(s_i2t, tables.base)
    assert np.array_equal(s_t2i, tables.base.T)


def test_fuse_matches_scalar_oracle():
    tables = tables_of(np.random.default_rng(1), 3, 4)
    weights = InferenceWeights(alpha1=0.4, alpha2=-0.2, beta1=0.7)

    s_i2t, s_t2i = fuse(tables, weights, LossFlags())

    for i in range(3):
        for j in range(4):
            expected_i2t = (
                tables.base[i, j]
                + 0.4 * (tables.i2t_global[i, j] + tables.i2t_entity[i, j] + tables.i2t_relation[i, j])
                - 0.2 * (tables.t2i_entity[j, i] + tables.t2i_relation[j, i])
            )
            expected_t2i = tables.base[i, j] + 0.7 * (
                tables.t2i_global[j, i] + tables.t2i_entity[j, i] + tables.t2i_relation[j, i]
            )
            assert s_i2t[i, j] == pytest.approx(expected_i2t, abs=1e-12)
            assert s_t2i[j, i] == pytest.approx(expected_t2i, abs=1e-12)


def test_fuse_drops_disabled_channels():
    tables = tables_of(np.random.default_rng(2), 2, 2)
    zeroed = replace(tables, i2t_relation=np.zeros((2, 2)), t2i_relation=np.zeros((2, 2)))

    without = fuse(tables, InferenceWeights(), LossFlags(use_relation=False))
    expected = fuse(zeroed, InferenceWeights(), LossFlags())

    assert np.allclose(without[0], expected[0], atol=1e-15)
    assert np.allclose(without[1], expected[1], atol=1e-15)


def test_recall_examples():
    scores = np.zeros((3, 10))
    scores[:, :] = -np.arange(10)
    # Query 0's match is candidate 0 (rank 1), query 1's is 1 (rank 2),
    # query 2's is 4 (rank 5).
    ranks = best_ranks(scores, [[0], [1], [4]])

    assert list(ranks) == [1, 2, 5]
    assert recall_at_k(ranks) == pytest.approx({1: 1 / 3, 5: 1.0, 10: 1.0})
    assert recall_at_k(best_ranks(np.array([[0.3]]), [[0]])) == {1: 1.0, 5: 1.0, 10: 1.0}

    with pytest.raises(RetrievalError):
        recall_at_k([])


def test_ranks_match_sort_oracle():
    rng = np.random.default_rng(3)
    scores = rng.standard_normal((20, 20))
    truth = rng.permutation(20)

    ranks = best_ranks(scores, [[t] for t in truth])

    for query in range(20):
        ordered = sorted(range(20), key=lambda c: (-scores[query, c], c))
        assert ranks[query] == ordered.index(truth[query]) + 1


def test_ties_rank_by_index():
    assert list(best_ranks(np.zeros((2, 3)), [[0], [2]])) == [1, 3]


def test_report_needs_consistent_pairing():
    with pytest.raises(RetrievalError):
        report_from_scores(np.zeros((2, 3)), np.zeros((3, 2)))

    with pytest.raises(RetrievalError):
        report_from_scores(np.zeros((2, 2)), np.zeros((2, 2)), ground_truth=[0, 0])

    report = report_from_scores(
        np.eye(2, 3), np.eye(3)[:, :2], ground_truth=[0, 1, 1], ks=(1,)
    )
    assert report.i2t == {1: 1.0}


def test_score_pair_identical_records():
    dataset = synth_pairs(1, dim=8, n_entities=3, m_relations=2, noise_sigma=0.0, seed=0)
    (image, text), = dataset.pairs

    scored = score_pair(image, text, bypass_checkpoint(8, 3, 2), InferenceWeights())

    assert scored.base_global == pytest.approx(1.0, abs=1e-12)
    assert scored.i2t_entity == pytest.approx(1.0, abs=1e-12)
    assert scored.t2i_relation == pytest.approx(1.0, abs=1e-12)
    assert scored.s_i2t == pytest.approx(1.0 + 0.3 + 0.066, abs=1e-9)
    assert scored.s_t2i == pytest.approx(1.0 + 0.99, abs=1e-9)


def test_score_pair_matches_matrix(small_checkpoint, small_dataset):
    checkpoint = small_checkpoint
    weights = InferenceWeights()

    s_i2t, s_t2i = score_matrix(small_dataset.images, small_dataset.texts, checkpoint, weights)
    scored = score_pair(small_dataset.images[2], small_dataset.texts[5], checkpoint, weights)

    assert scored.s_i2t == s_i2t[2, 5]
    assert scored.s_t2i == s_t2i[5, 2]


def test_score_pair_equals_gallery_scores_exactly(small_checkpoint):
    dataset = synth_pairs(
        40,
        dim=8,
        n_entities=3,
        m_relations=2,
        noise_sigma=0.3,
        seed=11,
        global_noise_sigma=0.5,
    )
    images, texts = dataset.images[:20], dataset.texts
    weights = InferenceWeights()
    flags = LossFlags.from_config(small_checkpoint.config)

    tables = score_tables(images, texts, small_checkpoint)
    s_i2t, s_t2i = fuse(tables, weights, flags)

    for i in range(len(images)):
        for j in (0, 7, 19, 33):
            alone = score_pair(images[i], texts[j], small_checkpoint, weights)

            assert alone.base_global == tables.base[i, j]
            assert alone.i2t_entity == tables.i2t_entity[i, j]
            assert alone.t2i_entity == tables.t2i_entity[j, i]
            assert alone.i2t_relation == tables.i2t_relation[i, j]
            assert alone.t2i_relation == tables.t2i_relation[j, i]
            assert alone.i2t_global == tables.i2t_global[i, j]
            assert alone.s_i2t == s_i2t[i, j]
            assert alone.s_t2i == s_t2i[j, i]


def test_fine_channels_beat_weak_global(logger):
    dataset = synth_pairs(
        32,
        dim=16,
        n_entities=4,
        m_relations=4,
        noise_sigma=0.1,
        seed=0,
        global_noise_sigma=1.0,
    )
    checkpoint = bypass_checkpoint(16, 4, 4)

    fused = eval_dataset(
        dataset, checkpoint, InferenceWeights(alpha1=1.0, alpha2=1.0, beta1=1.0), log=logger
    )
    base = eval_dataset(
        dataset, checkpoint, InferenceWeights(alpha1=0.0, alpha2=0.0, beta1=0.0)
    )

    assert fused.i2t[1] >= 0.9 and fused.t2i[1] >= 0.9
    assert fused.i2t[1] >= base.i2t[1]
    assert fused.t2i[1] >= base.t2i[1]


def test_repeated_images_collapse():
    dataset = synth_pairs(3, dim=8, n_entities=2, m_relations=2, noise_sigma=0.0, seed=1)
    (i0, t0), (i1, t1), (_, t2) = dataset.pairs
    repeated = dataset.model_copy(update={"pairs": [(i0, t0), (i1, t1), (i0, t2)]})

    report = eval_dataset(repeated, bypass_checkpoint(8, 2, 2), InferenceWeights(), ks=(1, 2))

    assert set(report.i2t) == {1, 2}

    with pytest.raises(RetrievalError):
        eval_retrieval([], dataset.texts, bypass_checkpoint(8, 2, 2), InferenceWeights())


def test_binary_accuracy(logger):
    items = synth_binary_triples(3, dim=8, n_entities=3, m_relations=2, noise_sigma=0.0, seed=2)
    checkpoint = bypass_checkpoint(8, 3, 2)

    assert eval_binary(items, checkpoint, InferenceWeights(), log=logger) == 1.0

    last = items[2]
    flipped = items[:2] + [
        last.model_copy(update={"correct": "A" if last.correct == "B" else "B"})
    ]
    assert eval_binary(flipped, checkpoint, InferenceWeights()) == pytest.approx(2 / 3)


def test_binary_tie_is_wrong():
    items = synth_binary_triples(2, dim=8, n_entities=3, m_relations=2, noise_sigma=0.0, seed=3)
    tied = [item.model_copy(update={"caption_b": item.caption_a}) for item in items]

    assert eval_binary(tied, bypass_checkpoint(8, 3, 2), InferenceWeights()) == 0.0

    with pytest.raises(RetrievalError):
        eval_binary([], bypass_checkpoint(8, 3, 2), InferenceWeights())


def record(id, modality, entities):
    entities = np.asarray(entities, dtype=float)
    return ComponentRecord(
        id=id,
        modality=modality,
        global_vector=np.ones(entities.shape[1]),
        entities=entities,
        relations=[],
    )


def test_dump_similarity():
    checkpoint = bypass_checkpoint(4, 2, 1)
    components = [[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 2.0, 0.0]]

    image = record("i", "image", components)
    text = record("t", "text", components)

    same = dump_similarity(image, text, checkpoint)
    assert np.allclose(same, np.eye(2), atol=1e-15)

    orthogonal = dump_similarity(
        record("i", "image", [[1.0, 0.0, 0.0, 0.0]]),
        record("t", "text", [[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 3.0]]),
        checkpoint,
    )
    assert orthogonal.shape == (1, 2)
    assert np.array_equal(orthogonal, np.zeros((1, 2)))

    with pytest.raises(ValueError):
        dump_similarity(image, text, checkpoint, channel="relation")

    with pytest.raises(ValueError):
        dump_similarity(image, text, checkpoint, channel="global")


def test_dump_similarity_matches_pairwise_oracle():
    rng = np.random.default_rng(4)
    checkpoint = bypass_checkpoint(8, 5, 1)
    image = record("i", "image", rng.standard_normal((5, 8)))
    text = record("t", "text", rng.standard_normal((5, 8)))

    matrix = dump_similarity(image, text, checkpoint)

    for a in range(5):
        for b in range(5):
            u = image.entities[a] / np.linalg.norm(image.entities[a])
            v = text.entities[b] / np.linalg.norm(text.entities[b])
            assert matrix[a, b] == pytest.approx(float(u @ v), abs=1e-12)


def test_sweep(logger):
    dataset = synth_pairs(6, dim=8, n_entities=2, m_relations=2, noise_sigma=0.1, seed=4)

    rows = sweep(
        dataset.images,
        dataset.texts,
        bypass_checkpoint(8, 2, 2),
        alpha1=[0.0, 0.1],
        alpha2=[0.0],
        beta1=[0.0, 0.33, 1.0],
        log=logger,
    )

    assert [row[:3] for row in rows] == [
        (a1, 0.0, b1) for a1 in (0.0, 0.1) for b1 in (0.0, 0.33, 1.0)
    ]
    assert all(0.0 <= row[3] <= 1.0 and 0.0 <= row[4] <= 1.0 for row in rows)
