"""
Tests reading and writing record, pair, and triple files.
"""

import json

import numpy as np
import pytest

from finematch.core.components import DetectionBox
from finematch.core.models import ComponentRecord, PairedDataset
from finematch.service.synth import synth_binary_triples
from finematch.storage.records import (
    PAIRS_FILENAME,
    RECORDS_FILENAME,
    RecordFormatError,
    encode_vector,
    read_record,
    read_record_file,
    read_records,
    read_triples,
    write_binary,
    write_record_file,
    write_records,
)


def test_round_trip_is_exact(tmp_path, small_dataset, logger):
    write_records(small_dataset, tmp_path)

    loaded = read_records(tmp_path, log=logger)

    assert (loaded.dim, loaded.n_entities, loaded.m_relations) == (8, 3, 2)
    assert len(loaded) == len(small_dataset)
    for (a_img, a_txt), (b_img, b_txt) in zip(small_dataset.pairs, loaded.pairs):
        for a, b in ((a_img, b_img), (a_txt, b_txt)):
            assert a.id == b.id and a.modality == b.modality
            assert np.array_equal(a.global_vector, b.global_vector)
            assert np.array_equal(a.entities, b.entities)
            assert np.array_equal(a.relations, b.relations)


def test_small_pair_with_boxes(tmp_path):
    boxes = [
        DetectionBox(x1=0, y1=0, x2=1, y2=2, confidence=0.5, label="dog"),
        DetectionBox(x1=1, y1=1, x2=3, y2=3, confidence=0.25),
    ]
    image = ComponentRecord(
        id="i",
        modality="image",
        global_vector=[1.0, 0.5, -0.25, 2.0],
        entities=[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]],
        relations=[[0.5, 0.5, 0.5, 0.5]],
        boxes=boxes,
    )
    text = ComponentRecord(
        id="t", modality="text", global_vector=[0.0, 0.0, 1.0, 0.0], entities=[], relations=[]
    )
    dataset = PairedDataset(pairs=[(image, text)], dim=4, n_entities=2, m_relations=2)

    write_records(dataset, tmp_path)
    (loaded_image, loaded_text), = read_records(tmp_path).pairs

    assert np.array_equal(loaded_image.global_vector, image.global_vector)
    assert loaded_image.boxes == boxes
    assert loaded_text.entities.shape == (0, 4)
    assert loaded_text.relations.shape == (0, 4)


def test_empty_dataset(tmp_path):
    write_records(PairedDataset(pairs=[], dim=4, n_entities=2, m_relations=2), tmp_path)

    loaded = read_records(tmp_path)

    assert len(loaded) == 0 and loaded.dim == 4


def _write_lines(path, header, *records):
    lines = [json.dumps(header)] + [json.dumps(r) for r in records]
    path.write_text("\n".join(lines) + "\n")


HEADER = {"dim": 2, "n_entities": 1, "m_relations": 1, "version": 1}


def test_rejects_too_many_entities(tmp_path):
    vector = encode_vector(np.ones(2))
    _write_lines(
        tmp_path / RECORDS_FILENAME,
        HEADER,
        {"id": "a", "modality": "image", "global": vector, "entities": [vector, vector]},
    )

    with pytest.raises(RecordFormatError):
        read_record_file(tmp_path / RECORDS_FILENAME)


def test_rejects_wrong_dimension(tmp_path):
    _write_lines(
        tmp_path / RECORDS_FILENAME,
        HEADER,
        {"id": "a", "modality": "text", "global": encode_vector(np.ones(3))},
    )

    with pytest.raises(RecordFormatError):
        read_record_file(tmp_path / RECORDS_FILENAME)


def test_rejects_unknown_modality(tmp_path):
    _write_lines(
        tmp_path / RECORDS_FILENAME,
        HEADER,
        {"id": "a", "modality": "audio", "global": encode_vector(np.ones(2))},
    )

    with pytest.raises(RecordFormatError):
        read_record_file(tmp_path / RECORDS_FILENAME)


def test_rejects_bad_header_and_duplicates(tmp_path):
    path = tmp_path / RECORDS_FILENAME

    _write_lines(path, {**HEADER, "version": 7})
    with pytest.raises(RecordFormatError):
        read_record_file(path)

    path.write_text("")
    with pytest.raises(RecordFormatError):
        read_record_file(path)

    line = {"id": "a", "modality": "text", "global": encode_vector(np.ones(2))}
    _write_lines(path, HEADER, line, line)
    with pytest.raises(RecordFormatError):
        read_record_file(path)


def test_pairs_must_reference_records(tmp_path, small_dataset):
    write_records(small_dataset, tmp_path)
    (tmp_path / PAIRS_FILENAME).write_text(
        json.dumps({"image_id": "img-000000", "text_id": "missing"}) + "\n"
    )

    with pytest.raises(RecordFormatError):
        read_records(tmp_path)

    (tmp_path / PAIRS_FILENAME).write_text(
        json.dumps({"image_id": "txt-000000", "text_id": "img-000000"}) + "\n"
    )

    with pytest.raises(RecordFormatError):
        read_records(tmp_path)


def test_missing_files(tmp_path, small_dataset):
    with pytest.raises(FileNotFoundError):
        read_records(tmp_path)

    write_records(small_dataset, tmp_path)
    (tmp_path / PAIRS_FILENAME).unlink()

    with pytest.raises(FileNotFoundError):
        read_records(tmp_path)


def test_write_rejects_dimension_mismatch(tmp_path, small_dataset):
    with pytest.raises(RecordFormatError):
        write_record_file(
            small_dataset.images, tmp_path / "r.jsonl", dim=4, n_entities=3, m_relations=2
        )


def test_binary_round_trip(tmp_path):
    items = synth_binary_triples(4, dim=8, n_entities=2, m_relations=1, noise_sigma=0.1, seed=0)

    write_binary(items, tmp_path, dim=8, n_entities=2, m_relations=1)
    loaded = read_triples(tmp_path)

    assert [item.correct for item in loaded] == ["A", "B", "A", "B"]
    for original, item in zip(items, loaded):
        assert item.image.id == original.image.id
        assert np.array_equal(item.caption_a.entities, original.caption_a.entities)
        assert np.array_equal(item.caption_b.global_vector, original.caption_b.global_vector)


def test_read_record(tmp_path, small_dataset):
    write_records(small_dataset, tmp_path)

    text = read_record(tmp_path, "txt-000002", "text")

    assert np.array_equal(text.global_vector, small_dataset.texts[2].global_vector)

    with pytest.raises(RecordFormatError):
        read_record(tmp_path, "txt-000002", "image")

    with pytest.raises(RecordFormatError):
        read_record(tmp_path, "nope", "text")


def test_shared_record_is_written_once(tmp_path, small_dataset):
    image, text = small_dataset.pairs[0]
    other_text = small_dataset.texts[1]
    dataset = PairedDataset(
        pairs=[(image, text), (image, other_text)], dim=8, n_entities=3, m_relations=2
    )

    write_records(dataset, tmp_path)
    _, records = read_record_file(tmp_path / RECORDS_FILENAME)
    loaded = read_records(tmp_path)

    assert list(records) == [image.id, text.id, other_text.id]
    assert [pair[0].id for pair in loaded.pairs] == [image.id, image.id]


def test_conflicting_records_under_one_id_are_rejected(tmp_path, small_dataset):
    image, text = small_dataset.pairs[0]
    impostor = ComponentRecord(
        id=text.id,
        modality="text",
        global_vector=small_dataset.texts[1].global_vector,
        entities=text.entities,
        relations=text.relations,
    )
    dataset = PairedDataset(
        pairs=[(image, text), (small_dataset.images[1], impostor)],
        dim=8,
        n_entities=3,
        m_relations=2,
    )

    with pytest.raises(RecordFormatError, match="two different records"):
        write_records(dataset, tmp_path)

    assert not (tmp_path / RECORDS_FILENAME).exists()


def test_binary_reused_caption_round_trips(tmp_path):
    first, second = synth_binary_triples(
        2, dim=8, n_entities=2, m_relations=1, noise_sigma=0.1, seed=1
    )
    items = [first, second.model_copy(update={"caption_b": first.caption_a})]

    write_binary(items, tmp_path, dim=8, n_entities=2, m_relations=1)
    _, records = read_record_file(tmp_path / RECORDS_FILENAME)
    loaded = read_triples(tmp_path)

    assert len(records) == 5
    assert loaded[1].caption_b.id == first.caption_a.id
    assert np.array_equal(loaded[1].caption_b.entities, first.caption_a.entities)
