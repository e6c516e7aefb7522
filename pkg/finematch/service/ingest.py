"""
Turning records into model inputs: fitting over-full records to the slot
counts, assembling whole datasets into token arrays, and batching.
"""

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from finematch.core.components import fit_to_count
from finematch.core.models import ComponentRecord, PairedDataset
from finematch.core.random import Stream, generator

from .encoder import TokenSequence, assemble_sequence, stack_sequences


class BatchingError(ValueError):
    pass


@dataclass(frozen=True)
class PairedSequences:
    """
    Assembled token arrays for every pair of a dataset, index-aligned.
    """

    images: TokenSequence
    texts: TokenSequence

    def __len__(self) -> int:
        return self.images.tokens.shape[0]

    def take(self, indices: np.ndarray) -> "PairedSequences":
        return PairedSequences(
            images=TokenSequence(
                tokens=self.images.tokens[indices], mask=self.images.mask[indices]
            ),
            texts=TokenSequence(
                tokens=self.texts.tokens[indices], mask=self.texts.mask[indices]
            ),
        )


def fit_record(
    record: ComponentRecord,
    n_entities: int,
    m_relations: int,
    entity_scores: Sequence[float] | None = None,
    relation_scores: Sequence[float] | None = None,
) -> ComponentRecord:
    """
    Truncate a record to at most `n_entities` entities and `m_relations`
    relations.

    Image entities are ranked by `entity_scores`, falling back to the detector
    confidences of the record's boxes when there is one box per entity; the
    surviving boxes follow their entities. Text components (and image
    components without scores) keep their first occurrences.
    """
    boxes = record.boxes

    if (
        entity_scores is None
        and record.modality == "image"
        and boxes is not None
        and len(boxes) == len(record.entities)
    ):
        entity_scores = [b.confidence for b in boxes]

    dim = record.dim
    entities = fit_to_count(record.entities, n_entities, ranking=entity_scores, dim=dim)
    relations = fit_to_count(
        record.relations, m_relations, ranking=relation_scores, dim=dim
    )

    if boxes is not None and len(boxes) == len(record.entities):
        boxes = [boxes[i] for i in entities.kept]

    return ComponentRecord(
        id=record.id,
        modality=record.modality,
        global_vector=record.global_vector,
        entities=entities.items[: entities.count],
        relations=relations.items[: relations.count],
        boxes=boxes,
    )


def assemble_records(
    records: Sequence[ComponentRecord], n_entities: int, m_relations: int, dim: int
) -> TokenSequence:
    return stack_sequences(
        [assemble_sequence(r, n_entities, m_relations, dim) for r in records]
    )


def assemble_pairs(dataset: PairedDataset) -> PairedSequences:
    if len(dataset) == 0:
        raise BatchingError("Cannot assemble an empty dataset")

    shape = (dataset.n_entities, dataset.m_relations, dataset.dim)

    return PairedSequences(
        images=assemble_records(dataset.images, *shape),
        texts=assemble_records(dataset.texts, *shape),
    )


def make_batches(
    dataset: PairedDataset | int,
    batch_size: int,
    seed: int,
    shuffle: bool,
    training: bool = True,
    epoch: int = 0,
) -> list[np.ndarray]:
    """
    Partition pair indices into batches of `batch_size`; the final short
    batch is kept. The order depends only on (`seed`, `epoch`) when
    shuffling, and is dataset order otherwise.

    Raises
    ------
    BatchingError
        If `batch_size < 2` in training mode (contrastive training needs
        in-batch negatives), or `batch_size < 1`.
    """
    if batch_size < 1 or (training and batch_size < 2):
        raise BatchingError(
            f"batch_size={batch_size} is too small "
            f"({'training needs at least 2' if training else 'must be positive'})"
        )

    count = dataset if isinstance(dataset, int) else len(dataset)
    order = np.arange(count)

    if shuffle:
        order = generator(seed, Stream.BATCHING, epoch).permutation(count)

    return [order[start : start + batch_size] for start in range(0, count, batch_size)]
