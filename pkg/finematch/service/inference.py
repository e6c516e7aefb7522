"""
Scoring with trained heads: fused image-to-text and text-to-image scores,
retrieval recall, binary caption choice, component similarity dumps, and
weight sweeps.
"""

from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np
from structlog.typing import FilteringBoundLogger

from finematch.core.autodiff import DimensionError
from finematch.core.models import (
    BinaryItem,
    Checkpoint,
    ComponentRecord,
    InferenceWeights,
    LossFlags,
    PairedDataset,
    RetrievalReport,
    ScoredPair,
)

from .encoder import SlotLayout, TokenSequence, encode
from .ingest import assemble_records
from .matching import fgm_tables, pairwise_dots

DEFAULT_KS = (1, 5, 10)

# Rows per block when encoding, and (images, texts) per block when building
# similarity tables. Block sizes only change memory use.
ENCODE_BLOCK = 256
TABLE_BLOCK = (16, 64)


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True)
class EncodedRecords:
    """
    Records of one modality after their head, with their L2-normalised raw
    global vectors.
    """

    ids: list[str]
    raw_globals: np.ndarray
    encoded: TokenSequence

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, indices: Sequence[int]) -> "EncodedRecords":
        indices = np.asarray(indices, dtype=int)
        return EncodedRecords(
            ids=[self.ids[i] for i in indices],
            raw_globals=self.raw_globals[indices],
            encoded=TokenSequence(
                tokens=self.encoded.tokens[indices], mask=self.encoded.mask[indices]
            ),
        )


@dataclass(frozen=True)
class SimilarityTables:
    """
    Raw-global base scores (images, texts) and the six fine and coarse
    similarities after encoding. I2T tables are (images, texts); T2I tables
    are (texts, images).
    """

    base: np.ndarray
    i2t_entity: np.ndarray
    t2i_entity: np.ndarray
    i2t_relation: np.ndarray
    t2i_relation: np.ndarray
    i2t_global: np.ndarray
    t2i_global: np.ndarray


def _layout(checkpoint: Checkpoint) -> SlotLayout:
    return SlotLayout(checkpoint.config.n_entities, checkpoint.config.m_relations)


def _visibility(checkpoint: Checkpoint) -> np.ndarray | None:
    config = checkpoint.config

    if not config.isolate_disabled:
        return None

    return _layout(checkpoint).channel_visibility(
        config.use_global, config.use_entity, config.use_relation
    )


def encode_records(
    records: Sequence[ComponentRecord], checkpoint: Checkpoint
) -> EncodedRecords:
    """
    Run records of a single modality through the matching head of
    `checkpoint`.

    Raises
    ------
    DimensionError
        If a record does not fit the checkpoint's D, N or M.
    """
    if not records:
        raise RetrievalError("No records to encode")

    modalities = {r.modality for r in records}
    if len(modalities) != 1:
        raise ValueError(f"Records mix modalities {sorted(modalities)}")

    config = checkpoint.config
    params = checkpoint.image if modalities == {"image"} else checkpoint.text
    dim = config.dim if config.dim is not None else records[0].dim

    sequences = assemble_records(records, config.n_entities, config.m_relations, dim)
    visible = _visibility(checkpoint)

    blocks = []
    for start in range(0, len(records), ENCODE_BLOCK):
        block = TokenSequence(
            tokens=sequences.tokens[start : start + ENCODE_BLOCK],
            mask=sequences.mask[start : start + ENCODE_BLOCK],
        )
        blocks.append(
            encode(
                params,
                block,
                positional=config.positional_encoding,
                eps=config.layer_norm_eps,
                visible=visible,
            ).tokens
        )

    raw = np.stack([r.global_vector for r in records])
    norms = np.linalg.norm(raw, axis=1, keepdims=True)

    if np.any(norms == 0.0):
        raise DimensionError("A record has a zero global vector")

    return EncodedRecords(
        ids=[r.id for r in records],
        raw_globals=raw / norms,
        encoded=TokenSequence(tokens=np.concatenate(blocks), mask=sequences.mask),
    )


def similarity_tables(
    images: EncodedRecords, texts: EncodedRecords, layout: SlotLayout
) -> SimilarityTables:
    """
    Every table entry depends only on its own image and text, bit for bit, so
    scoring a pair alone gives exactly the score it gets inside a gallery.
    """
    if images.raw_globals.shape[1] != texts.raw_globals.shape[1]:
        raise DimensionError(
            f"Image width {images.raw_globals.shape[1]} differs from text width "
            f"{texts.raw_globals.shape[1]}"
        )

    count_images, count_texts = len(images), len(texts)
    names = ("entity", "relation")
    base = np.zeros((count_images, count_texts))
    coarse = np.zeros((count_images, count_texts))
    i2t = {name: np.zeros((count_images, count_texts)) for name in names}
    t2i = {name: np.zeros((count_texts, count_images)) for name in names}
    slots = {"entity": layout.entities, "relation": layout.relations}

    image_step, text_step = TABLE_BLOCK

    for i0 in range(0, count_images, image_step):
        rows = slice(i0, i0 + image_step)
        image_tokens = images.encoded.tokens[rows]
        image_mask = images.encoded.mask[rows]

        for t0 in range(0, count_texts, text_step):
            columns = slice(t0, t0 + text_step)
            text_tokens = texts.encoded.tokens[columns]
            text_mask = texts.encoded.mask[columns]

            base[rows, columns] = pairwise_dots(
                images.raw_globals[rows], texts.raw_globals[columns]
            )
            coarse[rows, columns] = pairwise_dots(image_tokens[:, 0], text_tokens[:, 0])

            for name in names:
                i2t[name][rows, columns], t2i[name][columns, rows] = fgm_tables(
                    image_tokens[:, slots[name]],
                    image_mask[:, slots[name]],
                    text_tokens[:, slots[name]],
                    text_mask[:, slots[name]],
                )

    return SimilarityTables(
        base=base,
        i2t_entity=i2t["entity"],
        t2i_entity=t2i["entity"],
        i2t_relation=i2t["relation"],
        t2i_relation=t2i["relation"],
        i2t_global=coarse,
        t2i_global=np.ascontiguousarray(coarse.T),
    )


def fuse(
    tables: SimilarityTables, weights: InferenceWeights, flags: LossFlags
) -> tuple[np.ndarray, np.ndarray]:
    """
    Final scores (images, texts) for I2T and (texts, images) for T2I:

        s_i2t = base + alpha1 (G + E + R)_i2t + alpha2 (E + R)_t2i
        s_t2i = base + beta1 (G + E + R)_t2i

    Terms of channels disabled in `flags` are left out.
    """
    own_i2t = np.zeros_like(tables.base)
    cross_t2i = np.zeros_like(tables.base)
    own_t2i = np.zeros_like(tables.base.T)

    if flags.use_global:
        own_i2t = own_i2t + tables.i2t_global
        own_t2i = own_t2i + tables.t2i_global
    if flags.use_entity:
        own_i2t = own_i2t + tables.i2t_entity
        cross_t2i = cross_t2i + tables.t2i_entity.T
        own_t2i = own_t2i + tables.t2i_entity
    if flags.use_relation:
        own_i2t = own_i2t + tables.i2t_relation
        cross_t2i = cross_t2i + tables.t2i_relation.T
        own_t2i = own_t2i + tables.t2i_relation

    s_i2t = tables.base + weights.alpha1 * own_i2t + weights.alpha2 * cross_t2i
    s_t2i = tables.base.T + weights.beta1 * own_t2i

    return s_i2t, s_t2i


def score_tables(
    images: Sequence[ComponentRecord],
    texts: Sequence[ComponentRecord],
    checkpoint: Checkpoint,
) -> SimilarityTables:
    return similarity_tables(
        encode_records(images, checkpoint),
        encode_records(texts, checkpoint),
        _layout(checkpoint),
    )


def score_matrix(
    images: Sequence[ComponentRecord],
    texts: Sequence[ComponentRecord],
    checkpoint: Checkpoint,
    weights: InferenceWeights,
) -> tuple[np.ndarray, np.ndarray]:
    return fuse(
        score_tables(images, texts, checkpoint),
        weights,
        LossFlags.from_config(checkpoint.config),
    )


def scored_pair(
    tables: SimilarityTables,
    i: int,
    j: int,
    weights: InferenceWeights,
    flags: LossFlags,
) -> ScoredPair:
    s_i2t, s_t2i = fuse(tables, weights, flags)

    return ScoredPair(
        base_global=float(tables.base[i, j]),
        i2t_entity=float(tables.i2t_entity[i, j]),
        t2i_entity=float(tables.t2i_entity[j, i]),
        i2t_relation=float(tables.i2t_relation[i, j]),
        t2i_relation=float(tables.t2i_relation[j, i]),
        i2t_global=float(tables.i2t_global[i, j]),
        t2i_global=float(tables.t2i_global[j, i]),
        s_i2t=float(s_i2t[i, j]),
        s_t2i=float(s_t2i[j, i]),
    )


def score_pair(
    record_img: ComponentRecord,
    record_txt: ComponentRecord,
    checkpoint: Checkpoint,
    weights: InferenceWeights,
) -> ScoredPair:
    """
    Base, fine, and fused scores of one image and one text.
    """
    if record_img.dim != record_txt.dim:
        raise DimensionError(
            f"Image {record_img.id} has dim {record_img.dim}, text "
            f"{record_txt.id} has {record_txt.dim}"
        )

    tables = score_tables([record_img], [record_txt], checkpoint)
    return scored_pair(tables, 0, 0, weights, LossFlags.from_config(checkpoint.config))


def best_ranks(scores: np.ndarray, relevant: Sequence[Sequence[int]]) -> np.ndarray:
    """
    1-based rank of the best-placed relevant candidate for every query row.
    Equal scores are ordered by candidate index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ranks = np.empty(len(scores), dtype=int)

    for query, row in enumerate(scores):
        order = np.argsort(-row, kind="stable")
        position = np.empty_like(order)
        position[order] = np.arange(len(order))
        ranks[query] = int(position[list(relevant[query])].min()) + 1

    return ranks


def recall_at_k(ranks: Sequence[int], ks: Iterable[int] = DEFAULT_KS) -> dict[int, float]:
    ranks = np.asarray(ranks)

    if len(ranks) == 0:
        raise RetrievalError("No queries")

    return {int(k): float(np.mean(ranks <= k)) for k in ks}


def _relevance(
    count_images: int, count_texts: int, ground_truth: Sequence[int] | None
) -> tuple[list[list[int]], list[list[int]]]:
    """
    Relevant texts per image and relevant images per text. `ground_truth[t]`
    is the image index of text t; index alignment when absent.
    """
    if ground_truth is None:
        if count_images != count_texts:
            raise RetrievalError(
                f"{count_images} images and {count_texts} texts need a pairing"
            )
        ground_truth = range(count_texts)

    if len(ground_truth) != count_texts:
        raise RetrievalError("Pairing must name one image per text")

    texts_of: list[list[int]] = [[] for _ in range(count_images)]

    for text, image in enumerate(ground_truth):
        if not 0 <= image < count_images:
            raise RetrievalError(f"Text {text} is paired with unknown image {image}")
        texts_of[image].append(text)

    if any(not texts for texts in texts_of):
        raise RetrievalError("Every image needs at least one paired text")

    return texts_of, [[image] for image in ground_truth]


def report_from_scores(
    s_i2t: np.ndarray,
    s_t2i: np.ndarray,
    ground_truth: Sequence[int] | None = None,
    ks: Iterable[int] = DEFAULT_KS,
) -> RetrievalReport:
    count_images, count_texts = s_i2t.shape
    ks = tuple(ks)

    if count_images == 0 or count_texts == 0:
        raise RetrievalError("Empty gallery")

    texts_of, images_of = _relevance(count_images, count_texts, ground_truth)

    return RetrievalReport(
        i2t=recall_at_k(best_ranks(s_i2t, texts_of), ks),
        t2i=recall_at_k(best_ranks(s_t2i, images_of), ks),
    )


def eval_retrieval(
    images: Sequence[ComponentRecord],
    texts: Sequence[ComponentRecord],
    checkpoint: Checkpoint,
    weights: InferenceWeights,
    ks: Iterable[int] = DEFAULT_KS,
    ground_truth: Sequence[int] | None = None,
    log: FilteringBoundLogger | None = None,
) -> RetrievalReport:
    """
    Recall@K in both directions.

    Parameters
    ----------
    images, texts
        Galleries. Every image must have at least one text.
    checkpoint
        Trained heads.
    weights
        Fusion weights.
    ks
        Cut-offs.
    ground_truth
        Image index for every text; index-aligned galleries when omitted.

    Raises
    ------
    RetrievalError
        On an empty gallery or an inconsistent pairing.
    """
    if not images or not texts:
        raise RetrievalError("Empty gallery")

    s_i2t, s_t2i = score_matrix(images, texts, checkpoint, weights)
    report = report_from_scores(s_i2t, s_t2i, ground_truth, ks)

    if log is not None:
        log.bind(
            images=len(images),
            texts=len(texts),
            i2t=report.i2t,
            t2i=report.t2i,
        ).info("eval.retrieval_complete")

    return report


def eval_dataset(
    dataset: PairedDataset,
    checkpoint: Checkpoint,
    weights: InferenceWeights,
    ks: Iterable[int] = DEFAULT_KS,
    log: FilteringBoundLogger | None = None,
) -> RetrievalReport:
    """
    Retrieval over a paired dataset, with repeated images collapsed so that
    all of an image's captions count as its matches.
    """
    images, owner = dataset.unique_images()
    return eval_retrieval(
        images, dataset.texts, checkpoint, weights, ks, ground_truth=owner, log=log
    )


def eval_binary(
    items: Sequence[BinaryItem],
    checkpoint: Checkpoint,
    weights: InferenceWeights,
    log: FilteringBoundLogger | None = None,
) -> float:
    """
    Fraction of items whose correct caption has the strictly higher I2T
    score. Ties count as wrong.
    """
    if not items:
        raise RetrievalError("No binary items")

    flags = LossFlags.from_config(checkpoint.config)
    layout = _layout(checkpoint)

    images = encode_records([item.image for item in items], checkpoint)
    captions = encode_records(
        [c for item in items for c in (item.caption_a, item.caption_b)], checkpoint
    )

    correct = 0

    for index, item in enumerate(items):
        tables = similarity_tables(
            images.take([index]), captions.take([2 * index, 2 * index + 1]), layout
        )
        s_i2t, _ = fuse(tables, weights, flags)
        score_a, score_b = s_i2t[0]

        if item.correct == "A":
            correct += int(score_a > score_b)
        else:
            correct += int(score_b > score_a)

    accuracy = correct / len(items)

    if log is not None:
        log.bind(items=len(items), accuracy=accuracy).info("eval.binary_complete")

    return accuracy


def dump_similarity(
    record_img: ComponentRecord,
    record_txt: ComponentRecord,
    checkpoint: Checkpoint,
    channel: str = "entity",
) -> np.ndarray:
    """
    Cosine similarity of every real image component (rows) with every real
    text component (columns) of one channel, after encoding.
    """
    layout = _layout(checkpoint)
    slots = {"entity": layout.entities, "relation": layout.relations}

    if channel not in slots:
        raise ValueError(f"Unknown channel {channel!r}; use 'entity' or 'relation'")

    encoded = []
    for record in (record_img, record_txt):
        sequence = encode_records([record], checkpoint).encoded
        tokens = sequence.tokens[0, slots[channel]]
        encoded.append(tokens[sequence.mask[0, slots[channel]]])

    image_components, text_components = encoded

    if len(image_components) == 0 or len(text_components) == 0:
        raise ValueError(f"Both records need at least one real {channel} component")

    return image_components @ text_components.T


def sweep(
    images: Sequence[ComponentRecord],
    texts: Sequence[ComponentRecord],
    checkpoint: Checkpoint,
    alpha1: Iterable[float],
    alpha2: Iterable[float],
    beta1: Iterable[float],
    ground_truth: Sequence[int] | None = None,
    log: FilteringBoundLogger | None = None,
) -> list[tuple[float, float, float, float, float]]:
    """
    R@1 in both directions for every point of the (alpha1, alpha2, beta1)
    grid. Encodings and similarity tables are computed once.
    """
    tables = score_tables(images, texts, checkpoint)
    flags = LossFlags.from_config(checkpoint.config)
    rows = []

    alpha1, alpha2, beta1 = list(alpha1), list(alpha2), list(beta1)

    for a1 in alpha1:
        for a2 in alpha2:
            for b1 in beta1:
                s_i2t, s_t2i = fuse(
                    tables, InferenceWeights(alpha1=a1, alpha2=a2, beta1=b1), flags
                )
                report = report_from_scores(s_i2t, s_t2i, ground_truth, ks=(1,))
                rows.append((a1, a2, b1, report.i2t[1], report.t2i[1]))

    if log is not None:
        best = max(rows, key=lambda row: row[3] + row[4])
        log.bind(points=len(rows), best=best).info("eval.sweep_complete")

    return rows
