"""
Fine-grained matching and the entity, relation, and global similarities
between encoded images and texts.
"""

from dataclasses import dataclass, fields

import numpy as np

from finematch.core.autodiff import (
    DimensionError,
    Tensor,
    constant,
    index,
    masked_max,
    masked_mean,
    matmul,
    reshape,
    transpose,
)

from .encoder import SlotLayout, TokenSequence


@dataclass(frozen=True)
class ComponentSet:
    """
    C component vectors (C, D) and their mask; unmasked rows are unit length.
    """

    vectors: np.ndarray
    mask: np.ndarray

    @classmethod
    def of(cls, vectors, mask=None) -> "ComponentSet":
        vectors = np.asarray(vectors, dtype=np.float64)

        if vectors.ndim != 2:
            raise DimensionError(f"Expected (C, D) vectors, got {vectors.shape}")

        if mask is None:
            mask = np.ones(len(vectors), dtype=bool)

        return cls(vectors=vectors, mask=np.asarray(mask, dtype=bool))

    @property
    def real(self) -> np.ndarray:
        return self.vectors[self.mask]


@dataclass(frozen=True)
class PairSimilarities:
    i2t_entity: float
    t2i_entity: float
    i2t_relation: float
    t2i_relation: float
    i2t_global: float
    t2i_global: float


@dataclass(frozen=True)
class SimilarityBundle:
    """
    The six similarity matrices. Rows index the side named first: I2T
    matrices are (images, texts), T2I matrices are (texts, images).
    """

    i2t_entity: Tensor
    t2i_entity: Tensor
    i2t_relation: Tensor
    t2i_relation: Tensor
    i2t_global: Tensor
    t2i_global: Tensor

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name).data for f in fields(self)}

    def at(self, i: int, j: int) -> PairSimilarities:
        """
        Similarities of image i and text j.
        """
        return PairSimilarities(
            i2t_entity=float(self.i2t_entity.data[i, j]),
            t2i_entity=float(self.t2i_entity.data[j, i]),
            i2t_relation=float(self.i2t_relation.data[i, j]),
            t2i_relation=float(self.t2i_relation.data[j, i]),
            i2t_global=float(self.i2t_global.data[i, j]),
            t2i_global=float(self.t2i_global.data[j, i]),
        )


def pairwise_dots(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """
    Dot product of every row of `query` (..., Q, D) with every row of
    `gallery` (..., G, D), giving (..., Q, G). Each entry is reduced on its own
    contiguous row of products, so its bits do not depend on Q, G or the
    leading shape.
    """
    return np.multiply(query[..., :, None, :], gallery[..., None, :, :]).sum(axis=-1)


def fgm_matrix(
    similarities: np.ndarray,
    query_mask: np.ndarray | None = None,
    gallery_mask: np.ndarray | None = None,
) -> float:
    """
    FGM from a precomputed (query, gallery) similarity matrix: the mean over
    real query rows of the max over real gallery columns. Zero when either
    side is empty.
    """
    similarities = np.asarray(similarities, dtype=np.float64)

    if query_mask is not None:
        similarities = similarities[np.asarray(query_mask, dtype=bool)]
    if gallery_mask is not None:
        similarities = similarities[:, np.asarray(gallery_mask, dtype=bool)]

    if similarities.shape[0] == 0 or similarities.shape[1] == 0:
        return 0.0

    return float(similarities.max(axis=1).mean())


def fgm(query: ComponentSet, gallery: ComponentSet) -> float:
    """
    Fine-grained matching of `query` against `gallery`. Asymmetric.
    """
    real_query = query.real
    real_gallery = gallery.real

    if len(real_query) == 0 or len(real_gallery) == 0:
        return 0.0

    if real_query.shape[1] != real_gallery.shape[1]:
        raise DimensionError(
            f"Component widths differ: {real_query.shape[1]} vs {real_gallery.shape[1]}"
        )

    return fgm_matrix(pairwise_dots(real_query, real_gallery))


def _components(seq: TokenSequence, slots: slice) -> ComponentSet:
    return ComponentSet(vectors=seq.tokens[slots], mask=seq.mask[slots])


def pair_similarities(
    z_img: TokenSequence, z_txt: TokenSequence, layout: SlotLayout
) -> PairSimilarities:
    """
    The six similarities of one encoded image (L, D) and one encoded text
    (L, D).
    """
    if z_img.tokens.shape != z_txt.tokens.shape or z_img.length != layout.length:
        raise DimensionError(
            f"Sequences {z_img.tokens.shape} and {z_txt.tokens.shape} do not match "
            f"the slot layout of length {layout.length}"
        )

    image_entities = _components(z_img, layout.entities)
    text_entities = _components(z_txt, layout.entities)
    image_relations = _components(z_img, layout.relations)
    text_relations = _components(z_txt, layout.relations)
    coarse = float(z_img.tokens[0] @ z_txt.tokens[0])

    return PairSimilarities(
        i2t_entity=fgm(image_entities, text_entities),
        t2i_entity=fgm(text_entities, image_entities),
        i2t_relation=fgm(image_relations, text_relations),
        t2i_relation=fgm(text_relations, image_relations),
        i2t_global=coarse,
        t2i_global=coarse,
    )


def _fine_matrix(
    query: Tensor, query_mask: np.ndarray, gallery: Tensor, gallery_mask: np.ndarray
) -> Tensor:
    """
    FGM of every query item against every gallery item: (Q, C, D) x (G, C', D)
    -> (Q, G).
    """
    items, slots, dim = query.shape
    candidates, gallery_slots, _ = gallery.shape

    if slots == 0 or gallery_slots == 0:
        return constant(np.zeros((items, candidates)))

    flat_query = reshape(query, (items * slots, dim))
    flat_gallery = reshape(gallery, (candidates * gallery_slots, dim))
    pairwise = matmul(flat_query, transpose(flat_gallery, (1, 0)))
    pairwise = transpose(
        reshape(pairwise, (items, slots, candidates, gallery_slots)), (0, 2, 1, 3)
    )

    best = masked_max(pairwise, gallery_mask[None, :, None, :])
    return masked_mean(best, query_mask[:, None, :])


def similarity_tensors(
    z_img: Tensor,
    img_mask: np.ndarray,
    z_txt: Tensor,
    txt_mask: np.ndarray,
    layout: SlotLayout,
) -> SimilarityBundle:
    """
    Tape-level similarity matrices between I encoded images and T encoded
    texts (the two counts may differ).
    """
    if z_img.shape[1:] != z_txt.shape[1:] or z_img.shape[1] != layout.length:
        raise DimensionError(
            f"Encoded shapes {z_img.shape} and {z_txt.shape} do not match the "
            f"slot layout of length {layout.length}"
        )

    everything = slice(None)

    def take(z: Tensor, slots: slice) -> Tensor:
        return index(z, (everything, slots, everything))

    image_entities = take(z_img, layout.entities)
    text_entities = take(z_txt, layout.entities)
    image_relations = take(z_img, layout.relations)
    text_relations = take(z_txt, layout.relations)

    image_entity_mask = img_mask[:, layout.entities]
    text_entity_mask = txt_mask[:, layout.entities]
    image_relation_mask = img_mask[:, layout.relations]
    text_relation_mask = txt_mask[:, layout.relations]

    coarse = matmul(
        index(z_img, (everything, 0, everything)),
        transpose(index(z_txt, (everything, 0, everything)), (1, 0)),
    )

    return SimilarityBundle(
        i2t_entity=_fine_matrix(
            image_entities, image_entity_mask, text_entities, text_entity_mask
        ),
        t2i_entity=_fine_matrix(
            text_entities, text_entity_mask, image_entities, image_entity_mask
        ),
        i2t_relation=_fine_matrix(
            image_relations, image_relation_mask, text_relations, text_relation_mask
        ),
        t2i_relation=_fine_matrix(
            text_relations, text_relation_mask, image_relations, image_relation_mask
        ),
        i2t_global=coarse,
        t2i_global=transpose(coarse, (1, 0)),
    )


def batch_similarities(
    batch_img: TokenSequence, batch_txt: TokenSequence, layout: SlotLayout
) -> SimilarityBundle:
    """
    In-batch similarity matrices between B encoded images and B encoded texts;
    entry [i][j] equals `pair_similarities` of image i and text j.
    """
    if batch_img.tokens.shape[0] != batch_txt.tokens.shape[0]:
        raise DimensionError(
            f"Batch sizes differ: {batch_img.tokens.shape[0]} images vs "
            f"{batch_txt.tokens.shape[0]} texts"
        )

    return similarity_tensors(
        constant(batch_img.tokens),
        batch_img.mask,
        constant(batch_txt.tokens),
        batch_txt.mask,
        layout,
    )


def fgm_tables(
    images: np.ndarray,
    image_mask: np.ndarray,
    texts: np.ndarray,
    text_mask: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """
    FGM both ways between I image sets (I, C, D) and T text sets (T, C', D):
    the image-to-text table (I, T) and the text-to-image table (T, I). Every
    entry is bit-identical however many other sets share the call.
    """
    count_images, slots = image_mask.shape
    count_texts, text_slots = text_mask.shape

    if slots == 0 or text_slots == 0:
        return np.zeros((count_images, count_texts)), np.zeros((count_texts, count_images))

    dots = pairwise_dots(images[:, None], texts[None])

    image_real = image_mask.sum(axis=-1)
    text_real = text_mask.sum(axis=-1)
    both = (image_real[:, None] > 0) & (text_real[None, :] > 0)

    best = np.where(text_mask[None, :, None, :], dots, -np.inf).max(axis=3)
    total = np.where(image_mask[:, None, :], best, 0.0).sum(axis=-1)
    i2t = np.where(both, total / np.maximum(image_real, 1)[:, None], 0.0)

    best = np.where(image_mask[:, None, :, None], dots, -np.inf).max(axis=2)
    total = np.where(text_mask[None, :, :], best, 0.0).sum(axis=-1)
    t2i = np.where(both, total / np.maximum(text_real, 1)[None, :], 0.0)

    return i2t, np.ascontiguousarray(t2i.T)
