"""
Synthetic paired embeddings standing in for frozen-backbone outputs.

Every pair shares latent unit vectors per component slot. An entity latent is
the normalised sum of an object latent and an attribute latent, so that an
attribute swap between two objects keeps every object and attribute present
while breaking the entity-level match. Each side observes every latent
through independent Gaussian noise whose expected norm is `noise_sigma`
(per-coordinate scale `noise_sigma / sqrt(D)`).

Raw global vectors sit on a narrow cone: each is the unit scene vector (the
noisy mean of the component latents, projected off a fixed offset direction
and normalised) plus `global_offset` times that offset direction. Cosine
rankings between globals are those of the scene vectors, while every raw
cosine lies in [(r^2 - 1) / (r^2 + 1), 1] for offset length r.
"""

from dataclasses import dataclass

import numpy as np
from structlog.typing import FilteringBoundLogger

from finematch.core.models import BinaryItem, ComponentRecord, PairedDataset
from finematch.core.random import Stream, generator

DEFAULT_GLOBAL_OFFSET = 5.0

# Stream keys under Stream.SYNTHETIC
PAIRS_KEY = 0
TRIPLES_KEY = 1
OFFSET_KEY = 2


@dataclass(frozen=True)
class Latents:
    objects: np.ndarray
    attributes: np.ndarray
    relations: np.ndarray

    def entities(self, attributes: np.ndarray | None = None) -> np.ndarray:
        attributes = self.attributes if attributes is None else attributes
        return _normalize(self.objects + attributes)


def _normalize(vectors: np.ndarray) -> np.ndarray:
    return vectors / np.linalg.norm(vectors, axis=-1, keepdims=True)


def _snap(vectors: np.ndarray) -> np.ndarray:
    return vectors.astype(np.float32).astype(np.float64)


def _unit(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    return _normalize(rng.standard_normal((count, dim))) if count else np.zeros((0, dim))


def offset_direction(dim: int) -> np.ndarray:
    """
    The unit offset shared by every raw global vector of width `dim`. It does
    not depend on the seed, so sets generated separately (train, test,
    binary) agree on it.
    """
    return _unit(generator(0, Stream.SYNTHETIC, OFFSET_KEY, dim), 1, dim)[0]


def _draw_latents(
    rng: np.random.Generator, dim: int, n_entities: int, m_relations: int
) -> Latents:
    return Latents(
        objects=_unit(rng, n_entities, dim),
        attributes=_unit(rng, n_entities, dim),
        relations=_unit(rng, m_relations, dim),
    )


def _noise(rng: np.random.Generator, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    return rng.standard_normal(shape) * (sigma / np.sqrt(shape[-1]))


def _observe(latents: np.ndarray, noise: np.ndarray) -> np.ndarray:
    if len(latents) == 0:
        return latents.copy()

    return _snap(_normalize(latents + noise))


def _global(
    rng: np.random.Generator, components: np.ndarray, sigma: float, offset_length: float
) -> np.ndarray:
    dim = components.shape[-1]
    offset = offset_direction(dim)

    centre = components.mean(axis=0) if len(components) else np.zeros(dim)
    scene = centre + _noise(rng, (dim,), sigma)

    while True:
        scene = scene - (scene @ offset) * offset
        norm = np.linalg.norm(scene)
        if norm > 0.0:
            break
        scene = rng.standard_normal(dim)

    return _snap(_normalize(offset_length * offset + scene / norm))


def _record(
    rng: np.random.Generator,
    record_id: str,
    modality: str,
    entity_latents: np.ndarray,
    relation_latents: np.ndarray,
    noise_sigma: float,
    global_noise_sigma: float,
    global_offset: float,
    entity_noise: np.ndarray | None = None,
) -> ComponentRecord:
    components = np.concatenate([entity_latents, relation_latents], axis=0)
    coarse_sigma = float(np.hypot(noise_sigma, global_noise_sigma))

    if entity_noise is None:
        entity_noise = _noise(rng, entity_latents.shape, noise_sigma)

    global_vector = _global(rng, components, coarse_sigma, global_offset)
    relation_noise = _noise(rng, relation_latents.shape, noise_sigma)

    return ComponentRecord(
        id=record_id,
        modality=modality,
        global_vector=global_vector,
        entities=_observe(entity_latents, entity_noise),
        relations=_observe(relation_latents, relation_noise),
    )


def _check_arguments(
    dim: int, noise_sigma: float, global_noise_sigma: float, global_offset: float
) -> None:
    if dim < 2:
        raise ValueError(f"dim must be at least 2, got {dim}")
    if noise_sigma < 0 or global_noise_sigma < 0:
        raise ValueError("Noise scales must be non-negative")
    if global_offset < 0:
        raise ValueError("global_offset must be non-negative")


def coarse_recall_at_1(dataset: PairedDataset) -> float:
    """
    Fraction of images whose own text is the nearest text by raw global
    cosine (ties broken by index).
    """
    if len(dataset) == 0:
        return 0.0

    images = _normalize(np.stack([i.global_vector for i in dataset.images]))
    texts = _normalize(np.stack([t.global_vector for t in dataset.texts]))
    nearest = np.argmax(images @ texts.T, axis=1)

    return float(np.mean(nearest == np.arange(len(dataset))))


def synth_pairs(
    count: int,
    dim: int,
    n_entities: int,
    m_relations: int,
    noise_sigma: float,
    seed: int,
    global_noise_sigma: float = 0.0,
    global_offset: float = DEFAULT_GLOBAL_OFFSET,
    log: FilteringBoundLogger | None = None,
) -> PairedDataset:
    """
    Generate `count` positive (image, text) pairs.

    Parameters
    ----------
    count
        Number of pairs.
    dim
        Embedding width D.
    n_entities, m_relations
        Components per record (every slot is real).
    noise_sigma
        Expected norm of the observation noise added to each latent.
    seed
        Generation is a pure function of the arguments.
    global_noise_sigma
        Additional noise applied to global vectors only, used to make coarse
        retrieval deliberately weak.
    global_offset
        Length of the shared offset added to every raw global before
        normalisation. Zero disables it.
    """
    _check_arguments(dim, noise_sigma, global_noise_sigma, global_offset)

    rng = generator(seed, Stream.SYNTHETIC, PAIRS_KEY)
    pairs = []

    for index in range(count):
        latents = _draw_latents(rng, dim, n_entities, m_relations)
        entities = latents.entities()

        pairs.append(
            tuple(
                _record(
                    rng,
                    f"{prefix}-{index:06d}",
                    modality,
                    entities,
                    latents.relations,
                    noise_sigma,
                    global_noise_sigma,
                    global_offset,
                )
                for prefix, modality in (("img", "image"), ("txt", "text"))
            )
        )

    dataset = PairedDataset(
        pairs=pairs, dim=dim, n_entities=n_entities, m_relations=m_relations
    )

    if log is not None:
        log.bind(
            count=count,
            dim=dim,
            noise_sigma=noise_sigma,
            global_noise_sigma=global_noise_sigma,
            global_offset=global_offset,
            seed=seed,
            coarse_recall_at_1=coarse_recall_at_1(dataset),
        ).info("synth.pairs_generated")

    return dataset


def synth_binary_triples(
    count: int,
    dim: int,
    n_entities: int,
    m_relations: int,
    noise_sigma: float,
    seed: int,
    global_noise_sigma: float = 0.0,
    global_offset: float = DEFAULT_GLOBAL_OFFSET,
) -> list[BinaryItem]:
    """
    Generate binary compositional items: an image, its caption, and a caption
    in which the attributes of two entities are swapped. The correct caption
    alternates between positions A and B.

    The wrong caption is the correct caption with the two attribute latents
    exchanged: it keeps the caption's observation noise, its relations and
    its global vector (the bag of latents is unchanged), so only the two
    swapped entity components differ.
    """
    _check_arguments(dim, noise_sigma, global_noise_sigma, global_offset)

    if n_entities < 2:
        raise ValueError("Attribute swaps need at least two entities")

    rng = generator(seed, Stream.SYNTHETIC, TRIPLES_KEY)
    items = []

    for index in range(count):
        latents = _draw_latents(rng, dim, n_entities, m_relations)
        first, second = rng.choice(n_entities, size=2, replace=False)

        swapped = latents.attributes.copy()
        swapped[[first, second]] = swapped[[second, first]]

        scales = (noise_sigma, global_noise_sigma, global_offset)

        image = _record(
            rng,
            f"bimg-{index:06d}",
            "image",
            latents.entities(),
            latents.relations,
            *scales,
        )

        caption_noise = _noise(rng, (n_entities, dim), noise_sigma)
        correct = _record(
            rng,
            f"btxt-{index:06d}-pos",
            "text",
            latents.entities(),
            latents.relations,
            *scales,
            entity_noise=caption_noise,
        )
        wrong = ComponentRecord(
            id=f"btxt-{index:06d}-neg",
            modality="text",
            global_vector=correct.global_vector,
            entities=_observe(latents.entities(swapped), caption_noise),
            relations=correct.relations,
        )

        if index % 2 == 0:
            items.append(
                BinaryItem(image=image, caption_a=correct, caption_b=wrong, correct="A")
            )
        else:
            items.append(
                BinaryItem(image=image, caption_a=wrong, caption_b=correct, correct="B")
            )

    return items
