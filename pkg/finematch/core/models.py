"""
Pydantic models shared between the storage, service, and script layers.
"""

from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from finematch.config.settings import RunConfig

from .components import DetectionBox


def frozen_array(value, ndim: int) -> np.ndarray:
    array = np.array(value, dtype=np.float64)

    if ndim == 2 and array.size == 0:
        array = array.reshape(0, array.shape[-1] if array.ndim == 2 else 0)

    if array.ndim != ndim:
        raise ValueError(f"Expected a {ndim}-d array, got shape {array.shape}")

    array.flags.writeable = False
    return array


class ComponentRecord(BaseModel):
    """
    One image or one text, as embedded by a frozen backbone: a global vector
    plus the real (unpadded) entity and relation vectors.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    id: str
    modality: Literal["image", "text"]
    global_vector: np.ndarray
    entities: np.ndarray
    relations: np.ndarray
    boxes: list[DetectionBox] | None = None

    @field_validator("global_vector", mode="before")
    @classmethod
    def coerce_global(cls, value) -> np.ndarray:
        return frozen_array(value, ndim=1)

    @field_validator("entities", "relations", mode="before")
    @classmethod
    def coerce_components(cls, value) -> np.ndarray:
        return frozen_array(value, ndim=2)

    @model_validator(mode="after")
    def check_widths(self) -> "ComponentRecord":
        dim = self.global_vector.shape[0]

        for name, block in (("entities", self.entities), ("relations", self.relations)):
            if len(block) and block.shape[1] != dim:
                raise ValueError(
                    f"Record {self.id}: {name} have width {block.shape[1]}, "
                    f"global has {dim}"
                )

        if self.boxes is not None and self.modality != "image":
            raise ValueError(f"Record {self.id}: only image records carry boxes")

        if not all(np.all(np.isfinite(a)) for a in (self.global_vector, self.entities, self.relations)):
            raise ValueError(f"Record {self.id}: non-finite payload")

        return self

    @property
    def dim(self) -> int:
        return self.global_vector.shape[0]


class PairedDataset(BaseModel):
    """
    Index-aligned (image, text) positives. One image record may appear in
    several pairs (many captions per image).
    """

    model_config = ConfigDict(frozen=True)

    pairs: list[tuple[ComponentRecord, ComponentRecord]]
    dim: int = Field(ge=1)
    n_entities: int = Field(ge=0)
    m_relations: int = Field(ge=0)

    @model_validator(mode="after")
    def check_pairs(self) -> "PairedDataset":
        for image, text in self.pairs:
            if image.modality != "image" or text.modality != "text":
                raise ValueError(
                    f"Pair ({image.id}, {text.id}) must be (image, text)"
                )
            for record in (image, text):
                if record.dim != self.dim:
                    raise ValueError(
                        f"Record {record.id} has dim {record.dim}, expected {self.dim}"
                    )
                if len(record.entities) > self.n_entities:
                    raise ValueError(
                        f"Record {record.id} has {len(record.entities)} entities, "
                        f"limit is {self.n_entities}"
                    )
                if len(record.relations) > self.m_relations:
                    raise ValueError(
                        f"Record {record.id} has {len(record.relations)} relations, "
                        f"limit is {self.m_relations}"
                    )
        return self

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def images(self) -> list[ComponentRecord]:
        return [image for image, _ in self.pairs]

    @property
    def texts(self) -> list[ComponentRecord]:
        return [text for _, text in self.pairs]

    def unique_images(self) -> tuple[list[ComponentRecord], list[int]]:
        """
        Distinct image records in first-appearance order, and for every pair
        the position of its image in that list.
        """
        seen: dict[str, int] = {}
        images = []
        owner = []

        for image, _ in self.pairs:
            if image.id not in seen:
                seen[image.id] = len(images)
                images.append(image)
            owner.append(seen[image.id])

        return images, owner


class BinaryItem(BaseModel):
    """
    One image with two candidate captions, exactly one of them correct.
    """

    model_config = ConfigDict(frozen=True)

    image: ComponentRecord
    caption_a: ComponentRecord
    caption_b: ComponentRecord
    correct: Literal["A", "B"]


class EncoderParams(BaseModel):
    """
    Weights of one alignment head, keyed by canonical parameter name.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dim: int
    heads: int
    ffn_ratio: int
    num_layers: int
    architecture: Literal["transformer", "mlp"] = "transformer"
    tensors: dict[str, np.ndarray]

    @field_validator("tensors", mode="before")
    @classmethod
    def coerce_tensors(cls, value) -> dict[str, np.ndarray]:
        result = {}
        for name, array in value.items():
            array = np.array(array, dtype=np.float64)
            array.flags.writeable = False
            result[name] = array
        return result

    @model_validator(mode="after")
    def check_tensors(self) -> "EncoderParams":
        if self.dim % self.heads != 0:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")

        for name, array in self.tensors.items():
            if not np.all(np.isfinite(array)):
                raise ValueError(f"Parameter {name} is not finite")

        return self

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def replace(self, tensors: dict[str, np.ndarray]) -> "EncoderParams":
        return EncoderParams(
            dim=self.dim,
            heads=self.heads,
            ffn_ratio=self.ffn_ratio,
            num_layers=self.num_layers,
            architecture=self.architecture,
            tensors=tensors,
        )


class Checkpoint(BaseModel):
    """
    Trained heads plus the configuration that produced them. A `None` head
    is a bypassed modality.
    """

    model_config = ConfigDict(frozen=True)

    config: RunConfig
    image: EncoderParams | None
    text: EncoderParams | None
    epoch: int = 0
    loss: float | None = None
    validation_loss: float | None = None


class LossFlags(BaseModel):
    model_config = ConfigDict(frozen=True)

    use_global: bool = True
    use_entity: bool = True
    use_relation: bool = True
    temperature: float = Field(default=1.0, gt=0.0)
    global_weight: float = Field(default=1.0, ge=0.0)

    @classmethod
    def from_config(cls, config: RunConfig) -> "LossFlags":
        return cls(
            use_global=config.use_global,
            use_entity=config.use_entity,
            use_relation=config.use_relation,
            temperature=config.temperature,
            global_weight=config.global_loss_weight,
        )

    @property
    def any_enabled(self) -> bool:
        return self.use_global or self.use_entity or self.use_relation


class InferenceWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha1: float = 0.1
    alpha2: float = 0.033
    beta1: float = 0.33

    @classmethod
    def from_config(cls, config: RunConfig) -> "InferenceWeights":
        return cls(alpha1=config.alpha1, alpha2=config.alpha2, beta1=config.beta1)


class ScoredPair(BaseModel):
    base_global: float
    i2t_entity: float
    t2i_entity: float
    i2t_relation: float
    t2i_relation: float
    i2t_global: float
    t2i_global: float
    s_i2t: float
    s_t2i: float

    @model_validator(mode="after")
    def check_finite(self) -> "ScoredPair":
        if not all(np.isfinite(v) for v in self.model_dump().values()):
            raise ValueError("Scores must be finite")
        return self


class RetrievalReport(BaseModel):
    i2t: dict[int, float]
    t2i: dict[int, float]

    @model_validator(mode="after")
    def check_monotone(self) -> "RetrievalReport":
        for direction in (self.i2t, self.t2i):
            recalls = [direction[k] for k in sorted(direction)]
            if any(not (0.0 <= r <= 1.0) for r in recalls):
                raise ValueError("Recall must lie in [0, 1]")
            if any(a > b for a, b in zip(recalls, recalls[1:])):
                raise ValueError("Recall must be non-decreasing in K")
        return self
