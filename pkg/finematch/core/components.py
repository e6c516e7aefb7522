"""
Geometry for visual relation candidates and the fixed-count fitting policy
for component lists.
"""

from collections.abc import Sequence
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class DetectionBox(BaseModel):
    """
    Axis-aligned detection in pixel coordinates.
    """

    model_config = ConfigDict(frozen=True)

    x1: float
    y1: float
    x2: float
    y2: float
    confidence: float = Field(ge=0.0, le=1.0)
    label: str | None = None

    @model_validator(mode="after")
    def check_ordering(self) -> "DetectionBox":
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(
                f"Box coordinates must satisfy x1 < x2 and y1 < y2, got "
                f"({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )
        return self

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def contains(self, other: "DetectionBox") -> bool:
        return (
            self.x1 <= other.x1
            and self.y1 <= other.y1
            and self.x2 >= other.x2
            and self.y2 >= other.y2
        )


class RelationCandidate(BaseModel):
    model_config = ConfigDict(frozen=True)

    subject_index: int
    object_index: int
    box: DetectionBox
    score: float

    @model_validator(mode="after")
    def check_members(self) -> "RelationCandidate":
        if self.subject_index == self.object_index:
            raise ValueError("A relation needs two distinct member boxes")
        return self


@dataclass(frozen=True)
class FittedList:
    """
    Exactly K component slots. Real components come first; padding slots are
    zero vectors with a false mask bit.
    """

    items: np.ndarray
    mask: np.ndarray
    kept: tuple[int, ...]

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def enclosing_box(a: DetectionBox, b: DetectionBox) -> DetectionBox:
    """
    Minimal box containing both inputs, scored by the product of their
    confidences.
    """
    return DetectionBox(
        x1=min(a.x1, b.x1),
        y1=min(a.y1, b.y1),
        x2=max(a.x2, b.x2),
        y2=max(a.y2, b.y2),
        confidence=a.confidence * b.confidence,
    )


def relation_candidates(
    boxes: Sequence[DetectionBox], m: int
) -> list[RelationCandidate]:
    """
    Score every unordered pair of detections and keep the best `m`.

    Ordering is by score descending, then by union area ascending, then by
    (subject_index, object_index).
    """
    if m < 0:
        raise ValueError(f"Candidate count must be non-negative, got {m}")

    candidates = []

    for i, j in combinations(range(len(boxes)), 2):
        union = enclosing_box(boxes[i], boxes[j])
        candidates.append(
            RelationCandidate(
                subject_index=i, object_index=j, box=union, score=union.confidence
            )
        )

    candidates.sort(
        key=lambda c: (-c.score, c.box.area, c.subject_index, c.object_index)
    )

    return candidates[:m]


def fit_to_count(
    components: Sequence[np.ndarray] | np.ndarray,
    k: int,
    ranking: Sequence[float] | None = None,
    dim: int | None = None,
) -> FittedList:
    """
    Truncate or pad a component list to exactly `k` slots.

    Parameters
    ----------
    components
        Component vectors, in occurrence order.
    k
        Number of slots.
    ranking
        Scores for the visual path: the top-`k` by score (descending, stable)
        survive, in score order. Without scores (the textual path) the first
        `k` survive in occurrence order.
    dim
        Vector width, required when `components` is empty.
    """
    if k < 0:
        raise ValueError(f"Slot count must be non-negative, got {k}")

    vectors = [np.asarray(c, dtype=np.float64) for c in components]

    if dim is None:
        if not vectors:
            raise ValueError("dim is required to fit an empty component list")
        dim = vectors[0].shape[-1]

    if ranking is not None:
        if len(ranking) != len(vectors):
            raise ValueError(
                f"Got {len(ranking)} scores for {len(vectors)} components"
            )
        order = np.argsort(-np.asarray(ranking, dtype=np.float64), kind="stable")
        kept = tuple(int(i) for i in order[:k])
    else:
        kept = tuple(range(min(k, len(vectors))))

    items = np.zeros((k, dim))
    mask = np.zeros(k, dtype=bool)

    for slot, source in enumerate(kept):
        items[slot] = vectors[source]
        mask[slot] = True

    items.flags.writeable = False
    mask.flags.writeable = False

    return FittedList(items=items, mask=mask, kept=kept)
