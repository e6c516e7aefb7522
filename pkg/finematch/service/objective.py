"""
Contrastive objective over a similarity bundle: per-row softmax cross-entropy
with the matching item on the diagonal, summed over the enabled channels for
each direction and averaged over both directions and the batch.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from finematch.core.autodiff import (
    DimensionError,
    Tensor,
    add,
    cross_entropy_rows,
    scale,
    total,
)
from finematch.core.models import LossFlags

from .matching import SimilarityBundle


class LossConfigError(ValueError):
    pass


CHANNELS = ("entity", "relation", "global")


@dataclass(frozen=True)
class DirectionLosses:
    """
    Per-row losses for each direction, and the unweighted per-channel row
    losses they were summed from (keys like "i2t_entity").
    """

    i2t: Tensor
    t2i: Tensor
    channels: dict[str, Tensor]


def info_nce_row(s_row: Sequence[float], i: int, tau: float = 1.0) -> float:
    """
    -log(exp(s_i / tau) / sum_j exp(s_j / tau)), log-sum-exp stabilised.
    """
    if tau <= 0:
        raise ValueError("Temperature must be positive")

    logits = np.asarray(s_row, dtype=np.float64) / tau

    if not 0 <= i < len(logits):
        raise IndexError(f"Diagonal index {i} outside a row of length {len(logits)}")

    peak = logits.max()
    return float(peak + math.log(np.exp(logits - peak).sum()) - logits[i])


def _enabled(flags: LossFlags) -> list[str]:
    return [
        channel
        for channel, on in zip(
            CHANNELS, (flags.use_entity, flags.use_relation, flags.use_global)
        )
        if on
    ]


def direction_losses(bundle: SimilarityBundle, flags: LossFlags) -> DirectionLosses:
    """
    Row losses L^{I2T}_i and L^{T2I}_i summed over the enabled channels.

    Raises
    ------
    LossConfigError
        If every channel is disabled.
    DimensionError
        If the bundle is not square.
    """
    enabled = _enabled(flags)

    if not enabled:
        raise LossConfigError("At least one loss channel must be enabled")

    size = bundle.i2t_global.shape[0]
    targets = np.arange(size)

    for name, matrix in bundle.arrays().items():
        if matrix.shape != (size, size):
            raise DimensionError(f"{name} is {matrix.shape}, expected ({size}, {size})")

    channels: dict[str, Tensor] = {}
    sums: dict[str, Tensor | None] = {"i2t": None, "t2i": None}

    for direction in ("i2t", "t2i"):
        for channel in enabled:
            similarities = getattr(bundle, f"{direction}_{channel}")
            rows = cross_entropy_rows(scale(similarities, 1.0 / flags.temperature), targets)
            channels[f"{direction}_{channel}"] = rows

            if channel == "global" and flags.global_weight != 1.0:
                rows = scale(rows, flags.global_weight)

            running = sums[direction]
            sums[direction] = rows if running is None else add(running, rows)

    return DirectionLosses(i2t=sums["i2t"], t2i=sums["t2i"], channels=channels)


def combine(losses: DirectionLosses) -> Tensor:
    size = losses.i2t.shape[0]
    return scale(total(add(losses.i2t, losses.t2i)), 1.0 / (2.0 * size))


def total_loss(bundle: SimilarityBundle, flags: LossFlags) -> Tensor:
    """
    (1 / 2B) * sum_i (L^{I2T}_i + L^{T2I}_i).
    """
    return combine(direction_losses(bundle, flags))
