"""
The optimisation loop: encode both modalities, build the in-batch similarity
bundle, take the contrastive loss, backpropagate, and update the trainable
heads with AdamW under a StepLR schedule.
"""

from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from structlog.typing import FilteringBoundLogger

from finematch.config.settings import RunConfig
from finematch.core.autodiff import (
    DimensionError,
    NonFiniteError,
    Tape,
    Tensor,
    backward,
)
from finematch.core.models import Checkpoint, EncoderParams, LossFlags, PairedDataset
from finematch.core.random import Stream
from finematch.storage.checkpoint import snap_params, write_checkpoint
from finematch.storage.tables import LOSS_COLUMNS, append_row

from .encoder import (
    SlotLayout,
    TokenSequence,
    as_tensors,
    bypass_tensors,
    encode_tensors,
    init_params,
)
from .ingest import PairedSequences, assemble_pairs, make_batches
from .matching import similarity_tensors
from .objective import DirectionLosses, combine, direction_losses
from .optimizer import OptimizerState, adamw_step, clip_by_global_norm, steplr

LOSS_FILENAME = "loss.csv"

# loss.csv column -> channel key in DirectionLosses.channels
CHANNEL_COLUMNS = {
    "L_I2T_E": "i2t_entity",
    "L_I2T_R": "i2t_relation",
    "L_I2T_G": "i2t_global",
    "L_T2I_E": "t2i_entity",
    "L_T2I_R": "t2i_relation",
    "L_T2I_G": "t2i_global",
}


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int, batch_index: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch_index})")
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass(frozen=True)
class Heads:
    image: EncoderParams | None
    text: EncoderParams | None

    @classmethod
    def of(cls, checkpoint: Checkpoint) -> "Heads":
        return cls(image=checkpoint.image, text=checkpoint.text)

    def weights(self, requires_grad: bool = False) -> dict[str, Tensor]:
        """
        Leaf tensors of both heads keyed by canonical name (`image.<name>`,
        `text.<name>`).
        """
        result = {}
        for prefix, params in (("image", self.image), ("text", self.text)):
            if params is not None:
                leaves = as_tensors(params, prefix, requires_grad)
                result.update({leaf.name: leaf for leaf in leaves.values()})
        return result


def resolve_config(dataset: PairedDataset, config: RunConfig) -> RunConfig:
    """
    Fill in `dim` from the data and check the dataset fits the configured
    slot layout.
    """
    if config.dim is not None and config.dim != dataset.dim:
        raise DimensionError(
            f"Config dim={config.dim} does not match the data (dim={dataset.dim})"
        )

    if (dataset.n_entities, dataset.m_relations) != (config.n_entities, config.m_relations):
        raise DimensionError(
            f"Data holds N={dataset.n_entities}, M={dataset.m_relations}; config "
            f"expects N={config.n_entities}, M={config.m_relations}"
        )

    if config.dim is not None:
        return config

    return RunConfig(**{**config.model_dump(), "dim": dataset.dim})


def init_heads(config: RunConfig) -> Heads:
    if config.dim is None:
        raise DimensionError("Cannot initialise heads before dim is known")

    def make(bypass: bool, stream: Stream) -> EncoderParams | None:
        if bypass:
            return None
        return init_params(
            config.dim,
            config.heads,
            config.ffn_ratio,
            config.seed,
            num_layers=config.num_layers,
            architecture=config.architecture,
            stream=stream,
        )

    return Heads(
        image=make(config.image_bypass, Stream.IMAGE_INIT),
        text=make(config.text_bypass, Stream.TEXT_INIT),
    )


def _strip(weights: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    start = len(prefix) + 1
    return {k[start:]: t for k, t in weights.items() if k.startswith(prefix + ".")}


def _encode_side(
    params: EncoderParams | None,
    weights: Mapping[str, Tensor],
    seq: TokenSequence,
    config: RunConfig,
    visible: np.ndarray | None,
) -> Tensor:
    if params is None:
        return bypass_tensors(seq)

    return encode_tensors(
        params,
        weights,
        seq,
        positional=config.positional_encoding,
        eps=config.layer_norm_eps,
        visible=visible,
    )


def pipeline_loss(
    heads: Heads,
    weights: Mapping[str, Tensor],
    batch: PairedSequences,
    config: RunConfig,
) -> tuple[Tensor, DirectionLosses]:
    """
    Encode a batch of pairs, build the similarity bundle, and take the
    contrastive loss. `weights` holds the tensors of both heads under their
    canonical names; only they are read, so tracked leaves may be passed.
    """
    layout = SlotLayout(config.n_entities, config.m_relations)
    flags = LossFlags.from_config(config)
    visible = None

    if config.isolate_disabled:
        visible = layout.channel_visibility(
            flags.use_global, flags.use_entity, flags.use_relation
        )

    z_img = _encode_side(heads.image, _strip(weights, "image"), batch.images, config, visible)
    z_txt = _encode_side(heads.text, _strip(weights, "text"), batch.texts, config, visible)

    bundle = similarity_tensors(z_img, batch.images.mask, z_txt, batch.texts.mask, layout)
    losses = direction_losses(bundle, flags)

    return combine(losses), losses


def evaluate_loss(
    data: PairedDataset | PairedSequences, heads: Heads, config: RunConfig
) -> float:
    """
    Pair-weighted mean of the batch loss over the whole dataset, in dataset
    order.
    """
    sequences = assemble_pairs(data) if isinstance(data, PairedDataset) else data
    weights = heads.weights()
    accumulated = 0.0

    for indices in make_batches(
        len(sequences), config.batch_size, config.seed, shuffle=False, training=False
    ):
        loss, _ = pipeline_loss(heads, weights, sequences.take(indices), config)
        accumulated += loss.item() * len(indices)

    return accumulated / len(sequences)


def _trainable(heads: Heads, config: RunConfig) -> set[str]:
    prefixes = set()
    if heads.image is not None and config.train_image_encoder:
        prefixes.add("image")
    if heads.text is not None and config.train_text_encoder:
        prefixes.add("text")
    return prefixes


def _update_heads(heads: Heads, values: Mapping[str, np.ndarray]) -> Heads:
    def rebuild(params: EncoderParams | None, prefix: str) -> EncoderParams | None:
        if params is None or not any(k.startswith(prefix + ".") for k in values):
            return params
        tensors = dict(params.tensors)
        start = len(prefix) + 1
        tensors.update({k[start:]: v for k, v in values.items() if k.startswith(prefix + ".")})
        return params.replace(tensors)

    return Heads(image=rebuild(heads.image, "image"), text=rebuild(heads.text, "text"))


@dataclass
class _EpochTotals:
    loss: float = 0.0
    pairs: int = 0
    channels: dict[str, float] = field(
        default_factory=lambda: {column: 0.0 for column in CHANNEL_COLUMNS}
    )

    def add(self, loss: Tensor, losses: DirectionLosses, size: int) -> None:
        self.loss += loss.item() * size
        self.pairs += size
        for column, key in CHANNEL_COLUMNS.items():
            if key in losses.channels:
                self.channels[column] += float(losses.channels[key].data.sum())

    def row(self, epoch: int, lr: float) -> list:
        return [epoch, lr, self.loss / self.pairs] + [
            self.channels[column] / self.pairs for column in CHANNEL_COLUMNS
        ]


def train_step(
    heads: Heads,
    state: OptimizerState,
    batch: PairedSequences,
    config: RunConfig,
    lr: float,
) -> tuple[Heads, OptimizerState, Tensor, DirectionLosses]:
    """
    One optimisation step on one batch. Raises `NonFiniteError` if the loss
    or a gradient is not finite; nothing is updated in that case.
    """
    trainable = _trainable(heads, config)
    leaves = {
        name: Tensor(t.data, name=name, requires_grad=name.split(".", 1)[0] in trainable)
        for name, t in heads.weights().items()
    }

    with Tape(check_finite=True) as tape:
        loss, losses = pipeline_loss(heads, leaves, batch, config)

    if not np.isfinite(loss.item()):
        raise NonFiniteError(f"Loss is {loss.item()}")

    tracked = [leaf for leaf in leaves.values() if leaf.requires_grad]

    if not tracked:
        return heads, state, loss, losses

    grads = backward(tape, loss, tracked)

    if config.clip_grad_norm is not None:
        grads, _ = clip_by_global_norm(grads, config.clip_grad_norm)

    values, state = adamw_step(
        {leaf.name: leaf.data for leaf in tracked},
        grads,
        state,
        lr,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )

    return _update_heads(heads, values), state, loss, losses


def train(
    dataset: PairedDataset,
    config: RunConfig,
    log: FilteringBoundLogger,
    output_dir: Path | None = None,
    validation: PairedDataset | None = None,
) -> Checkpoint:
    """
    Train the alignment heads on `dataset`.

    Parameters
    ----------
    dataset
        Training pairs; its N, M must equal the config's and its D the
        config's `dim` when that is set.
    config
        Run configuration. The run is a pure function of the data and the
        config (including `seed`).
    log
        Bound logger.
    output_dir
        When given, receives `epoch-XXX`, `last` and `best` checkpoints and
        `loss.csv`.
    validation
        Optional held-out pairs used to pick the best checkpoint.

    Returns
    -------
    Checkpoint
        The final epoch's heads, snapped to float32, with its evaluation
        loss on `dataset`.

    Raises
    ------
    TrainingError
        If a batch produces a non-finite loss or gradient.
    """
    config = resolve_config(dataset, config)
    sequences = assemble_pairs(dataset)
    validation_sequences = None

    if validation is not None:
        resolve_config(validation, config)
        validation_sequences = assemble_pairs(validation)

    heads = init_heads(config)
    state = OptimizerState()

    log = log.bind(pairs=len(dataset), dim=config.dim, epochs=config.epochs, seed=config.seed)
    log.info("train.started")

    loss_path = None
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        loss_path = output_dir / LOSS_FILENAME
        loss_path.unlink(missing_ok=True)

    snapped = Heads(image=snap_params(heads.image), text=snap_params(heads.text))
    checkpoint = Checkpoint(
        config=config,
        image=snapped.image,
        text=snapped.text,
        epoch=0,
        loss=evaluate_loss(sequences, snapped, config),
    )
    best_loss = None

    for epoch in range(config.epochs):
        lr = steplr(config.lr0, epoch, config.step_size, config.gamma)
        totals = _EpochTotals()

        batches = make_batches(
            len(sequences), config.batch_size, config.seed, config.shuffle, epoch=epoch
        )

        for batch_index, indices in enumerate(batches):
            try:
                heads, state, loss, losses = train_step(
                    heads, state, sequences.take(indices), config, lr
                )
            except NonFiniteError as e:
                log.bind(epoch=epoch + 1, batch_index=batch_index).error(
                    "train.non_finite"
                )
                raise TrainingError(str(e), epoch=epoch + 1, batch_index=batch_index) from e

            totals.add(loss, losses, len(indices))

        snapped = Heads(image=snap_params(heads.image), text=snap_params(heads.text))
        train_loss = evaluate_loss(sequences, snapped, config)
        validation_loss = None

        if validation_sequences is not None:
            validation_loss = evaluate_loss(validation_sequences, snapped, config)

        checkpoint = Checkpoint(
            config=config,
            image=snapped.image,
            text=snapped.text,
            epoch=epoch + 1,
            loss=train_loss,
            validation_loss=validation_loss,
        )
        selection = train_loss if validation_loss is None else validation_loss
        improved = best_loss is None or selection < best_loss

        if improved:
            best_loss = selection

        row = totals.row(epoch + 1, lr)

        log.bind(
            epoch=epoch + 1,
            lr=lr,
            loss=row[2],
            eval_loss=train_loss,
            validation_loss=validation_loss,
        ).info("train.epoch_complete")

        if output_dir is not None:
            append_row(loss_path, LOSS_COLUMNS, row)
            write_checkpoint(checkpoint, output_dir / f"epoch-{epoch + 1:03d}")
            write_checkpoint(checkpoint, output_dir / "last")
            if improved:
                write_checkpoint(checkpoint, output_dir / "best")
            log.bind(epoch=epoch + 1, best=improved).info("train.checkpoint_written")

    if output_dir is not None and config.epochs == 0:
        write_checkpoint(checkpoint, output_dir / "last")
        write_checkpoint(checkpoint, output_dir / "best")

    log.bind(loss=checkpoint.loss).info("train.finished")

    return checkpoint
