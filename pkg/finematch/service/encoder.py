"""
Alignment heads: sequence assembly, positional encoding, and the pre-norm
encoder that contextualises the [global, entities..., relations...] tokens of
one modality.
"""

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from cachetools import LRUCache, cached

from finematch.core.autodiff import (
    DimensionError,
    NonFiniteError,
    Tensor,
    add,
    apply_mask,
    constant,
    gelu,
    l2_normalize,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax_rows,
    transpose,
)
from finematch.core.components import fit_to_count
from finematch.core.models import ComponentRecord, EncoderParams
from finematch.core.random import Stream, generator


@dataclass(frozen=True)
class TokenSequence:
    """
    Tokens of shape (..., 1 + N + M, D) in the order [global, e_1..e_N,
    r_1..r_M], with a matching boolean mask of shape (..., 1 + N + M).
    """

    tokens: np.ndarray
    mask: np.ndarray

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


@dataclass(frozen=True)
class SlotLayout:
    n_entities: int
    m_relations: int

    @property
    def length(self) -> int:
        return 1 + self.n_entities + self.m_relations

    @property
    def entities(self) -> slice:
        return slice(1, 1 + self.n_entities)

    @property
    def relations(self) -> slice:
        return slice(1 + self.n_entities, self.length)

    def channel_visibility(
        self, use_global: bool, use_entity: bool, use_relation: bool
    ) -> np.ndarray:
        visible = np.ones(self.length, dtype=bool)
        visible[0] = use_global
        visible[self.entities] = use_entity
        visible[self.relations] = use_relation
        return visible


def assemble_sequence(
    record: ComponentRecord, n_entities: int, m_relations: int, dim: int | None = None
) -> TokenSequence:
    """
    Lay a record out as [g, e_1..e_N, r_1..r_M], padding with masked zero
    vectors.

    Raises
    ------
    DimensionError
        If the record width differs from `dim`, or it holds more components
        than there are slots.
    """
    dim = record.dim if dim is None else dim

    if record.dim != dim:
        raise DimensionError(f"Record {record.id} has dim {record.dim}, expected {dim}")

    if len(record.entities) > n_entities or len(record.relations) > m_relations:
        raise DimensionError(
            f"Record {record.id} holds {len(record.entities)} entities and "
            f"{len(record.relations)} relations, slots are {n_entities}/{m_relations}"
        )

    entities = fit_to_count(record.entities, n_entities, dim=dim)
    relations = fit_to_count(record.relations, m_relations, dim=dim)

    tokens = np.concatenate(
        [record.global_vector[None, :], entities.items, relations.items], axis=0
    )
    mask = np.concatenate([[True], entities.mask, relations.mask])

    tokens.flags.writeable = False
    mask.flags.writeable = False

    return TokenSequence(tokens=tokens, mask=mask)


def stack_sequences(sequences: Sequence[TokenSequence]) -> TokenSequence:
    if not sequences:
        raise DimensionError("Cannot stack an empty list of sequences")

    return TokenSequence(
        tokens=np.stack([s.tokens for s in sequences]),
        mask=np.stack([s.mask for s in sequences]),
    )


@cached(cache=LRUCache(maxsize=64))
def positional_encoding(length: int, dim: int) -> np.ndarray:
    """
    Sinusoidal encoding: PE[pos, 2i] = sin(pos / 10000^(2i/dim)) and
    PE[pos, 2i+1] = cos(pos / 10000^(2i/dim)). The returned array is shared
    and read-only.
    """
    if dim % 2 != 0:
        raise ValueError(f"Positional encoding needs an even dim, got {dim}")

    positions = np.arange(length, dtype=np.float64)[:, None]
    frequencies = np.power(10000.0, np.arange(0, dim, 2, dtype=np.float64) / dim)

    encoding = np.zeros((length, dim))
    encoding[:, 0::2] = np.sin(positions / frequencies)
    encoding[:, 1::2] = np.cos(positions / frequencies)
    encoding.flags.writeable = False

    return encoding


def parameter_shapes(
    dim: int,
    ffn_ratio: int,
    num_layers: int,
    architecture: str = "transformer",
) -> list[tuple[str, tuple[int, ...]]]:
    """
    Canonical parameter names and shapes, in initialisation order. Linear
    weights are (fan_in, fan_out) and applied as x @ W + b.
    """
    hidden = dim * ffn_ratio
    shapes = []

    for layer in range(num_layers):
        prefix = f"layers.{layer}"

        if architecture == "transformer":
            shapes += [
                (f"{prefix}.attention_norm.gain", (dim,)),
                (f"{prefix}.attention_norm.bias", (dim,)),
            ]
            for projection in ("query", "key", "value", "output"):
                shapes += [
                    (f"{prefix}.attention.{projection}.weight", (dim, dim)),
                    (f"{prefix}.attention.{projection}.bias", (dim,)),
                ]

        shapes += [
            (f"{prefix}.feedforward_norm.gain", (dim,)),
            (f"{prefix}.feedforward_norm.bias", (dim,)),
            (f"{prefix}.feedforward.expand.weight", (dim, hidden)),
            (f"{prefix}.feedforward.expand.bias", (hidden,)),
            (f"{prefix}.feedforward.contract.weight", (hidden, dim)),
            (f"{prefix}.feedforward.contract.bias", (dim,)),
        ]

    shapes += [("final_norm.gain", (dim,)), ("final_norm.bias", (dim,))]

    return shapes


def init_params(
    dim: int,
    heads: int,
    ratio: int,
    seed: int,
    num_layers: int = 2,
    architecture: str = "transformer",
    stream: Stream = Stream.IMAGE_INIT,
) -> EncoderParams:
    """
    Fresh parameters. Linear weights are uniform in +/- sqrt(6 / (fan_in +
    fan_out)), biases zero, norm gains one.
    """
    if dim % heads != 0:
        raise ValueError(f"dim={dim} is not divisible by heads={heads}")

    rng = generator(seed, stream)
    tensors = {}

    for name, shape in parameter_shapes(dim, ratio, num_layers, architecture):
        if name.endswith(".weight"):
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
        elif name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)

    return EncoderParams(
        dim=dim,
        heads=heads,
        ffn_ratio=ratio,
        num_layers=num_layers,
        architecture=architecture,
        tensors=tensors,
    )


def as_tensors(
    params: EncoderParams, prefix: str, requires_grad: bool = False
) -> dict[str, Tensor]:
    return {
        name: Tensor(array, name=f"{prefix}.{name}", requires_grad=requires_grad)
        for name, array in params.tensors.items()
    }


def attention_mask(mask: np.ndarray, visible: np.ndarray | None = None) -> np.ndarray:
    """
    Keys each query may attend to, shaped (B, 1, L, L) to broadcast over
    heads: real (and visible) slots, plus the query itself so that no row is
    ever empty.
    """
    keys = mask if visible is None else mask & visible
    length = mask.shape[-1]
    allowed = keys[:, None, :] | np.eye(length, dtype=bool)[None, :, :]
    return allowed[:, None, :, :]


def _linear(x: Tensor, weights: Mapping[str, Tensor], name: str) -> Tensor:
    return add(matmul(x, weights[f"{name}.weight"]), weights[f"{name}.bias"])


def _self_attention(
    x: Tensor,
    weights: Mapping[str, Tensor],
    prefix: str,
    heads: int,
    allowed: np.ndarray,
) -> Tensor:
    batch, length, dim = x.shape
    width = dim // heads

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, length, heads, width)), (0, 2, 1, 3))

    query = split(_linear(x, weights, f"{prefix}.query"))
    key = split(_linear(x, weights, f"{prefix}.key"))
    value = split(_linear(x, weights, f"{prefix}.value"))

    scores = scale(matmul(query, transpose(key, (0, 1, 3, 2))), 1.0 / math.sqrt(width))
    context = matmul(softmax_rows(scores, allowed), value)
    merged = reshape(transpose(context, (0, 2, 1, 3)), (batch, length, dim))

    return _linear(merged, weights, f"{prefix}.output")


def _feedforward(x: Tensor, weights: Mapping[str, Tensor], prefix: str) -> Tensor:
    hidden = gelu(_linear(x, weights, f"{prefix}.expand"))
    return _linear(hidden, weights, f"{prefix}.contract")


def _norm(x: Tensor, weights: Mapping[str, Tensor], name: str, eps: float) -> Tensor:
    return layer_norm(x, weights[f"{name}.gain"], weights[f"{name}.bias"], eps)


def encode_tensors(
    params: EncoderParams,
    weights: Mapping[str, Tensor],
    seq: TokenSequence,
    positional: bool = True,
    eps: float = 1e-5,
    visible: np.ndarray | None = None,
) -> Tensor:
    """
    Tape-level forward pass of one head over a batch of sequences.

    Parameters
    ----------
    params
        Supplies the architecture (the arrays themselves come from `weights`).
    weights
        Tensors keyed by canonical parameter name; training passes tracked
        leaves here.
    seq
        Batched tokens (B, L, D) and mask (B, L).
    positional
        Whether to add the sinusoidal encoding.
    eps
        Layer-norm epsilon.
    visible
        Optional (L,) slot visibility; invisible slots are removed from every
        other token's attention keys.

    Returns
    -------
    Tensor
        (B, L, D) outputs; unmasked rows are unit length, masked rows zero.
    """
    if seq.tokens.ndim != 3 or seq.dim != params.dim:
        raise DimensionError(
            f"Expected (B, L, {params.dim}) tokens, got {seq.tokens.shape}"
        )

    if not np.all(seq.mask.any(axis=-1)):
        raise DimensionError("Every sequence needs at least one unmasked slot")

    # Padded payloads never enter the network.
    inputs = np.where(seq.mask[..., None], seq.tokens, 0.0) * math.sqrt(params.dim)

    if positional:
        inputs = inputs + positional_encoding(seq.length, params.dim)[None, :, :]

    allowed = attention_mask(seq.mask, visible)
    hidden = constant(inputs)

    for layer in range(params.num_layers):
        prefix = f"layers.{layer}"

        if params.architecture == "transformer":
            normed = _norm(hidden, weights, f"{prefix}.attention_norm", eps)
            hidden = add(
                hidden,
                _self_attention(
                    normed, weights, f"{prefix}.attention", params.heads, allowed
                ),
            )

        normed = _norm(hidden, weights, f"{prefix}.feedforward_norm", eps)
        hidden = add(hidden, _feedforward(normed, weights, f"{prefix}.feedforward"))

    output = l2_normalize(_norm(hidden, weights, "final_norm", eps), seq.mask)

    if not np.all(np.isfinite(output.data)):
        raise NonFiniteError("Encoder produced non-finite activations")

    return output


def bypass_tensors(seq: TokenSequence) -> Tensor:
    """
    Identity-bypass head: L2 normalisation of the inputs.
    """
    return l2_normalize(apply_mask(constant(seq.tokens), seq.mask[..., None]), seq.mask)


def encode(
    params: EncoderParams | None,
    seq: TokenSequence,
    positional: bool = True,
    eps: float = 1e-5,
    visible: np.ndarray | None = None,
) -> TokenSequence:
    """
    Contextualise a sequence (L, D) or a batch (B, L, D). `params=None` is the
    identity-bypass head.
    """
    single = seq.tokens.ndim == 2
    batch = TokenSequence(tokens=seq.tokens[None], mask=seq.mask[None]) if single else seq

    if params is None:
        output = bypass_tensors(batch)
    else:
        weights = {name: Tensor(array) for name, array in params.tensors.items()}
        output = encode_tensors(params, weights, batch, positional, eps, visible)

    tokens = output.data[0] if single else output.data

    return TokenSequence(tokens=tokens, mask=seq.mask)
