"""
Finite-difference check of the full training loss (encode both modalities,
build the in-batch bundle, contrastive loss) against reverse-mode gradients.
"""

from dataclasses import dataclass

from structlog.typing import FilteringBoundLogger

from finematch.config.settings import RunConfig
from finematch.core.autodiff import Tensor, finite_diff_check
from finematch.core.models import PairedDataset

from .ingest import assemble_pairs
from .synth import synth_pairs
from .training import init_heads, pipeline_loss

TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_err: float
    parameters: int
    entries: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def pipeline_grad_check(
    dim: int = 16,
    batch: int = 3,
    seed: int = 0,
    n_entities: int = 3,
    m_relations: int = 3,
    heads: int = 2,
    entries: int | None = None,
    eps: float = 1e-5,
    config: RunConfig | None = None,
    log: FilteringBoundLogger | None = None,
) -> GradCheckResult:
    """
    Compare analytic and central-difference gradients of the batch loss with
    respect to every parameter of both heads.

    Parameters
    ----------
    dim, batch, n_entities, m_relations, heads
        Problem size. Components are partially padded so masking is covered.
    seed
        Seeds the synthetic batch and the initial weights.
    entries
        Check at most this many entries per parameter (all by default).
    eps
        Finite-difference half-width.
    config
        Base configuration for the remaining knobs (temperature, channels,
        architecture...). Its size and bypass fields are overridden.
    """
    base = config.model_dump() if config is not None else {}
    config = RunConfig(
        **{
            **base,
            "dim": dim,
            "heads": heads,
            "n_entities": n_entities,
            "m_relations": m_relations,
            "batch_size": max(batch, 2),
            "seed": seed,
            "image_bypass": False,
            "text_bypass": False,
            "train_image_encoder": True,
            "train_text_encoder": True,
        }
    )

    dataset = synth_pairs(
        batch,
        dim,
        n_entities,
        m_relations,
        noise_sigma=0.5,
        seed=seed,
    )
    dataset = _drop_last_components(dataset)
    sequences = assemble_pairs(dataset)
    model = init_heads(config)

    def loss(weights: dict[str, Tensor]) -> Tensor:
        value, _ = pipeline_loss(model, weights, sequences, config)
        return value

    point = {name: leaf.data for name, leaf in model.weights().items()}
    worst = finite_diff_check(loss, point, eps=eps, entries=entries, seed=seed)
    result = GradCheckResult(
        max_rel_err=worst,
        parameters=len(point),
        entries=sum(
            v.size if entries is None else min(entries, v.size) for v in point.values()
        ),
    )

    if log is not None:
        log.bind(
            dim=dim,
            batch=batch,
            seed=seed,
            max_rel_err=result.max_rel_err,
            passed=result.passed,
        ).info("gradcheck.complete")

    return result


def _drop_last_components(dataset: PairedDataset) -> PairedDataset:
    """
    Remove the last entity and relation from every text so that padded slots
    appear in the checked batch.
    """
    pairs = []

    for image, text in dataset.pairs:
        update = {
            name: block[:-1]
            for name, block in (("entities", text.entities), ("relations", text.relations))
            if len(block) > 1
        }
        pairs.append((image, text.model_copy(update=update)))

    return dataset.model_copy(update={"pairs": pairs})
