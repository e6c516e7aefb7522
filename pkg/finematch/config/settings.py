"""
Main settings object.
"""

from pathlib import Path
from typing import Any, Literal

from dotenv import dotenv_values
from pydantic import Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class RunConfig(BaseSettings):
    # Model layout
    dim: int | None = None  # Inferred from the data when unset
    n_entities: int = Field(default=10, ge=0)
    m_relations: int = Field(default=10, ge=0)
    heads: int = Field(default=4, ge=1)
    ffn_ratio: int = Field(default=4, ge=1)
    num_layers: int = Field(default=2, ge=1)
    architecture: Literal["transformer", "mlp"] = "transformer"
    positional_encoding: bool = True
    layer_norm_eps: float = Field(default=1e-5, ge=0.0)

    # Which heads exist and which are updated. A bypassed head is replaced by
    # L2 normalisation of its inputs.
    image_bypass: bool = False
    text_bypass: bool = False
    train_image_encoder: bool = True
    train_text_encoder: bool = True

    # Optimisation. Defaults are sized for a single CPU; large runs use
    # batch_size=1600.
    batch_size: int = 64
    epochs: int = Field(default=30, ge=0)
    lr0: float = 1e-4
    step_size: int = Field(default=10, ge=1)
    gamma: float = 0.5
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    clip_grad_norm: float | None = None
    shuffle: bool = True
    seed: int = 0

    # Objective
    temperature: float = 1.0
    use_global: bool = True
    use_entity: bool = True
    use_relation: bool = True
    global_loss_weight: float = Field(default=1.0, ge=0.0)
    isolate_disabled: bool = False

    # Inference weights for the fused scores
    alpha1: float = 0.1
    alpha2: float = 0.033
    beta1: float = 0.33

    model_config = SettingsConfigDict(env_prefix="FINEMATCH_", extra="forbid")

    @model_validator(mode="after")
    def check_ranges(self) -> "RunConfig":
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 to provide negatives")
        if self.lr0 < 0:
            raise ValueError("lr0 must be non-negative")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not (self.use_global or self.use_entity or self.use_relation):
            raise ValueError("At least one loss channel must be enabled")
        if self.clip_grad_norm is not None and self.clip_grad_norm <= 0:
            raise ValueError("clip_grad_norm must be positive when set")
        if self.dim is not None:
            if self.dim % self.heads != 0:
                raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")
            if self.positional_encoding and self.dim % 2 != 0:
                raise ValueError("Positional encoding needs an even dim")
        return self

    @property
    def sequence_length(self) -> int:
        return 1 + self.n_entities + self.m_relations


def read_config_file(path: Path) -> dict[str, str]:
    """
    Read a flat key=value file. Empty values are dropped so that they fall
    back to the defaults.
    """
    if not path.exists():
        raise FileNotFoundError(f"Config file {path} does not exist")

    return {k: v for k, v in dotenv_values(path).items() if v not in (None, "")}


def load_config(
    path: Path | None = None,
    overrides: dict[str, Any] | None = None,
    base: dict[str, Any] | None = None,
) -> RunConfig:
    """
    Build a `RunConfig`. Later sources win: `base` (e.g. the config stored
    in a checkpoint), then the file at `path`, then `overrides` (command-line
    flags). Environment variables with the `FINEMATCH_` prefix sit beneath all
    three.
    """
    values: dict[str, Any] = {}

    if base is not None:
        values.update(base)

    if path is not None:
        values.update(read_config_file(path))

    if overrides is not None:
        values.update({k: v for k, v in overrides.items() if v is not None})

    return RunConfig(**values)
