"""
AdamW with decoupled weight decay, the StepLR schedule, and global-norm
gradient clipping. Everything here is functional: updates return new
parameters and state rather than mutating them.
"""

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from finematch.core.autodiff import NonFiniteError


@dataclass(frozen=True)
class OptimizerState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """
    One AdamW update:

        m <- beta1 m + (1 - beta1) g
        v <- beta2 v + (1 - beta2) g^2
        p <- p - lr (m_hat / (sqrt(v_hat) + eps) + weight_decay p)

    with bias-corrected m_hat, v_hat. Parameters without a gradient entry are
    returned unchanged.

    Raises
    ------
    NonFiniteError
        If any gradient is non-finite; nothing is updated.
    """
    if lr < 0:
        raise ValueError(f"Learning rate must be non-negative, got {lr}")

    for name, grad in grads.items():
        if name not in params:
            raise KeyError(f"Gradient for unknown parameter {name}")
        if np.shape(grad) != np.shape(params[name]):
            raise ValueError(
                f"Gradient for {name} has shape {np.shape(grad)}, parameter has "
                f"{np.shape(params[name])}"
            )
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"Non-finite gradient for {name}")

    step = state.step + 1
    first_correction = 1.0 - beta1**step
    second_correction = 1.0 - beta2**step

    new_params = dict(params)
    first_moment = dict(state.first_moment)
    second_moment = dict(state.second_moment)

    for name, grad in grads.items():
        value = np.asarray(params[name], dtype=np.float64)
        m = first_moment.get(name, np.zeros_like(value))
        v = second_moment.get(name, np.zeros_like(value))

        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad

        m_hat = m / first_correction
        v_hat = v / second_correction

        new_params[name] = value - lr * (
            m_hat / (np.sqrt(v_hat) + eps) + weight_decay * value
        )
        first_moment[name] = m
        second_moment[name] = v

    return new_params, OptimizerState(
        first_moment=first_moment, second_moment=second_moment, step=step
    )


def steplr(lr0: float, epoch: int, step_size: int, gamma: float) -> float:
    """
    lr0 * gamma ** floor(epoch / step_size).
    """
    if step_size < 1:
        raise ValueError(f"step_size must be at least 1, got {step_size}")

    return lr0 * gamma ** (epoch // step_size)


def clip_by_global_norm(
    grads: Mapping[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """
    Rescale all gradients together so that their joint L2 norm is at most
    `max_norm`. Returns the (possibly rescaled) gradients and the norm before
    clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))

    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm

    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm
