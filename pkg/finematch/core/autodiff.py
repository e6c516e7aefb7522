"""
Reverse-mode differentiation over dense float64 arrays.

Operations record themselves on the active `Tape` (if any) so that `backward`
can walk them in reverse order. Outside of a tape every operation is a plain
numpy computation, which is what inference uses.

```python
with Tape() as tape:
    weight = Tensor(w, name="weight", requires_grad=True)
    loss = total(matmul(x, weight))

grads = backward(tape, loss, [weight])
```
"""

from collections.abc import Callable, Mapping, Sequence
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any

import numpy as np


class DimensionError(ValueError):
    pass


class MaskError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteError(ArithmeticError):
    pass


Backward = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tensor:
    """
    An immutable float64 array, optionally tracked for gradients.
    """

    __slots__ = ("data", "name", "requires_grad")

    data: np.ndarray
    name: str | None
    requires_grad: bool

    def __init__(
        self, data: Any, name: str | None = None, requires_grad: bool = False
    ):
        array = np.array(data, dtype=np.float64)
        array.flags.writeable = False

        self.data = array
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"Cannot take item of tensor with shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return subtract(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return multiply(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


@dataclass(frozen=True)
class Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Backward


class Tape:
    """
    Ordered record of the primitive operations of one forward pass. A tape is
    single-writer: it is bound to the current context while open and may not
    be nested.
    """

    nodes: list[Node]
    check_finite: bool

    def __init__(self, check_finite: bool = False):
        self.nodes = []
        self.check_finite = check_finite
        self._token = None

    def __enter__(self) -> "Tape":
        if _ACTIVE_TAPE.get() is not None:
            raise TapeError("A tape is already recording in this context")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE_TAPE: ContextVar[Tape | None] = ContextVar("finematch_tape", default=None)


def constant(data: Any) -> Tensor:
    if isinstance(data, Tensor):
        return data
    return Tensor(data)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Backward) -> Tensor:
    tape = _ACTIVE_TAPE.get()

    if tape is not None and tape.check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError("Non-finite values produced during the forward pass")

    tracked = tape is not None and any(x.requires_grad for x in inputs)
    output = Tensor(data, requires_grad=tracked)

    if tracked:
        tape.record(Node(output=output, inputs=inputs, backward=backward))

    return output


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """
    Sum a broadcast gradient back down to `shape`.
    """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)

    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)

    return grad


def _broadcast_mask(mask: Any, shape: tuple[int, ...]) -> np.ndarray:
    try:
        return np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    except ValueError:
        raise DimensionError(
            f"Mask of shape {np.shape(mask)} does not broadcast to {shape}"
        )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes; leading axes broadcast.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul requires at least two dimensions per operand")

    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"Inner dimensions do not agree: {a.shape} x {b.shape}"
        )

    def backward(g: np.ndarray):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _emit(a.data @ b.data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), backward)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    def backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), backward)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    def backward(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(g: np.ndarray):
        return (g * factor,)

    return _emit(a.data * factor, (a,), backward)


def total(a: Tensor, axis: int | None = None) -> Tensor:
    """
    Sum over one axis, or over everything when `axis` is None.
    """

    def backward(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit(np.sum(a.data, axis=axis), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g: np.ndarray):
        return (g.reshape(a.shape),)

    return _emit(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g: np.ndarray):
        return (np.transpose(g, inverse),)

    return _emit(np.transpose(a.data, axes), (a,), backward)


def index(a: Tensor, key: Any) -> Tensor:
    """
    Basic (slice/integer) indexing.
    """

    def backward(g: np.ndarray):
        grad = np.zeros(a.shape)
        np.add.at(grad, key, g)
        return (grad,)

    return _emit(a.data[key], (a,), backward)


def apply_mask(a: Tensor, mask: Any) -> Tensor:
    """
    Zero every entry where `mask` is false.
    """
    mask = _broadcast_mask(mask, a.shape)

    def backward(g: np.ndarray):
        return (np.where(mask, g, 0.0),)

    return _emit(np.where(mask, a.data, 0.0), (a,), backward)


def softmax_rows(m: Tensor, mask: Any = None) -> Tensor:
    """
    Softmax over the last axis. Masked columns come out as exactly zero; the
    row maximum is taken over unmasked entries only.

    Raises
    ------
    MaskError
        If any row has every column masked.
    """
    if mask is None:
        mask = np.ones(m.shape, dtype=bool)
    else:
        mask = _broadcast_mask(mask, m.shape)

    if not np.all(mask.any(axis=-1)):
        raise MaskError("softmax_rows received a fully masked row")

    shifted = np.where(mask, m.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    exps = np.where(mask, np.exp(shifted), 0.0)
    probs = exps / exps.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        return (probs * (g - inner),)

    return _emit(probs, (m,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Standardise the last axis to zero mean and unit variance, then apply the
    affine `gain`/`bias`.
    """
    if x.shape[-1] < 1 or gain.shape != (x.shape[-1],) or bias.shape != gain.shape:
        raise DimensionError(
            f"layer_norm expects gain/bias of shape ({x.shape[-1]},), got "
            f"{gain.shape} and {bias.shape}"
        )

    mean = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mean
    variance = (centred * centred).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(variance + eps)
    normalised = centred * rstd

    def backward(g: np.ndarray):
        grad_gain = (g * normalised).reshape(-1, x.shape[-1]).sum(axis=0)
        grad_bias = g.reshape(-1, x.shape[-1]).sum(axis=0)
        grad_hat = g * gain.data
        grad_x = rstd * (
            grad_hat
            - grad_hat.mean(axis=-1, keepdims=True)
            - normalised * (grad_hat * normalised).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias

    return _emit(normalised * gain.data + bias.data, (x, gain, bias), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """
    Tanh approximation of GELU (smooth everywhere, so finite differences
    agree with the analytic gradient).
    """
    inner = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)

    def backward(g: np.ndarray):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return _emit(0.5 * x.data * (1.0 + t), (x,), backward)


def l2_normalize(x: Tensor, mask: Any = None) -> Tensor:
    """
    Scale every row (last axis) to unit length. Rows with a false mask bit
    come out as zero vectors and receive no gradient.
    """
    row_shape = x.shape[:-1]
    mask = (
        np.ones(row_shape, dtype=bool)
        if mask is None
        else _broadcast_mask(mask, row_shape)
    )

    norm = np.sqrt((x.data * x.data).sum(axis=-1))

    if np.any(mask & (norm == 0.0)):
        raise NonFiniteError("Cannot normalise a zero-length unmasked row")

    safe = np.where(mask, norm, 1.0)[..., None]
    keep = mask[..., None]
    unit = np.where(keep, x.data / safe, 0.0)

    def backward(g: np.ndarray):
        radial = (g * unit).sum(axis=-1, keepdims=True)
        return (np.where(keep, (g - unit * radial) / safe, 0.0),)

    return _emit(unit, (x,), backward)


def masked_max(x: Tensor, mask: Any) -> Tensor:
    """
    Maximum over unmasked entries of the last axis; zero where the whole axis
    is masked. The subgradient goes to the lowest-index maximiser.
    """
    mask = _broadcast_mask(mask, x.shape)
    present = mask.any(axis=-1)

    filled = np.where(mask, x.data, -np.inf)
    winner = np.argmax(filled, axis=-1)[..., None]
    best = np.take_along_axis(filled, winner, axis=-1)[..., 0]

    def backward(g: np.ndarray):
        grad = np.zeros(x.shape)
        np.put_along_axis(grad, winner, np.where(present, g, 0.0)[..., None], axis=-1)
        return (grad,)

    return _emit(np.where(present, best, 0.0), (x,), backward)


def masked_mean(x: Tensor, mask: Any) -> Tensor:
    """
    Mean over unmasked entries of the last axis; zero where the whole axis is
    masked.
    """
    mask = _broadcast_mask(mask, x.shape)
    count = mask.sum(axis=-1)
    divisor = np.maximum(count, 1)[..., None]

    summed = np.where(mask, x.data, 0.0).sum(axis=-1)

    def backward(g: np.ndarray):
        return (np.where(mask, g[..., None] / divisor, 0.0),)

    return _emit(np.where(count > 0, summed / divisor[..., 0], 0.0), (x,), backward)


def cross_entropy_rows(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """
    Per-row negative log-softmax probability of the target column, with
    log-sum-exp stabilisation.
    """
    rows = np.arange(logits.shape[0])
    targets = np.asarray(targets, dtype=np.intp)

    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy_rows expects (rows, classes) logits and one target "
            f"per row, got {logits.shape} and {targets.shape}"
        )

    peak = logits.data.max(axis=-1, keepdims=True)
    exps = np.exp(logits.data - peak)
    sums = exps.sum(axis=-1, keepdims=True)
    lse = peak[:, 0] + np.log(sums[:, 0])

    def backward(g: np.ndarray):
        grad = exps / sums
        grad[rows, targets] -= 1.0
        return (grad * g[:, None],)

    return _emit(lse - logits.data[rows, targets], (logits,), backward)


def backward(
    tape: Tape, loss: Tensor, params: Sequence[Tensor]
) -> dict[str, np.ndarray]:
    """
    Propagate from a scalar `loss` back through `tape`.

    Parameters
    ----------
    tape
        The tape the forward pass was recorded on.
    loss
        A single-element tensor produced on the tape.
    params
        Named leaf tensors to report gradients for. Parameters the loss does
        not depend on get a zero gradient.

    Returns
    -------
    dict[str, np.ndarray]
        Gradient for every parameter, keyed by parameter name.
    """
    if loss.data.size != 1:
        raise TapeError(f"Backward needs a scalar seed, got shape {loss.shape}")

    produced = any(node.output is loss for node in tape.nodes)
    if not produced and not any(loss is p for p in params):
        raise TapeError("The loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}

    for node in reversed(tape.nodes):
        upstream = grads.pop(id(node.output), None)

        if upstream is None:
            continue

        for source, grad in zip(node.inputs, node.backward(upstream)):
            if grad is None or not source.requires_grad:
                continue

            key = id(source)
            grads[key] = grads[key] + grad if key in grads else grad

    result = {}

    for param in params:
        if param.name is None:
            raise TapeError("Parameters passed to backward must be named")
        result[param.name] = grads.get(id(param), np.zeros(param.shape))

    return result


def finite_diff_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    analytic: Mapping[str, np.ndarray] | None = None,
    entries: int | None = None,
    seed: int = 0,
    abs_tol: float = 1e-8,
) -> float:
    """
    Compare analytic gradients of the scalar function `f` against central
    differences.

    Parameters
    ----------
    f
        Maps named tensors to a scalar tensor.
    params
        Point to check at.
    eps
        Perturbation half-width.
    analytic
        Gradients to check. If not given they are computed with `backward`.
    entries
        If given, check at most this many randomly chosen entries per
        parameter rather than all of them.
    seed
        Seed for the entry sample.
    abs_tol
        Entries whose absolute disagreement is within this tolerance count as
        exact. Gradients that vanish identically (a bias ahead of a softmax,
        the sum of a layer norm) otherwise compare rounding noise to zero.

    Returns
    -------
    float
        max |analytic - numeric| / max(1e-12, |analytic| + |numeric|) over
        the entries that disagree by more than `abs_tol`.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    point = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    if analytic is None:
        with Tape() as tape:
            leaves = {k: Tensor(v, name=k, requires_grad=True) for k, v in point.items()}
            value = f(leaves)
        analytic = backward(tape, value, list(leaves.values()))

    def evaluate(values: Mapping[str, np.ndarray]) -> float:
        result = f({k: Tensor(v, name=k) for k, v in values.items()}).item()
        if not np.isfinite(result):
            raise NonFiniteError("Function is not finite at a perturbed point")
        return result

    rng = np.random.default_rng(seed)
    worst = 0.0

    for name, base in point.items():
        flat_count = base.size
        positions = np.arange(flat_count)

        if entries is not None and entries < flat_count:
            positions = np.sort(rng.choice(flat_count, size=entries, replace=False))

        expected = np.asarray(analytic[name]).reshape(-1)

        for position in positions:
            shifted = dict(point)
            nudged = base.copy().reshape(-1)

            nudged[position] = base.reshape(-1)[position] + eps
            shifted[name] = nudged.reshape(base.shape)
            upper = evaluate(shifted)

            nudged[position] = base.reshape(-1)[position] - eps
            shifted[name] = nudged.reshape(base.shape)
            lower = evaluate(shifted)

            numeric = (upper - lower) / (2.0 * eps)
            exact = expected[position]
            difference = abs(exact - numeric)
            if difference <= abs_tol:
                continue
            error = difference / max(1e-12, abs(exact) + abs(numeric))
            worst = max(worst, error)

    return worst
