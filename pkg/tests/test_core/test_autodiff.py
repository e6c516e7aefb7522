"""
Tests the tape, the primitives, and the finite-difference checker.
"""

import numpy as np
import pytest

from finematch.core.autodiff import (
    DimensionError,
    MaskError,
    NonFiniteError,
    Tape,
    TapeError,
    Tensor,
    backward,
    cross_entropy_rows,
    finite_diff_check,
    gelu,
    index,
    l2_normalize,
    layer_norm,
    masked_max,
    masked_mean,
    matmul,
    multiply,
    reshape,
    scale,
    softmax_rows,
    total,
    transpose,
)


def test_matmul_examples():
    identity = Tensor(np.eye(2))
    assert np.array_equal(matmul(identity, identity).data, np.eye(2))

    product = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert np.array_equal(product.data, [[2.0], [4.0]])

    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))

    expected = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                expected[i, j] += a[i, k] * b[k, j]

    assert np.allclose(matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-12)


def test_matmul_associative():
    rng = np.random.default_rng(1)

    for _ in range(20):
        a, b, c = (Tensor(rng.standard_normal(shape)) for shape in ((3, 4), (4, 5), (5, 2)))
        left = matmul(matmul(a, b), c).data
        right = matmul(a, matmul(b, c)).data
        assert np.allclose(left, right, rtol=1e-9, atol=1e-12)


def test_softmax_examples():
    uniform = softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
    assert np.allclose(uniform.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    masked = softmax_rows(Tensor([[0.0, 0.0, 0.0]]), mask=[True, True, False])
    assert np.allclose(masked.data, [[0.5, 0.5, 0.0]], atol=1e-15)
    assert masked.data[0, 2] == 0.0

    large = softmax_rows(Tensor([[1000.0, 1000.5, 999.0]]))
    assert np.all(np.isfinite(large.data))
    assert large.data.sum() == pytest.approx(1.0, abs=1e-12)


def test_softmax_rows_shift_invariant():
    rng = np.random.default_rng(2)
    m = rng.standard_normal((4, 6))

    base = softmax_rows(Tensor(m)).data
    shifted = softmax_rows(Tensor(m + 7.5)).data

    assert np.allclose(base.sum(axis=-1), 1.0, atol=1e-12)
    assert np.allclose(base, shifted, atol=1e-12)


def test_softmax_all_masked_row():
    with pytest.raises(MaskError):
        softmax_rows(Tensor([[1.0, 2.0]]), mask=[[False, False]])


def test_layer_norm_examples():
    ones = Tensor(np.ones(2))
    zeros = Tensor(np.zeros(2))

    constant = layer_norm(Tensor([[3.0, 3.0]]), ones, zeros)
    assert np.array_equal(constant.data, [[0.0, 0.0]])

    two_point = layer_norm(Tensor([[1.0, 3.0]]), ones, zeros, eps=0.0)
    assert np.allclose(two_point.data, [[-1.0, 1.0]], atol=1e-15)

    bias = Tensor([0.25, -2.0])
    flat = layer_norm(Tensor([[1.0, 5.0]]), Tensor(np.zeros(2)), bias)
    assert np.array_equal(flat.data, [[0.25, -2.0]])


def test_backward_examples():
    with Tape() as tape:
        p = Tensor([1.0, 2.0, 3.0, 4.0], name="p", requires_grad=True)
        loss = total(p)

    assert np.array_equal(backward(tape, loss, [p])["p"], np.ones(4))

    with Tape() as tape:
        p = Tensor([1.0, 2.0], name="p", requires_grad=True)
        unused = Tensor([5.0], name="unused", requires_grad=True)
        loss = scale(total(multiply(p, p)), 0.5)

    grads = backward(tape, loss, [p, unused])
    assert np.array_equal(grads["p"], [1.0, 2.0])
    assert np.array_equal(grads["unused"], [0.0])


def test_backward_rejects_non_scalar():
    with Tape() as tape:
        p = Tensor([1.0, 2.0], name="p", requires_grad=True)
        square = multiply(p, p)

    with pytest.raises(TapeError):
        backward(tape, square, [p])


def test_backward_requires_names():
    with Tape() as tape:
        p = Tensor([1.0], requires_grad=True)
        loss = total(p)

    with pytest.raises(TapeError):
        backward(tape, loss, [p])


def test_tapes_do_not_nest():
    with Tape():
        with pytest.raises(TapeError):
            with Tape():
                pass


def test_operations_outside_a_tape_are_untracked():
    p = Tensor([1.0, 2.0], name="p", requires_grad=True)
    result = total(multiply(p, p))

    assert not result.requires_grad
    assert result.item() == 5.0


def test_check_finite_tape():
    with pytest.raises(NonFiniteError):
        with Tape(check_finite=True):
            scale(Tensor([1e308]), 10.0)


def test_l2_normalize_masks_rows():
    x = Tensor([[3.0, 4.0], [0.0, 0.0], [1e9, 5.0]])
    unit = l2_normalize(x, mask=[True, False, False])

    assert np.allclose(unit.data[0], [0.6, 0.8], atol=1e-15)
    assert np.array_equal(unit.data[1:], np.zeros((2, 2)))

    with pytest.raises(NonFiniteError):
        l2_normalize(Tensor([[0.0, 0.0]]))


def test_masked_max_and_mean():
    x = Tensor([[1.0, 5.0, 5.0, 100.0], [2.0, 3.0, 4.0, 5.0]])
    mask = np.array([[True, True, True, False], [False, False, False, False]])

    assert np.array_equal(masked_max(x, mask).data, [5.0, 0.0])
    assert np.array_equal(masked_mean(x, mask).data, [11.0 / 3.0, 0.0])

    with Tape() as tape:
        leaf = Tensor(x.data, name="x", requires_grad=True)
        loss = total(masked_max(leaf, mask))

    # Ties route to the lowest index.
    assert np.array_equal(
        backward(tape, loss, [leaf])["x"], [[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]
    )


def test_cross_entropy_rows():
    losses = cross_entropy_rows(Tensor([[2.0, 0.0], [0.0, 0.0]]), [0, 1])

    assert losses.data[0] == pytest.approx(np.log1p(np.exp(-2.0)), abs=1e-15)
    assert losses.data[1] == pytest.approx(np.log(2.0), abs=1e-15)


def test_finite_diff_quadratic():
    def half_square(params):
        p = params["p"]
        return scale(total(multiply(p, p)), 0.5)

    point = {"p": np.array([0.3, -1.2, 2.5])}

    assert finite_diff_check(half_square, point, eps=1e-5) < 1e-9


def test_finite_diff_layer_norm_sum():
    rng = np.random.default_rng(3)

    def f(params):
        return total(layer_norm(params["x"], params["gain"], params["bias"]))

    point = {
        "x": rng.standard_normal((3, 5)),
        "gain": rng.standard_normal(5),
        "bias": rng.standard_normal(5),
    }

    assert finite_diff_check(f, point) < 1e-6


def test_finite_diff_detects_corrupted_gradient():
    def half_square(params):
        p = params["p"]
        return scale(total(multiply(p, p)), 0.5)

    p = np.array([1.0, -2.0])

    error = finite_diff_check(half_square, {"p": p}, analytic={"p": 2.0 * p})

    assert error == pytest.approx(1.0 / 3.0, abs=1e-6)


def test_finite_diff_rejects_bad_eps():
    with pytest.raises(ValueError):
        finite_diff_check(lambda params: total(params["p"]), {"p": np.ones(2)}, eps=0.0)


def test_primitive_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    mask = rng.random((2, 3, 4)) > 0.3
    mask[..., 0] = True

    def f(params):
        x = params["x"]
        w = params["w"]
        h = gelu(matmul(x, w))
        h = transpose(reshape(h, (2, 3, 4)), (0, 1, 2))
        attention = softmax_rows(h, mask)
        unit = l2_normalize(multiply(attention, h), mask.any(axis=-1))
        pooled = masked_mean(masked_max(unit, mask), np.ones((2, 3), dtype=bool))
        return total(multiply(pooled, index(params["v"], slice(0, 2))))

    point = {
        "x": rng.standard_normal((2, 3, 5)),
        "w": rng.standard_normal((5, 4)),
        "v": rng.standard_normal(3),
    }

    assert finite_diff_check(f, point) < 1e-5
